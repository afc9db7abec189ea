use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{BackendKind, CommHandle, Frame, Transport, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};

struct ChannelTransport {
    rank: usize,
    to: Vec<Option<Sender<Frame>>>,
    from: Vec<Option<Receiver<Frame>>>,
    timeout: Duration,
}

impl Transport for ChannelTransport {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()> {
        self.to[to]
            .as_ref()
            .ok_or_else(|| Error::Transport(format!("no channel to rank {to}")))?
            .send(frame)
            .map_err(|_| Error::Transport(format!("rank {to} has gone away")))
    }

    fn recv(&mut self, from: usize) -> Result<Frame> {
        let rx = self.from[from]
            .as_ref()
            .ok_or_else(|| Error::Transport(format!("no channel from rank {from}")))?;
        rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Transport(format!(
                "rank {} timed out waiting for rank {from}",
                self.rank
            )),
            RecvTimeoutError::Disconnected => {
                Error::Transport(format!("rank {from} disconnected"))
            }
        })
    }
}

/// Creates `p` connected handles, one per rank, for use on separate threads.
pub fn in_process_group(p: usize) -> Vec<CommHandle> {
    in_process_group_with_timeout(p, DEFAULT_TIMEOUT)
}

pub(crate) fn in_process_group_with_timeout(p: usize, timeout: Duration) -> Vec<CommHandle> {
    assert!(p >= 1);
    // senders[i][j]: i -> j
    let mut senders: Vec<Vec<Option<Sender<Frame>>>> = (0..p).map(|_| vec![None; p]).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Frame>>>> =
        (0..p).map(|_| (0..p).map(|_| None).collect()).collect();
    for i in 0..p {
        for j in 0..p {
            if i != j {
                let (tx, rx) = channel();
                senders[i][j] = Some(tx);
                receivers[j][i] = Some(rx);
            }
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (to, from))| {
            CommHandle::with_transport(
                rank,
                p,
                BackendKind::InProcess,
                Box::new(ChannelTransport {
                    rank,
                    to,
                    from,
                    timeout,
                }),
            )
        })
        .collect()
}

/// Runs `f` once per rank on `p` scoped threads and returns the results in
/// rank order. With `p == 1` the single rank runs on a loopback handle.
pub fn run_in_process<R, F>(p: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(CommHandle) -> R + Sync,
{
    if p == 1 {
        return vec![f(CommHandle::loopback())];
    }
    let handles = in_process_group(p);
    std::thread::scope(|s| {
        let joins: Vec<_> = handles
            .into_iter()
            .map(|h| {
                let f = &f;
                s.spawn(move || f(h))
            })
            .collect();
        joins
            .into_iter()
            .map(|j| j.join().expect("rank thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_peer_times_out() {
        let mut handles = in_process_group_with_timeout(2, Duration::from_millis(50));
        let mut h0 = handles.remove(0);
        // rank 1 never participates
        let err = h0.barrier().unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
        drop(handles);
    }
}
