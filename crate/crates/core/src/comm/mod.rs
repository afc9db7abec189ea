//! Message-passing layer used by every distributed step.
//!
//! All collectives are built on one primitive, an all-gather of byte frames:
//! each rank ends up with every rank's contribution and combines them itself
//! in a fixed order. That makes every rank's result bit-identical, and the
//! results identical across backends, at the cost of `O(p)` messages per rank.

mod inproc;
mod socket;

pub use inproc::{in_process_group, run_in_process};
pub use socket::{
    run_socket_threads, PeerSource, SocketConfig, ENV_PEERS, ENV_RANK, ENV_RENDEZVOUS, ENV_SIZE,
};

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// Default bound on how long a rank waits for a peer.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    /// A single rank; collectives return their input.
    Loopback,
    /// Ranks are threads of one process exchanging owned messages.
    InProcess,
    /// Ranks exchange length-prefixed frames over TCP.
    Socket,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loopback" => Ok(BackendKind::Loopback),
            "inproc" | "in-process" => Ok(BackendKind::InProcess),
            "socket" => Ok(BackendKind::Socket),
            other => Err(Error::InvalidArgument(format!("unknown backend `{other}`"))),
        }
    }
}

/// Order in which gathered contributions are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReduceOrder {
    /// `((x0 + x1) + x2) + …`
    #[default]
    RankOrdered,
    /// Pairwise tree `(x0 + x1) + (x2 + x3)`: shallower, but the rounding
    /// pattern changes with `p`.
    Tree,
}

/// Tags carried by every frame so out-of-step collectives are detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub(crate) enum CollectiveId {
    SumMatrix = 1,
    MaxVector = 2,
    Argmin = 3,
    Barrier = 4,
    Broadcast = 5,
    Gather = 6,
    SumFixed = 7,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Frame {
    pub collective: u8,
    pub seq: u64,
    pub rank: u32,
    pub payload: Vec<u8>,
}

pub(crate) trait Transport: Send {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()>;
    fn recv(&mut self, from: usize) -> Result<Frame>;
}

/// Candidate key for the global argmin: ordered by error, then β₁, β₂, then
/// owning rank. Infeasible candidates carry an infinite error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArgminKey {
    pub error: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub owner: usize,
}

impl ArgminKey {
    pub fn infeasible(beta1: f64, beta2: f64, owner: usize) -> Self {
        ArgminKey {
            error: f64::INFINITY,
            beta1,
            beta2,
            owner,
        }
    }

    pub fn cmp_key(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then(self.beta1.total_cmp(&other.beta1))
            .then(self.beta2.total_cmp(&other.beta2))
            .then(self.owner.cmp(&other.owner))
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32);
        b.extend_from_slice(&self.error.to_le_bytes());
        b.extend_from_slice(&self.beta1.to_le_bytes());
        b.extend_from_slice(&self.beta2.to_le_bytes());
        b.extend_from_slice(&(self.owner as u64).to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() != 32 {
            return Err(Error::Collective(format!("argmin payload of {} bytes", b.len())));
        }
        let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        Ok(ArgminKey {
            error: f(0),
            beta1: f(8),
            beta2: f(16),
            owner: u64::from_le_bytes(b[24..32].try_into().unwrap()) as usize,
        })
    }
}

/// One rank's endpoint. Owned by exactly one execution context; collectives
/// block until every rank has contributed.
pub struct CommHandle {
    rank: usize,
    size: usize,
    kind: BackendKind,
    transport: Option<Box<dyn Transport>>,
    seq: u64,
    order: ReduceOrder,
    comm_time: Duration,
}

impl std::fmt::Debug for CommHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CommHandle")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("kind", &self.kind)
            .field("seq", &self.seq)
            .finish()
    }
}

impl CommHandle {
    pub fn loopback() -> Self {
        CommHandle {
            rank: 0,
            size: 1,
            kind: BackendKind::Loopback,
            transport: None,
            seq: 0,
            order: ReduceOrder::RankOrdered,
            comm_time: Duration::ZERO,
        }
    }

    pub(crate) fn with_transport(
        rank: usize,
        size: usize,
        kind: BackendKind,
        transport: Box<dyn Transport>,
    ) -> Self {
        CommHandle {
            rank,
            size,
            kind,
            transport: Some(transport),
            seq: 0,
            order: ReduceOrder::RankOrdered,
            comm_time: Duration::ZERO,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn set_reduce_order(&mut self, order: ReduceOrder) {
        self.order = order;
    }

    pub fn reduce_order(&self) -> ReduceOrder {
        self.order
    }

    /// Wall time spent inside collectives so far.
    pub fn comm_time(&self) -> Duration {
        self.comm_time
    }

    /// Number of collectives issued so far.
    pub fn sequence(&self) -> u64 {
        self.seq
    }

    fn exchange(&mut self, id: CollectiveId, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let start = Instant::now();
        self.seq += 1;
        let out = match self.transport.as_mut() {
            None => Ok(vec![payload]),
            Some(t) => {
                let seq = self.seq;
                for to in (0..self.size).filter(|&r| r != self.rank) {
                    t.send(
                        to,
                        Frame {
                            collective: id as u8,
                            seq,
                            rank: self.rank as u32,
                            payload: payload.clone(),
                        },
                    )?;
                }
                let mut all = Vec::with_capacity(self.size);
                for from in 0..self.size {
                    if from == self.rank {
                        all.push(payload.clone());
                        continue;
                    }
                    let f = t.recv(from)?;
                    if f.collective != id as u8 || f.seq != seq || f.rank as usize != from {
                        return Err(Error::Collective(format!(
                            "rank {} expected {:?} #{seq} from rank {from}, got collective {} #{} from rank {}",
                            self.rank, id, f.collective, f.seq, f.rank
                        )));
                    }
                    all.push(f.payload);
                }
                Ok(all)
            }
        };
        self.comm_time += start.elapsed();
        out
    }

    /// Every rank's payload, indexed by rank.
    pub fn allgather_bytes(&mut self, payload: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        self.exchange(CollectiveId::Gather, payload)
    }

    pub fn barrier(&mut self) -> Result<()> {
        self.exchange(CollectiveId::Barrier, Vec::new()).map(|_| ())
    }

    /// `root`'s payload delivered to every rank.
    pub fn broadcast_bytes(&mut self, root: usize, payload: Vec<u8>) -> Result<Vec<u8>> {
        if root >= self.size {
            return Err(Error::Collective(format!("broadcast root {root} of {}", self.size)));
        }
        let mine = if self.rank == root { payload } else { Vec::new() };
        let mut all = self.exchange(CollectiveId::Broadcast, mine)?;
        Ok(std::mem::take(&mut all[root]))
    }

    /// Element-wise sum of every rank's matrix, combined in the handle's
    /// reduce order.
    pub fn allreduce_sum_matrix<T: Real>(&mut self, local: &Mat<T>) -> Result<Mat<T>> {
        let mut payload = Vec::with_capacity(16 + local.as_slice().len() * 8);
        payload.extend_from_slice(&(local.nrows() as u64).to_le_bytes());
        payload.extend_from_slice(&(local.ncols() as u64).to_le_bytes());
        for &x in local.as_slice() {
            payload.extend_from_slice(&x.to_f64().to_le_bytes());
        }
        let all = self.exchange(CollectiveId::SumMatrix, payload)?;
        let mats = all
            .iter()
            .enumerate()
            .map(|(r, b)| decode_matrix::<T>(b, local.shape(), r))
            .collect::<Result<Vec<_>>>()?;
        Ok(sum_in_order(mats, self.order))
    }

    /// Element-wise sum of vectors (same ordering rules as the matrix sum).
    pub fn allreduce_sum_vector<T: Real>(&mut self, local: &[T]) -> Result<Vec<T>> {
        let m = Mat::from_col_major(local.len(), 1, local.to_vec())?;
        Ok(self.allreduce_sum_matrix(&m)?.into_vec())
    }

    /// Element-wise maximum; order-independent, hence bit-exact.
    pub fn allreduce_max_vector<T: Real>(&mut self, local: &[T]) -> Result<Vec<T>> {
        let m = Mat::from_col_major(local.len(), 1, local.to_vec())?;
        let mut payload = Vec::new();
        payload.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        payload.extend_from_slice(&1u64.to_le_bytes());
        for &x in local {
            payload.extend_from_slice(&x.to_f64().to_le_bytes());
        }
        let all = self.exchange(CollectiveId::MaxVector, payload)?;
        let mut out = local.to_vec();
        for (r, b) in all.iter().enumerate() {
            let v = decode_matrix::<T>(b, m.shape(), r)?;
            for (o, &x) in out.iter_mut().zip(v.as_slice()) {
                *o = o.max(x);
            }
        }
        Ok(out)
    }

    /// Exact integer sum of fixed-point accumulators (see [`crate::repro`]).
    pub fn allreduce_sum_fixed(&mut self, local: &[i128]) -> Result<Vec<i128>> {
        let mut payload = Vec::with_capacity(8 + local.len() * 16);
        payload.extend_from_slice(&(local.len() as u64).to_le_bytes());
        for &x in local {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        let all = self.exchange(CollectiveId::SumFixed, payload)?;
        let mut out = vec![0i128; local.len()];
        for (r, b) in all.iter().enumerate() {
            let n = u64::from_le_bytes(b[..8].try_into().unwrap()) as usize;
            if n != local.len() || b.len() != 8 + 16 * n {
                return Err(Error::Collective(format!(
                    "rank {r} contributed {n} fixed-point values, expected {}",
                    local.len()
                )));
            }
            for (o, c) in out.iter_mut().zip(b[8..].chunks_exact(16)) {
                *o += i128::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(out)
    }

    /// Global minimum under [`ArgminKey::cmp_key`].
    pub fn allreduce_argmin(&mut self, local: ArgminKey) -> Result<ArgminKey> {
        let all = self.exchange(CollectiveId::Argmin, local.encode())?;
        let keys = all
            .iter()
            .map(|b| ArgminKey::decode(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(keys
            .into_iter()
            .min_by(|a, b| a.cmp_key(b))
            .expect("at least one rank"))
    }
}

/// Runs `f` once per rank of a fresh `p`-rank group on `backend` and returns
/// the results in rank order. Loopback only supports `p == 1`.
pub fn run_group<R, F>(backend: BackendKind, p: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(CommHandle) -> R + Sync,
{
    if p == 0 {
        return Err(Error::InvalidArgument("rank count must be at least 1".into()));
    }
    match backend {
        BackendKind::Loopback if p == 1 => Ok(vec![f(CommHandle::loopback())]),
        BackendKind::Loopback => Err(Error::InvalidArgument(format!(
            "loopback backend runs one rank, {p} requested"
        ))),
        BackendKind::InProcess => Ok(run_in_process(p, f)),
        BackendKind::Socket => run_socket_threads(p, f),
    }
}

fn decode_matrix<T: Real>(b: &[u8], shape: (usize, usize), rank: usize) -> Result<Mat<T>> {
    if b.len() < 16 {
        return Err(Error::Collective(format!("rank {rank} sent a truncated matrix")));
    }
    let rows = u64::from_le_bytes(b[..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    if (rows, cols) != shape || b.len() != 16 + rows * cols * 8 {
        return Err(Error::Collective(format!(
            "rank {rank} contributed a {rows}x{cols} matrix, expected {}x{}",
            shape.0, shape.1
        )));
    }
    let data = b[16..]
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Mat::from_col_major(rows, cols, data)
}

fn sum_in_order<T: Real>(mut mats: Vec<Mat<T>>, order: ReduceOrder) -> Mat<T> {
    match order {
        ReduceOrder::RankOrdered => {
            let mut it = mats.into_iter();
            let mut acc = it.next().expect("at least one rank");
            for m in it {
                for (a, &b) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *a += b;
                }
            }
            acc
        }
        ReduceOrder::Tree => {
            while mats.len() > 1 {
                let mut next = Vec::with_capacity(mats.len().div_ceil(2));
                let mut it = mats.into_iter();
                while let Some(mut a) = it.next() {
                    if let Some(b) = it.next() {
                        for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                            *x += y;
                        }
                    }
                    next.push(a);
                }
                mats = next;
            }
            mats.pop().expect("at least one rank")
        }
    }
}
