//! Running a per-rank closure on the chosen backend. The socket backend
//! either joins an existing group (rank given by flag or environment) or
//! spawns one child process per rank.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::Args;
use dopinf::comm::{
    run_group, BackendKind, CommHandle, PeerSource, SocketConfig, DEFAULT_TIMEOUT, ENV_PEERS, ENV_RANK,
    ENV_RENDEZVOUS, ENV_SIZE,
};
use dopinf::{Error, Result};

#[derive(Debug, Clone, Args)]
pub struct LaunchArgs {
    /// Number of ranks.
    #[arg(long, default_value_t = 1)]
    pub ranks: usize,
    /// Communication backend: loopback, inproc or socket.
    #[arg(long, default_value = "inproc")]
    pub backend: BackendKind,
    /// Socket backend: this process's rank (joins instead of spawning).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Socket backend: comma-separated `host:port` per rank.
    #[arg(long)]
    pub peers: Option<String>,
    /// Seconds to wait for peers.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    pub timeout: u64,
}

/// What the current process did.
pub enum Outcome {
    /// Ran ranks itself.
    Ran,
    /// Spawned socket workers; carries the first nonzero child status.
    Spawned(i32),
}

fn parse_peers(list: &str) -> Result<Vec<SocketAddr>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad peer address `{s}`")))
        })
        .collect()
}

fn worker_config(args: &LaunchArgs) -> Result<Option<SocketConfig>> {
    let env_rank = std::env::var(ENV_RANK).ok();
    if args.rank.is_none() && env_rank.is_none() {
        return Ok(None);
    }
    let mut config = if env_rank.is_some() {
        SocketConfig::from_env()?
    } else {
        let peers = args
            .peers
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--rank needs --peers".into()))?;
        SocketConfig {
            rank: 0,
            size: args.ranks,
            peers: PeerSource::List(parse_peers(peers)?),
            timeout: DEFAULT_TIMEOUT,
        }
    };
    if let Some(rank) = args.rank {
        config.rank = rank;
    }
    if let Some(peers) = &args.peers {
        config.peers = PeerSource::List(parse_peers(peers)?);
        config.size = args.ranks;
    }
    config.timeout = Duration::from_secs(args.timeout);
    Ok(Some(config))
}

fn rendezvous_dir() -> PathBuf {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("dopinf-launch-{}-{nanos}", std::process::id()))
}

fn spawn_workers(p: usize) -> Result<i32> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let dir = rendezvous_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let children = (0..p)
        .map(|rank| {
            Command::new(&exe)
                .args(&args)
                .env(ENV_RANK, rank.to_string())
                .env(ENV_SIZE, p.to_string())
                .env(ENV_RENDEZVOUS, &dir)
                .env_remove(ENV_PEERS)
                .spawn()
                .map_err(|e| Error::Transport(format!("spawning rank {rank}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut status = 0;
    for mut child in children {
        let code = child
            .wait()
            .map_err(|e| Error::Transport(format!("waiting for worker: {e}")))?
            .code()
            .unwrap_or(3);
        if status == 0 {
            status = code;
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(status)
}

/// Runs `f` once per rank. The lowest failing rank's error is returned and
/// the others are printed.
pub fn run_ranks<F>(args: &LaunchArgs, f: F) -> Result<Outcome>
where
    F: Fn(CommHandle) -> Result<()> + Sync,
{
    if args.backend == BackendKind::Socket {
        if let Some(config) = worker_config(args)? {
            f(config.connect()?)?;
            return Ok(Outcome::Ran);
        }
        return spawn_workers(args.ranks).map(Outcome::Spawned);
    }
    let results = run_group(args.backend, args.ranks, f)?;
    let mut first = None;
    for (rank, r) in results.into_iter().enumerate() {
        if let Err(e) = r {
            if first.is_some() {
                eprintln!("rank {rank}: {e}");
            } else {
                first = Some(e);
            }
        }
    }
    match first {
        Some(e) => Err(e),
        None => Ok(Outcome::Ran),
    }
}
