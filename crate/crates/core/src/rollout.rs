//! Time stepping of the reduced model.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::opinf::{ModelForm, RomOperators};
use crate::scalar::Real;
use crate::sidecar::{read_file, write_file, Decoder, Encoder};

const MAGIC: &[u8; 8] = b"DOPINFTJ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ProjectedTraining = 0,
    Rollout = 1,
}

/// A non-finite reduced coordinate appeared in this mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diverged {
    pub mode: usize,
}

/// Reduced states, one column per time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTrajectory<T> {
    pub states: Mat<T>,
    pub t0: f64,
    pub dt: f64,
    pub provenance: Provenance,
    /// Column index that would have been the first non-finite state.
    pub diverged_at: Option<usize>,
}

impl<T: Real> ReducedTrajectory<T> {
    pub fn projected(states: Mat<T>, dt: f64) -> Self {
        ReducedTrajectory {
            states,
            t0: 0.0,
            dt,
            provenance: Provenance::ProjectedTraining,
            diverged_at: None,
        }
    }

    pub fn r(&self) -> usize {
        self.states.nrows()
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t0 + k as f64 * self.dt).collect()
    }

    /// `t,q1,...,qr` with one row per instant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for k in 1..=self.r() {
            let _ = write!(s, ",q{k}");
        }
        s.push('\n');
        for (j, t) in self.times().into_iter().enumerate() {
            let _ = write!(s, "{t:e}");
            for &x in self.states.col(j) {
                let _ = write!(s, ",{:e}", x.to_f64());
            }
            s.push('\n');
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Encoder::new(MAGIC)
            .u8(self.provenance as u8)
            .f64(self.t0)
            .f64(self.dt)
            .u64(self.diverged_at.map_or(u64::MAX, |k| k as u64))
            .mat(&self.states)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, "trajectory")?;
        let provenance = match d.u8()? {
            0 => Provenance::ProjectedTraining,
            1 => Provenance::Rollout,
            k => return Err(Error::Format(format!("unknown provenance code {k}"))),
        };
        let t = ReducedTrajectory {
            provenance,
            t0: d.f64()?,
            dt: d.f64()?,
            diverged_at: match d.u64()? {
                u64::MAX => None,
                k => Some(k as usize),
            },
            states: d.mat()?,
        };
        d.finish()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn check_finite<T: Real>(q: &[T]) -> std::result::Result<(), Diverged> {
    match q.iter().position(|x| !x.is_finite()) {
        Some(mode) => Err(Diverged { mode }),
        None => Ok(()),
    }
}

/// One discrete step `A q + H w(q) + c`.
pub fn step_discrete<T: Real>(ops: &RomOperators<T>, q: &[T]) -> std::result::Result<Vec<T>, Diverged> {
    let next = ops.apply(q);
    check_finite(&next)?;
    Ok(next)
}

/// One classical Runge–Kutta step of `dq/dt = A q + H w(q) + c`.
pub fn step_rk4<T: Real>(ops: &RomOperators<T>, q: &[T], dt: T) -> std::result::Result<Vec<T>, Diverged> {
    let half = dt * T::half();
    let axpy = |x: &[T], a: T, y: &[T]| -> Vec<T> { x.iter().zip(y).map(|(&x, &y)| x + a * y).collect() };
    let k1 = ops.apply(q);
    let k2 = ops.apply(&axpy(q, half, &k1));
    let k3 = ops.apply(&axpy(q, half, &k2));
    let k4 = ops.apply(&axpy(q, dt, &k3));
    let sixth = dt / T::of(6.0);
    let two = T::two();
    let next: Vec<T> = (0..q.len())
        .map(|i| q[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    check_finite(&next)?;
    Ok(next)
}

/// Advances `q0` by `n_steps`; column 0 of the result is `q0`. Divergence
/// stops the rollout and is recorded instead of raised.
pub fn rollout<T: Real>(ops: &RomOperators<T>, q0: &[T], n_steps: usize) -> Result<ReducedTrajectory<T>> {
    if q0.len() != ops.r {
        return Err(Error::Shape(format!(
            "initial state of length {} for r = {}",
            q0.len(),
            ops.r
        )));
    }
    if ops.form == ModelForm::Continuous && !(ops.dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {} must be positive", ops.dt)));
    }
    let dt = T::of(ops.dt);
    let mut data = Vec::with_capacity(ops.r * (n_steps + 1));
    data.extend_from_slice(q0);
    let mut q = q0.to_vec();
    let mut diverged_at = None;
    for k in 1..=n_steps {
        let next = match ops.form {
            ModelForm::Discrete => step_discrete(ops, &q),
            ModelForm::Continuous => step_rk4(ops, &q, dt),
        };
        match next {
            Ok(next) => {
                data.extend_from_slice(&next);
                q = next;
            }
            Err(_) => {
                diverged_at = Some(k);
                break;
            }
        }
    }
    let cols = data.len() / ops.r.max(1);
    Ok(ReducedTrajectory {
        states: Mat::from_col_major(ops.r, cols, data)?,
        t0: 0.0,
        dt: ops.dt,
        provenance: Provenance::Rollout,
        diverged_at,
    })
}
