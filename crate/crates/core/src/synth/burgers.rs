//! Viscous Burgers equation on the periodic unit interval.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::snapshot_store::{DatasetHeader, DatasetWriter, Manifest};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BurgersIc {
    Zero,
    /// `offset + amplitude · sin(2π · mode · x)`
    Sine { amplitude: f64, mode: u32, offset: f64 },
}

impl BurgersIc {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            BurgersIc::Zero => 0.0,
            BurgersIc::Sine { amplitude, mode, offset } => offset + amplitude * (TAU * mode as f64 * x).sin(),
        }
    }
}

impl std::str::FromStr for BurgersIc {
    type Err = Error;

    /// `zero` or `sine:amplitude[:mode[:offset]]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad initial condition {s:?}"));
        if s == "zero" {
            return Ok(BurgersIc::Zero);
        }
        let mut parts = s.split(':');
        if parts.next() != Some("sine") {
            return Err(bad());
        }
        let amplitude = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let mode = parts.next().map_or(Ok(1), str::parse).map_err(|_| bad())?;
        let offset = parts.next().map_or(Ok(0.0), str::parse).map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(BurgersIc::Sine { amplitude, mode, offset })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersSpec {
    pub n_x: usize,
    pub viscosity: f64,
    /// Saved snapshots, the initial state included.
    pub n_t: usize,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps between saved snapshots.
    pub save_stride: usize,
    pub ic: BurgersIc,
}

impl BurgersSpec {
    pub fn dx(&self) -> f64 {
        1.0 / self.n_x as f64
    }

    /// Spacing of saved snapshots.
    pub fn snapshot_dt(&self) -> f64 {
        self.dt * self.save_stride as f64
    }

    fn validate(&self) -> Result<()> {
        if self.n_x < 3 || self.n_t == 0 || self.save_stride == 0 {
            return Err(Error::InvalidArgument(
                "Burgers needs n_x ≥ 3, n_t ≥ 1, save stride ≥ 1".into(),
            ));
        }
        if !(self.viscosity > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidArgument("viscosity and dt must be positive".into()));
        }
        Ok(())
    }
}

/// Skew-symmetric split of the advection term,
/// `−(u u_x + (u²)_x)/3 + ν u_xx`, so the discrete convection conserves energy.
fn rhs(u: &[f64], nu: f64, dx: f64, out: &mut [f64]) {
    let n = u.len();
    let (c1, c2) = (1.0 / (6.0 * dx), nu / (dx * dx));
    for i in 0..n {
        let (l, r) = (u[(i + n - 1) % n], u[(i + 1) % n]);
        let adv = u[i] * (r - l) + (r * r - l * l);
        out[i] = -c1 * adv + c2 * (r - 2.0 * u[i] + l);
    }
}

fn rk4_step(u: &mut [f64], nu: f64, dx: f64, dt: f64, work: &mut [Vec<f64>; 5]) {
    let [k1, k2, k3, k4, tmp] = work;
    let n = u.len();
    rhs(u, nu, dx, k1);
    for i in 0..n {
        tmp[i] = u[i] + 0.5 * dt * k1[i];
    }
    rhs(tmp, nu, dx, k2);
    for i in 0..n {
        tmp[i] = u[i] + 0.5 * dt * k2[i];
    }
    rhs(tmp, nu, dx, k3);
    for i in 0..n {
        tmp[i] = u[i] + dt * k3[i];
    }
    rhs(tmp, nu, dx, k4);
    for i in 0..n {
        u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn check_cfl(dt: f64, limit: f64) -> Result<()> {
    if dt > limit {
        return Err(Error::CflViolation { dt, max_dt: limit });
    }
    Ok(())
}

/// Integrates and returns the `n_x × n_t` snapshot matrix.
pub fn burgers_snapshots(spec: &BurgersSpec) -> Result<Mat<f64>> {
    spec.validate()?;
    let (n, dx, nu) = (spec.n_x, spec.dx(), spec.viscosity);
    check_cfl(spec.dt, 0.5 * dx * dx / nu)?;
    let mut u: Vec<f64> = (0..n).map(|i| spec.ic.eval(i as f64 * dx)).collect();
    let mut work: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut data = Vec::with_capacity(n * spec.n_t);
    for k in 0..spec.n_t {
        if k > 0 {
            for _ in 0..spec.save_stride {
                let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if umax > 0.0 {
                    check_cfl(spec.dt, 0.5 * dx / umax)?;
                }
                rk4_step(&mut u, nu, dx, spec.dt, &mut work);
            }
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::Generator(format!("Burgers state blew up before snapshot {k}")));
            }
        }
        data.extend_from_slice(&u);
    }
    Mat::from_col_major(n, spec.n_t, data)
}

/// Writes the Burgers snapshots as a single-variable dataset.
pub fn gen_burgers(path: &Path, spec: &BurgersSpec, shard_count: usize) -> Result<Manifest> {
    let s = burgers_snapshots(spec)?;
    if shard_count == 0 || shard_count > spec.n_x {
        return Err(Error::InvalidArgument(format!("{shard_count} shards for {} rows", spec.n_x)));
    }
    let mut writer = DatasetWriter::create(path, DatasetHeader::new(1, spec.n_x, spec.n_t))?;
    let (base, extra) = (spec.n_x / shard_count, spec.n_x % shard_count);
    let mut start = 0;
    for k in 0..shard_count {
        let len = base + (k < extra) as usize;
        writer.push_shard(&s.rows_range(start..start + len))?;
        start += len;
    }
    writer.finish()
}
