//! Quadratic reduced operators learned by Tikhonov-regularized least squares.
//!
//! A reduced state `q` of length `r` is expanded into the feature row
//! `[q | w(q) | 1]`, where `w(q)` holds the `r(r+1)/2` products `q_k q_l`
//! with `k ≤ l`, ordered by `k` then `l`.

mod search;

pub use search::{
    grid_search, grid_search_opinf, stability_check, CandidateEvaluator, CandidateFit,
    CandidateRecord, OpInfEvaluator, RegSearchOutcome, SearchConfig, TrainingStats,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{least_squares_qr, Cholesky, Mat};
use crate::scalar::Real;
use crate::sidecar::{read_file, write_file, Decoder, Encoder};

const MAGIC: &[u8; 8] = b"DOPINFOP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelForm {
    /// `q_{k+1} = A q_k + H w(q_k) + c`.
    #[default]
    Discrete,
    /// `dq/dt = A q + H w(q) + c`.
    Continuous,
}

impl FromStr for ModelForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(ModelForm::Discrete),
            "continuous" => Ok(ModelForm::Continuous),
            _ => Err(Error::InvalidArgument(format!("unknown model form `{s}`"))),
        }
    }
}

impl fmt::Display for ModelForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelForm::Discrete => "discrete",
            ModelForm::Continuous => "continuous",
        })
    }
}

/// Which operator blocks the model contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelTerms {
    pub constant: bool,
    pub linear: bool,
    pub quadratic: bool,
}

impl Default for ModelTerms {
    fn default() -> Self {
        ModelTerms {
            constant: true,
            linear: true,
            quadratic: true,
        }
    }
}

impl ModelTerms {
    pub fn linear_only() -> Self {
        ModelTerms {
            constant: false,
            linear: true,
            quadratic: false,
        }
    }

    /// Number of unknowns per reduced equation.
    pub fn columns(&self, r: usize) -> usize {
        self.linear as usize * r + self.quadratic as usize * quad_dim(r) + self.constant as usize
    }
}

/// Letters `c`, `A`, `H` in any order, e.g. `cAH` or `A`.
impl FromStr for ModelTerms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = ModelTerms {
            constant: false,
            linear: false,
            quadratic: false,
        };
        for ch in s.chars() {
            let slot = match ch {
                'c' => &mut t.constant,
                'A' => &mut t.linear,
                'H' => &mut t.quadratic,
                _ => return Err(Error::InvalidArgument(format!("unknown model term `{ch}` in `{s}`"))),
            };
            *slot = true;
        }
        if t.columns(1) == 0 {
            return Err(Error::InvalidArgument("model has no terms".into()));
        }
        Ok(t)
    }
}

impl fmt::Display for ModelTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, ch) in [(self.constant, 'c'), (self.linear, 'A'), (self.quadratic, 'H')] {
            if on {
                write!(f, "{ch}")?;
            }
        }
        Ok(())
    }
}

pub fn quad_dim(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Symmetric self-product `w(q)`.
pub fn kron_sym<T: Real>(q: &[T]) -> Vec<T> {
    let r = q.len();
    let mut w = Vec::with_capacity(quad_dim(r));
    for k in 0..r {
        for l in k..r {
            w.push(q[k] * q[l]);
        }
    }
    w
}

/// Index of `q_k q_l` (`k ≤ l`) inside `w(q)`.
pub fn kron_sym_index(r: usize, k: usize, l: usize) -> usize {
    debug_assert!(k <= l && l < r);
    k * r - k * k.saturating_sub(1) / 2 + l - k
}

/// Regression rows available from `n_t` snapshots.
pub fn data_rows(form: ModelForm, n_t: usize) -> usize {
    match form {
        ModelForm::Discrete => n_t.saturating_sub(1),
        ModelForm::Continuous => n_t,
    }
}

/// Largest `r` whose compact operator count fits in the available rows.
pub fn max_admissible_r(form: ModelForm, n_t: usize, terms: ModelTerms) -> usize {
    let rows = data_rows(form, n_t);
    (1..).take_while(|&r| terms.columns(r) <= rows).last().unwrap_or(0)
}

/// Same bound when the quadratic block uses all `r²` Kronecker columns.
pub fn max_admissible_r_full_kronecker(form: ModelForm, n_t: usize, terms: ModelTerms) -> usize {
    let rows = data_rows(form, n_t);
    let cols = |r: usize| {
        terms.linear as usize * r + terms.quadratic as usize * r * r + terms.constant as usize
    };
    (1..).take_while(|&r| cols(r) <= rows).last().unwrap_or(0)
}

/// One feature row `[q | w(q) | 1]` restricted to the enabled terms.
pub fn data_row<T: Real>(q: &[T], terms: ModelTerms) -> Vec<T> {
    let mut row = Vec::with_capacity(terms.columns(q.len()));
    if terms.linear {
        row.extend_from_slice(q);
    }
    if terms.quadratic {
        row.extend(kron_sym(q));
    }
    if terms.constant {
        row.push(T::one());
    }
    row
}

/// Regression data: features `D̂` and right-hand side, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix<T> {
    pub features: Mat<T>,
    pub rhs: Mat<T>,
    pub r: usize,
    pub terms: ModelTerms,
    pub form: ModelForm,
    pub dt: f64,
}

/// Builds `D̂` and the right-hand side from an `r × n_t` reduced trajectory.
///
/// The discrete form pairs column `j` with column `j+1`; the continuous form
/// pairs every column with a second-order finite-difference derivative.
pub fn build_data_matrix<T: Real>(
    qhat: &Mat<T>,
    form: ModelForm,
    dt: f64,
    terms: ModelTerms,
) -> Result<DataMatrix<T>> {
    let (r, n_t) = qhat.shape();
    if r == 0 {
        return Err(Error::InvalidArgument("reduced dimension is zero".into()));
    }
    let min_cols = if form == ModelForm::Continuous { 3 } else { 2 };
    if n_t < min_cols {
        return Err(Error::InvalidArgument(format!(
            "{n_t} snapshots are too few for the {form:?} form"
        )));
    }
    if form == ModelForm::Continuous && !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
    }
    let rows = data_rows(form, n_t);
    let cols = terms.columns(r);
    if cols > rows {
        return Err(Error::Underdetermined {
            columns: cols,
            rows,
            max_r: max_admissible_r(form, n_t, terms),
        });
    }
    let mut features = Mat::zeros(rows, cols);
    for i in 0..rows {
        for (j, v) in data_row(qhat.col(i), terms).into_iter().enumerate() {
            features[(i, j)] = v;
        }
    }
    let rhs = match form {
        ModelForm::Discrete => Mat::from_fn(rows, r, |i, k| qhat[(k, i + 1)]),
        ModelForm::Continuous => {
            let h = T::of(2.0 * dt);
            let three = T::of(3.0);
            let four = T::of(4.0);
            Mat::from_fn(rows, r, |i, k| {
                let q = |j: usize| qhat[(k, j)];
                if i == 0 {
                    (-three * q(0) + four * q(1) - q(2)) / h
                } else if i == n_t - 1 {
                    (three * q(i) - four * q(i - 1) + q(i - 2)) / h
                } else {
                    (q(i + 1) - q(i - 1)) / h
                }
            })
        }
    };
    Ok(DataMatrix {
        features,
        rhs,
        r,
        terms,
        form,
        dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Cholesky factorization of the regularized normal equations.
    #[default]
    Cholesky,
    /// Householder QR of the stacked system `[D̂; √Γ]`.
    Qr,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cholesky" | "normal" => Ok(SolverKind::Cholesky),
            "qr" => Ok(SolverKind::Qr),
            _ => Err(Error::InvalidArgument(format!("unknown solver `{s}`"))),
        }
    }
}

/// A regression with `D̂ᵀD̂` and `D̂ᵀY` precomputed, so each `(β₁, β₂)` pair
/// costs one small factorization.
#[derive(Debug, Clone)]
pub struct Regression<T> {
    pub data: DataMatrix<T>,
    normal: Mat<T>,
    projected_rhs: Mat<T>,
}

impl<T: Real> Regression<T> {
    pub fn new(data: DataMatrix<T>) -> Result<Self> {
        let normal = data.features.gram();
        let projected_rhs = data.features.tr_matmul(&data.rhs)?;
        Ok(Regression {
            data,
            normal,
            projected_rhs,
        })
    }

    /// Diagonal of `Γ`: `β₁` on linear and constant columns, `β₂` on quadratic ones.
    pub fn gamma(&self, beta1: f64, beta2: f64) -> Vec<T> {
        let d = &self.data;
        let mut g = Vec::with_capacity(d.terms.columns(d.r));
        if d.terms.linear {
            g.extend(std::iter::repeat_n(T::of(beta1), d.r));
        }
        if d.terms.quadratic {
            g.extend(std::iter::repeat_n(T::of(beta2), quad_dim(d.r)));
        }
        if d.terms.constant {
            g.push(T::of(beta1));
        }
        g
    }

    pub fn solve(&self, beta1: f64, beta2: f64, solver: SolverKind) -> Result<RomOperators<T>> {
        if !(beta1 >= 0.0 && beta2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "regularization ({beta1}, {beta2}) must be nonnegative"
            )));
        }
        let gamma = self.gamma(beta1, beta2);
        let x = match solver {
            SolverKind::Cholesky => {
                let mut a = self.normal.clone();
                for (i, &g) in gamma.iter().enumerate() {
                    a[(i, i)] += g;
                }
                Cholesky::new(&a)?.solve(&self.projected_rhs)?
            }
            SolverKind::Qr => least_squares_qr(&self.data.features, &self.data.rhs, &gamma)?,
        };
        if !x.all_finite() {
            return Err(Error::SingularSystem);
        }
        Ok(RomOperators::from_solution(&self.data, &x, beta1, beta2))
    }

    /// `D̂ᵀ(D̂X − Y) + ΓX` for a candidate solution, used to check optimality.
    pub fn gradient(&self, ops: &RomOperators<T>) -> Result<Mat<T>> {
        let x = ops.stacked();
        let gamma = self.gamma(ops.beta1, ops.beta2);
        let mut g = self.normal.matmul(&x)?.sub(&self.projected_rhs)?;
        for j in 0..g.ncols() {
            for (i, &gi) in gamma.iter().enumerate() {
                g[(i, j)] += gi * x[(i, j)];
            }
        }
        Ok(g)
    }
}

/// Convenience wrapper: one regression, one solve.
pub fn solve_regularized_lsq<T: Real>(
    data: &DataMatrix<T>,
    beta1: f64,
    beta2: f64,
    solver: SolverKind,
) -> Result<RomOperators<T>> {
    Regression::new(data.clone())?.solve(beta1, beta2, solver)
}

/// Learned reduced operators. Disabled terms are stored as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct RomOperators<T> {
    pub r: usize,
    pub form: ModelForm,
    pub terms: ModelTerms,
    /// Time between snapshots (the RK4 step in the continuous form).
    pub dt: f64,
    pub c: Vec<T>,
    pub a: Mat<T>,
    /// Compact quadratic operator, `r × r(r+1)/2`.
    pub h: Mat<T>,
    pub beta1: f64,
    pub beta2: f64,
}

impl<T: Real> RomOperators<T> {
    pub fn zeros(r: usize, form: ModelForm, dt: f64) -> Self {
        RomOperators {
            r,
            form,
            terms: ModelTerms::default(),
            dt,
            c: vec![T::zero(); r],
            a: Mat::zeros(r, r),
            h: Mat::zeros(r, quad_dim(r)),
            beta1: 0.0,
            beta2: 0.0,
        }
    }

    fn from_solution(data: &DataMatrix<T>, x: &Mat<T>, beta1: f64, beta2: f64) -> Self {
        let r = data.r;
        let mut ops = RomOperators::zeros(r, data.form, data.dt);
        ops.terms = data.terms;
        ops.beta1 = beta1;
        ops.beta2 = beta2;
        let mut row = 0;
        if data.terms.linear {
            ops.a = Mat::from_fn(r, r, |i, j| x[(j, i)]);
            row += r;
        }
        if data.terms.quadratic {
            ops.h = Mat::from_fn(r, quad_dim(r), |i, j| x[(row + j, i)]);
            row += quad_dim(r);
        }
        if data.terms.constant {
            ops.c = (0..r).map(|i| x[(row, i)]).collect();
        }
        ops
    }

    /// `Ôᵀ` in regression layout (one column per reduced equation).
    pub fn stacked(&self) -> Mat<T> {
        let r = self.r;
        let mut blocks = Vec::new();
        if self.terms.linear {
            blocks.push(self.a.transpose());
        }
        if self.terms.quadratic {
            blocks.push(self.h.transpose());
        }
        if self.terms.constant {
            blocks.push(Mat::from_col_major(1, r, self.c.clone()).expect("length r"));
        }
        Mat::vstack(&blocks).expect("blocks share r columns")
    }

    /// `A q + H w(q) + c`.
    pub fn apply(&self, q: &[T]) -> Vec<T> {
        let mut out = self.a.mul_vec(q);
        if self.terms.quadratic {
            for (o, h) in out.iter_mut().zip(self.h.mul_vec(&kron_sym(q))) {
                *o += h;
            }
        }
        for (o, &c) in out.iter_mut().zip(&self.c) {
            *o += c;
        }
        out
    }

    /// Full `r × r²` quadratic operator acting on `q ⊗ q`, splitting each
    /// off-diagonal coefficient evenly between its two Kronecker slots.
    pub fn full_kronecker_h(&self) -> Mat<T> {
        let r = self.r;
        let mut full = Mat::zeros(r, r * r);
        let mut idx = 0;
        for k in 0..r {
            for l in k..r {
                for i in 0..r {
                    let v = self.h[(i, idx)];
                    if k == l {
                        full[(i, k * r + k)] = v;
                    } else {
                        full[(i, k * r + l)] = v * T::half();
                        full[(i, l * r + k)] = v * T::half();
                    }
                }
                idx += 1;
            }
        }
        full
    }

    pub fn frobenius_norm(&self) -> T {
        let c: T = self.c.iter().map(|&x| x * x).sum();
        let a = self.a.frobenius_norm();
        let h = self.h.frobenius_norm();
        (c + a * a + h * h).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.a.all_finite() && self.h.all_finite() && self.c.iter().all(|x| x.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC);
        e.usize(self.r)
            .u8(self.form as u8)
            .u8(self.terms.constant as u8 | (self.terms.linear as u8) << 1 | (self.terms.quadratic as u8) << 2)
            .f64(self.dt)
            .f64(self.beta1)
            .f64(self.beta2)
            .reals(&self.c)
            .mat(&self.a)
            .mat(&self.h);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, "operator")?;
        let r = d.usize()?;
        let form = match d.u8()? {
            0 => ModelForm::Discrete,
            1 => ModelForm::Continuous,
            k => return Err(Error::Format(format!("unknown model form code {k}"))),
        };
        let bits = d.u8()?;
        let terms = ModelTerms {
            constant: bits & 1 != 0,
            linear: bits & 2 != 0,
            quadratic: bits & 4 != 0,
        };
        let ops = RomOperators {
            r,
            form,
            terms,
            dt: d.f64()?,
            beta1: d.f64()?,
            beta2: d.f64()?,
            c: d.reals()?,
            a: d.mat()?,
            h: d.mat()?,
        };
        d.finish()?;
        if ops.c.len() != r || ops.a.shape() != (r, r) || ops.h.shape() != (r, quad_dim(r)) {
            return Err(Error::Format("operator shapes do not match r".into()));
        }
        Ok(ops)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_feature_row() {
        assert_eq!(data_row(&[2.0], ModelTerms::default()), vec![2.0, 4.0, 1.0]);
        assert_eq!(ModelTerms::default().columns(3), 10);
    }

    #[test]
    fn kron_sym_index_matches_ordering() {
        let r = 5;
        let q: Vec<f64> = (0..r).map(|i| (i + 2) as f64).collect();
        let w = kron_sym(&q);
        for k in 0..r {
            for l in k..r {
                assert_eq!(w[kron_sym_index(r, k, l)], q[k] * q[l]);
            }
        }
    }

    #[test]
    fn discrete_form_shifts_by_one_column() {
        let q = Mat::from_rows(&[[1.0, 0.5, 0.25]]);
        let d = build_data_matrix(&q, ModelForm::Discrete, 1.0, ModelTerms::linear_only()).unwrap();
        assert_eq!(d.features, Mat::from_rows(&[[1.0], [0.5]]));
        assert_eq!(d.rhs, Mat::from_rows(&[[0.5], [0.25]]));
    }

    #[test]
    fn continuous_derivative_is_exact_for_quadratics() {
        let dt = 0.1;
        let q = Mat::from_fn(1, 6, |_, j| {
            let t = j as f64 * dt;
            3.0 * t * t - t + 2.0
        });
        let d = build_data_matrix(&q, ModelForm::Continuous, dt, ModelTerms::default()).unwrap();
        for j in 0..6 {
            let t = j as f64 * dt;
            assert!((d.rhs[(j, 0)] - (6.0 * t - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_rows_reports_max_r() {
        let q = Mat::from_fn(3, 8, |i, j| (i + j) as f64);
        let err = build_data_matrix(&q, ModelForm::Discrete, 1.0, ModelTerms::default()).unwrap_err();
        assert!(matches!(err, Error::Underdetermined { columns: 10, rows: 7, max_r: 2 }), "{err}");
    }

    #[test]
    fn admissible_r_for_long_record() {
        assert_eq!(max_admissible_r(ModelForm::Discrete, 2536, ModelTerms::default()), 69);
        assert_eq!(max_admissible_r(ModelForm::Continuous, 2536, ModelTerms::default()), 69);
        assert_eq!(
            max_admissible_r_full_kronecker(ModelForm::Discrete, 2536, ModelTerms::default()),
            49
        );
    }

    #[test]
    fn exact_linear_system() {
        let q = Mat::from_rows(&[[1.0, 0.5, 0.25]]);
        let d = build_data_matrix(&q, ModelForm::Discrete, 1.0, ModelTerms::linear_only()).unwrap();
        let ops: RomOperators<f64> = solve_regularized_lsq(&d, 0.0, 0.0, SolverKind::Cholesky).unwrap();
        assert!((ops.a[(0, 0)] - 0.5).abs() < 1e-12);
        assert_eq!(ops.c, vec![0.0]);
        assert_eq!(ops.h.as_slice(), &[0.0]);
    }

    #[test]
    fn scalar_tikhonov_closed_form() {
        // minimise (a·1 − 2)² + β a²
        let data = DataMatrix {
            features: Mat::from_rows(&[[1.0]]),
            rhs: Mat::from_rows(&[[2.0]]),
            r: 1,
            terms: ModelTerms::linear_only(),
            form: ModelForm::Discrete,
            dt: 1.0,
        };
        for beta in [0.0, 1.0, 3.0] {
            for solver in [SolverKind::Cholesky, SolverKind::Qr] {
                let ops = solve_regularized_lsq(&data, beta, 0.0, solver).unwrap();
                assert!((ops.a[(0, 0)] - 2.0 / (1.0 + beta)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_normal_matrix_without_regularization() {
        let q = Mat::from_rows(&[[1.0, 1.0, 1.0, 1.0, 1.0]]);
        let d = build_data_matrix(&q, ModelForm::Discrete, 1.0, ModelTerms::default()).unwrap();
        assert!(matches!(
            solve_regularized_lsq(&d, 0.0, 0.0, SolverKind::Cholesky),
            Err(Error::SingularSystem)
        ));
        assert!(solve_regularized_lsq(&d, 1e-6, 1e-6, SolverKind::Cholesky).is_ok());
    }

    #[test]
    fn consistent_random_system_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = 3;
        let truth = Mat::from_fn(10, r, |_, _| rng.random_range(-1.0..1.0));
        let samples = Mat::from_fn(r, 40, |_, _| rng.random_range(-1.0..1.0));
        let features = Mat::from_fn(40, 10, |i, j| data_row(samples.col(i), ModelTerms::default())[j]);
        let rhs = features.matmul(&truth).unwrap();
        let data = DataMatrix {
            features: features.clone(),
            rhs: rhs.clone(),
            r,
            terms: ModelTerms::default(),
            form: ModelForm::Discrete,
            dt: 1.0,
        };
        let ops = solve_regularized_lsq(&data, 1e-12, 1e-12, SolverKind::Cholesky).unwrap();
        let resid = features.matmul(&ops.stacked()).unwrap().sub(&rhs).unwrap();
        assert!(resid.frobenius_norm() <= 1e-8);
    }

    #[test]
    fn full_kronecker_expansion_agrees_with_compact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = 4;
        let mut ops = RomOperators::<f64>::zeros(r, ModelForm::Discrete, 1.0);
        ops.h = Mat::from_fn(r, quad_dim(r), |_, _| rng.random_range(-1.0..1.0));
        let q: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kron: Vec<f64> = (0..r * r).map(|i| q[i / r] * q[i % r]).collect();
        let full = ops.full_kronecker_h().mul_vec(&kron);
        let compact = ops.h.mul_vec(&kron_sym(&q));
        for (a, b) in full.iter().zip(&compact) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn operators_round_trip_through_bytes() {
        let mut ops = RomOperators::<f64>::zeros(2, ModelForm::Continuous, 0.25);
        ops.a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        ops.c = vec![-1.0, 0.5];
        ops.terms = "cA".parse().unwrap();
        ops.beta1 = 1e-3;
        assert_eq!(RomOperators::from_bytes(&ops.to_bytes()).unwrap(), ops);
    }

    #[test]
    fn terms_parse_and_display() {
        let t: ModelTerms = "AH".parse().unwrap();
        assert!(!t.constant && t.linear && t.quadratic);
        assert_eq!(t.to_string(), "AH");
        assert!("".parse::<ModelTerms>().is_err());
        assert!("cAQ".parse::<ModelTerms>().is_err());
    }
}
