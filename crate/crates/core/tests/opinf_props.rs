mod common;

use common::gaussian;
use dopinf::comm::run_in_process;
use dopinf::opinf::{build_data_matrix, grid_search_opinf, ModelForm, ModelTerms, Regression, SearchConfig, SolverKind};
use dopinf::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A bounded quadratic trajectory with `r` modes.
fn trajectory(r: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian(r, r, &mut rng).map(|x| 0.05 * x / r as f64);
    let mut q = vec![1.0; r];
    let mut cols = Vec::with_capacity(r * n);
    for _ in 0..n {
        cols.extend_from_slice(&q);
        let aq = a.mul_vec(&q);
        q = (0..r).map(|i| (0.9 * q[i] * (1.0 - 0.1 * q[i]) + aq[i] + 0.01).clamp(-2.0, 2.0)).collect();
    }
    Matrix::from_col_major(r, n, cols).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn search_winner_is_independent_of_rank_count(r in 1usize..4, seed in any::<u64>()) {
        let q = trajectory(r, 30, seed);
        prop_assert!(q.all_finite());
        let config = SearchConfig {
            beta1: vec![1e-8, 1e-6, 1e-4, 1e-2],
            beta2: vec![1e-6, 1e-3, 1.0],
            tau: 0.9,
            trial_steps: 40,
            solver: SolverKind::Cholesky,
        };
        let run = |p| run_in_process(p, |mut comm| {
            grid_search_opinf(&mut comm, &q, ModelForm::Discrete, 1.0, ModelTerms::default(), &config)
                .map(|(ops, out)| (ops.to_bytes(), out.winner))
        });
        let reference = run(1).swap_remove(0);
        for p in [2, 3, 4, 6, 12] {
            for res in run(p) {
                prop_assert_eq!(&res.as_ref().ok(), &reference.as_ref().ok());
            }
        }
    }

    #[test]
    fn normal_equations_hold_at_the_solution(r in 1usize..5, seed in any::<u64>(), b1 in -10.0f64..0.0, b2 in -10.0f64..0.0) {
        let q = gaussian(r, 40, &mut ChaCha8Rng::seed_from_u64(seed));
        let reg = Regression::new(build_data_matrix(&q, ModelForm::Discrete, 1.0, ModelTerms::default()).unwrap()).unwrap();
        for solver in [SolverKind::Cholesky, SolverKind::Qr] {
            let ops = reg.solve(10f64.powf(b1), 10f64.powf(b2), solver).unwrap();
            let g = reg.gradient(&ops).unwrap().frobenius_norm();
            let scale = reg.data.features.tr_matmul(&reg.data.rhs).unwrap().frobenius_norm();
            prop_assert!(g <= 1e-8 * scale, "{g} vs {scale}");
        }
    }

    #[test]
    fn heavier_regularization_shrinks_the_operators(r in 1usize..4, seed in any::<u64>()) {
        let q = gaussian(r, 30, &mut ChaCha8Rng::seed_from_u64(seed));
        let reg = Regression::new(build_data_matrix(&q, ModelForm::Discrete, 1.0, ModelTerms::default()).unwrap()).unwrap();
        let norms: Vec<f64> = [1e-2, 1e0, 1e2, 1e4, 1e6]
            .iter()
            .map(|&b| reg.solve(b, b, SolverKind::Cholesky).unwrap().frobenius_norm())
            .collect();
        prop_assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
        prop_assert!(norms[4] < 1e-3 * norms[0].max(1.0));
    }
}
