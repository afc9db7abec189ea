use dopinf::opinf::{ModelForm, RomOperators};
use dopinf::rollout::rollout;
use proptest::prelude::*;

proptest! {
    #[test]
    fn diagonal_discrete_rollout_is_geometric(lambda in proptest::collection::vec(-0.99f64..0.99, 1..6), q0 in -5.0f64..5.0) {
        let r = lambda.len();
        let mut ops = RomOperators::<f64>::zeros(r, ModelForm::Discrete, 1.0);
        for (k, &l) in lambda.iter().enumerate() {
            ops.a[(k, k)] = l;
        }
        let init: Vec<f64> = (0..r).map(|k| q0 + k as f64).collect();
        let traj = rollout(&ops, &init, 100).unwrap();
        prop_assert_eq!(traj.len(), 101);
        for j in 0..=100 {
            for k in 0..r {
                let exact = lambda[k].powi(j as i32) * init[k];
                prop_assert!((traj.states[(k, j)] - exact).abs() <= 1e-12, "mode {k} step {j}");
            }
        }
    }

    #[test]
    fn zero_steps_return_the_initial_state(q0 in proptest::collection::vec(-5.0f64..5.0, 1..6)) {
        let ops = RomOperators::<f64>::zeros(q0.len(), ModelForm::Continuous, 0.1);
        let traj = rollout(&ops, &q0, 0).unwrap();
        prop_assert_eq!(traj.states.as_slice(), &q0[..]);
    }
}
