mod common;

use common::on_ranks;
use dopinf::transforms::{inverse_transform, transform, TransformConfig};
use dopinf::Matrix;
use proptest::prelude::*;

fn data() -> impl Strategy<Value = (Matrix, usize)> {
    (2usize..60, 2usize..12, 1usize..5, proptest::collection::vec(-1e3f64..1e3, 60 * 12)).prop_map(|(m, t, p, v)| {
        let q = Matrix::from_fn(m, t, |i, j| v[i * 12 + j] + (i as f64) * 0.5);
        (q, p.min(m))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn centered_scaled_entries_lie_in_the_unit_interval((q, p) in data()) {
        let results = on_ranks(&q, p, |comm, part| transform(part, &TransformConfig::default(), comm).unwrap());
        for (out, _) in &results {
            prop_assert!(out.block.as_slice().iter().all(|x| x.abs() <= 1.0));
        }
        let scales: Vec<_> = results.iter().map(|(_, params)| params.scales.clone()).collect();
        prop_assert!(scales.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn inverse_undoes_the_forward_transform((q, p) in data()) {
        let results = on_ranks(&q, p, |comm, part| {
            let (out, params) = transform(part, &TransformConfig::default(), comm).unwrap();
            let back = inverse_transform(&out.block, &params).unwrap();
            back.sub(&part.block).unwrap().frobenius_norm() / part.block.frobenius_norm().max(f64::MIN_POSITIVE)
        });
        for e in results {
            prop_assert!(e <= 1e-13, "{e}");
        }
    }
}
