use dopinf::snapshot_store::{plan_partition, read_partition, write_dataset, AlignMode, DatasetHeader};
use dopinf::Matrix;
use proptest::prelude::*;

fn layout() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    // (n_vars, rows_per_var, n_cols, shard_count, p)
    (1usize..4, 1usize..40, 1usize..6).prop_flat_map(|(v, c, t)| {
        let rows = v * c;
        (Just(v), Just(c), Just(t), 1..=rows, 1..=rows.min(6))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn concatenated_partitions_reproduce_the_source((v, c, t, shards, p) in layout(), seed in any::<u32>()) {
        let rows = v * c;
        let src = Matrix::from_fn(rows, t, |i, j| ((i * 31 + j * 7) as f64 + seed as f64).sin() * 1e3);
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&src, &DatasetHeader::new(v, c, t), shards, dir.path().join("d.manifest")).unwrap();
        let plan = plan_partition(rows, p, AlignMode::RowBalanced, c).unwrap();
        let blocks: Vec<Matrix> = (0..p).map(|k| read_partition(&m, &plan, k).unwrap().block).collect();
        let joined = Matrix::vstack(&blocks).unwrap();
        let same = joined.as_slice().iter().zip(src.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn reads_do_not_depend_on_shard_count((v, c, t, shards, p) in layout()) {
        let rows = v * c;
        let src = Matrix::from_fn(rows, t, |i, j| i as f64 - 0.25 * j as f64);
        let dir = tempfile::tempdir().unwrap();
        let one = write_dataset(&src, &DatasetHeader::new(v, c, t), 1, dir.path().join("a.manifest")).unwrap();
        let many = write_dataset(&src, &DatasetHeader::new(v, c, t), shards, dir.path().join("b.manifest")).unwrap();
        for align in [AlignMode::RowBalanced, AlignMode::VariableAligned] {
            let Ok(plan) = plan_partition(rows, p, align, c) else { continue };
            for k in 0..p {
                let a = read_partition::<f64>(&one, &plan, k).unwrap();
                let b = read_partition::<f64>(&many, &plan, k).unwrap();
                prop_assert_eq!(a.block, b.block);
                prop_assert_eq!(a.var_map, b.var_map);
            }
        }
    }
}
