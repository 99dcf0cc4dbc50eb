//! Property tests over the tensor-core invariants.

use proptest::prelude::*;

use refdiff_core::tape::Tape;
use refdiff_core::tensor::Tensor;

fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(12, -60.0, 60.0)) {
        let x = Tensor::from_vec(vec![3, 4], data).unwrap();
        let mut tape = Tape::<f64>::new();
        let id = tape.constant(&x);
        let y = tape.softmax_rows(id).unwrap();
        for r in 0..3 {
            let sum: f64 = tape.data(y)[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {} sums to {}", r, sum);
        }
    }

    #[test]
    fn layer_norm_rows_standardized(data in finite_vec(24, -5.0, 5.0)) {
        let x = Tensor::from_vec(vec![2, 12], data).unwrap();
        // only rows with real spread make the variance claim meaningful
        let spread_ok = (0..2).all(|r| {
            let row = &x.data()[r * 12..(r + 1) * 12];
            let mu: f64 = row.iter().sum::<f64>() / 12.0;
            row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 12.0 > 1e-5
        });
        prop_assume!(spread_ok);
        let mut tape = Tape::<f64>::new();
        let id = tape.constant(&x);
        let g = tape.constant(&Tensor::full(vec![12], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![12]));
        let y = tape.layer_norm(id, g, b, 1e-5).unwrap();
        for r in 0..2 {
            let row = &tape.data(y)[r * 12..(r + 1) * 12];
            let mu: f64 = row.iter().sum::<f64>() / 12.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 12.0;
            prop_assert!(mu.abs() < 1e-5, "row mean {}", mu);
            prop_assert!((var - 1.0).abs() < 1e-3, "row var {}", var);
        }
    }

    #[test]
    fn concat_then_split_is_exact(
        a in finite_vec(15, -100.0, 100.0),
        b in finite_vec(10, -100.0, 100.0),
    ) {
        let ta = Tensor::from_vec(vec![3, 5], a).unwrap();
        let tb = Tensor::from_vec(vec![2, 5], b).unwrap();
        let mut tape = Tape::<f64>::new();
        let ia = tape.constant(&ta);
        let ib = tape.constant(&tb);
        let c = tape.concat_rows(ia, ib).unwrap();
        let sa = tape.slice_rows(c, 0, 3).unwrap();
        let sb = tape.slice_rows(c, 3, 5).unwrap();
        prop_assert_eq!(tape.data(sa), ta.data());
        prop_assert_eq!(tape.data(sb), tb.data());
    }

    #[test]
    fn vtf_roundtrip_preserves_f32_payload(
        data in finite_vec(12, -1e6, 1e6),
        rows in 1usize..4,
    ) {
        prop_assume!(12 % rows == 0);
        let t32 = Tensor::<f32>::from_vec(
            vec![rows, 12 / rows],
            data.iter().map(|&v| v as f32).collect(),
        ).unwrap();
        let dir = std::env::temp_dir().join(format!("vtf-prop-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.vtf");
        refdiff_core::io::write_vtf(&path, &t32).unwrap();
        let back: Tensor<f32> = refdiff_core::io::read_vtf(&path).unwrap();
        prop_assert!(t32.bit_eq(&back));
    }

    #[test]
    fn naive_fusion_mean_invariance_under_row_permutation(
        data in finite_vec(12, -10.0, 10.0),
        rot in 0usize..4,
    ) {
        use refdiff_core::fusion::{fuse, FusionConfig, FusionStrategy};
        use refdiff_core::tokens::{Modality, TokenSeq};
        let text = TokenSeq::new(
            Tensor::from_vec(vec![2, 3], vec![0.5, -0.25, 1.0, 2.0, 0.0, -1.0]).unwrap(),
            Modality::Text,
        ).unwrap();
        let img = TokenSeq::new(Tensor::from_vec(vec![4, 3], data.clone()).unwrap(), Modality::Aligned).unwrap();
        let mut rotated = data;
        rotated.rotate_left(rot * 3);
        let img_rot = TokenSeq::new(Tensor::from_vec(vec![4, 3], rotated).unwrap(), Modality::Aligned).unwrap();
        let cfg = FusionConfig { strategy: FusionStrategy::Naive, alpha: 0.4, rescale: false };
        let a = fuse(&cfg, &text, &img).unwrap();
        let b = fuse(&cfg, &text, &img_rot).unwrap();
        prop_assert!(a.tokens.max_abs_diff(&b.tokens) < 1e-9);
    }
}
