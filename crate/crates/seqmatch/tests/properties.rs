//! Property tests for the metric axioms and the feature-file format.

use proptest::prelude::*;

use seqmatch::data::{read_sequence, write_sequence};
use seqmatch::matrix::Matrix;
use seqmatch::metric::{bi_mhm, frame_distances, metric_distance, MetricKind};
use seqmatch::types::FeatureSequence;

fn sequences() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..6, 1usize..6, 1usize..8).prop_flat_map(|(ta, tb, c)| {
        (
            proptest::collection::vec(-1.0f64..1.0, ta * c),
            proptest::collection::vec(-1.0f64..1.0, tb * c),
        )
            .prop_map(move |(a, b)| {
                (
                    Matrix::from_vec(ta, c, a).unwrap(),
                    Matrix::from_vec(tb, c, b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bi_mhm_symmetric_and_nonnegative((x, y) in sequences()) {
        let forward = bi_mhm(&frame_distances(&x, &y).unwrap());
        let reverse = bi_mhm(&frame_distances(&y, &x).unwrap());
        prop_assert_eq!(forward, reverse);
        prop_assert!(forward >= -1e-9);
    }

    #[test]
    fn every_metric_vanishes_on_identical_input((x, _) in sequences()) {
        let d = frame_distances(&x, &x).unwrap();
        for kind in MetricKind::ALL {
            let v = metric_distance(&d, kind).unwrap();
            prop_assert!(v.abs() <= 1e-9, "{} on identical input: {}", kind, v);
        }
    }

    #[test]
    fn hausdorff_family_ignores_frame_order((x, y) in sequences()) {
        let base = frame_distances(&x, &y).unwrap();
        // Reverse the frames of both inputs.
        let rev = |m: &Matrix| {
            let rows: Vec<Vec<f64>> =
                (0..m.rows()).rev().map(|r| m.row(r).to_vec()).collect();
            Matrix::from_rows(&rows)
        };
        let permuted = frame_distances(&rev(&x), &rev(&y)).unwrap();
        for kind in [
            MetricKind::Hausdorff,
            MetricKind::HausdorffBidirectional,
            MetricKind::ModifiedHausdorffDirected,
            MetricKind::BiMhm,
        ] {
            let a = metric_distance(&base, kind).unwrap();
            let b = metric_distance(&permuted, kind).unwrap();
            prop_assert!((a - b).abs() <= 1e-12, "{}: {} vs {}", kind, a, b);
        }
    }

    #[test]
    fn feature_files_roundtrip(
        t in 1usize..6,
        c in 1usize..8,
        values in proptest::collection::vec(-100.0f32..100.0, 48),
    ) {
        let data: Vec<f64> = values.iter().take(t * c).map(|&v| v as f64).collect();
        prop_assume!(data.len() == t * c);
        let dir = std::env::temp_dir()
            .join(format!("seqmatch-prop-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.fseq");
        let f = FeatureSequence::new(Matrix::from_vec(t, c, data).unwrap(), "roundtrip").unwrap();
        write_sequence(&path, &f).unwrap();
        let back = read_sequence(&path).unwrap();
        prop_assert_eq!(back.frames, f.frames);
    }
}
