use nalgebra::DMatrix;
use proptest::prelude::*;
use tabular_mtr::metrics::{accuracy, binary_auroc, confusion, macro_auroc, macro_precision_f1};
use tabular_mtr::numerics::Tensor;
use tabular_mtr::objectives::{clip_loss, cross_entropy, ntxent, ntxent_bruteforce, ContrastiveBatch};

fn pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, f64)> {
    (2usize..=8, 1usize..=6).prop_flat_map(|(n, d)| {
        (
            Just(n),
            Just(d),
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(-3.0f64..3.0, n * d),
            0.1f64..2.0,
        )
    })
}

fn batch(n: usize, d: usize, z: &[f64], t: &[f64], tau: f64) -> ContrastiveBatch {
    ContrastiveBatch::new(
        Tensor::new(&[n, d], z.to_vec()).unwrap(),
        Tensor::new(&[n, d], t.to_vec()).unwrap(),
        tau,
    )
    .unwrap()
}

fn nondegenerate(n: usize, d: usize, z: &[f64]) -> bool {
    (0..n).all(|i| z[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>() > 1e-6)
}

/// Orthogonal matrix from the QR factorisation of a fixed-seed random matrix.
fn rotation(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(d, d, &entries[..d * d]);
    m.qr().q()
}

fn apply(n: usize, d: usize, x: &[f64], r: &DMatrix<f64>) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, d, x) * r;
    (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn ntxent_matches_double_loop((n, d, z, t, tau) in pair()) {
        let b = batch(n, d, &z, &t, tau);
        let fast = ntxent(&b).unwrap();
        let slow = ntxent_bruteforce(&b).unwrap();
        prop_assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ntxent_is_rotation_and_scale_invariant(
        (n, d, z, t, tau) in pair(),
        rot in prop::collection::vec(-1.0f64..1.0, 36),
        scales in prop::collection::vec(0.1f64..10.0, 16),
    ) {
        prop_assume!(nondegenerate(n, d, &z) && nondegenerate(n, d, &t));
        let base = ntxent(&batch(n, d, &z, &t, tau)).unwrap();
        let r = rotation(d, &rot);
        prop_assume!(r.determinant().abs() > 1e-6);
        let rotated = ntxent(&batch(n, d, &apply(n, d, &z, &r), &apply(n, d, &t, &r), tau)).unwrap();
        prop_assert!((base - rotated).abs() < 1e-9);

        let scale = |x: &[f64], off: usize| -> Vec<f64> {
            x.iter().enumerate().map(|(k, v)| v * scales[off + k / d]).collect()
        };
        let scaled = ntxent(&batch(n, d, &scale(&z, 0), &scale(&t, 8), tau)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn clip_is_symmetric_in_its_arms((n, d, z, t, tau) in pair()) {
        let a = clip_loss(&batch(n, d, &z, &t, tau)).unwrap();
        let b = clip_loss(&batch(n, d, &t, &z, tau)).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!(a > 0.0);
    }

    #[test]
    fn cross_entropy_ignores_row_shifts(
        (n, c) in (1usize..6, 2usize..6),
        raw in prop::collection::vec(-5.0f64..5.0, 36),
        shifts in prop::collection::vec(-50.0f64..50.0, 6),
        t in prop::collection::vec(0usize..100, 6),
    ) {
        let logits = Tensor::new(&[n, c], raw[..n * c].to_vec()).unwrap();
        let targets: Vec<usize> = t[..n].iter().map(|v| v % c).collect();
        let shifted = Tensor::from_fn(&[n, c], |k| raw[k] + shifts[k / c]);
        let a = cross_entropy(&logits, &targets).unwrap();
        let b = cross_entropy(&shifted, &targets).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!(a >= 0.0);
    }
}

/// Probability that a random positive outranks a random negative, ties 1/2.
fn auroc_by_pairs(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn labels_and_scores() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>, Vec<f64>)> {
    (2usize..5, 4usize..40).prop_flat_map(|(c, n)| {
        (
            Just(c),
            prop::collection::vec(0..c, n),
            prop::collection::vec(0..c, n),
            // coarse grid so that ties occur
            prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n * c),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auroc_matches_pair_counting(
        pos in prop::collection::vec(any::<bool>(), 2..40),
        grid in prop::collection::vec(0u8..6, 40),
    ) {
        let scores: Vec<f64> = grid[..pos.len()].iter().map(|&v| v as f64).collect();
        let fast = binary_auroc(&pos, &scores);
        let slow = auroc_by_pairs(&pos, &scores);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        pos in prop::collection::vec(any::<bool>(), 2..40),
        raw in prop::collection::vec(-3.0f64..3.0, 40),
    ) {
        let s: Vec<f64> = raw[..pos.len()].to_vec();
        let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 1.0).collect();
        prop_assert_eq!(binary_auroc(&pos, &s), binary_auroc(&pos, &t));
    }

    #[test]
    fn accuracy_is_confusion_trace((c, y, p, _) in labels_and_scores()) {
        let cm = confusion(&y, &p, c).unwrap();
        let trace: usize = (0..c).map(|k| cm[k][k]).sum();
        prop_assert!((accuracy(&y, &p).unwrap() - trace as f64 / y.len() as f64).abs() < 1e-15);
        prop_assert_eq!(cm.iter().flatten().sum::<usize>(), y.len());
    }

    #[test]
    fn macro_metrics_survive_relabeling((c, y, p, s) in labels_and_scores(), rot in 1usize..5) {
        let perm: Vec<usize> = (0..c).map(|k| (k + rot) % c).collect();
        let y2: Vec<usize> = y.iter().map(|&k| perm[k]).collect();
        let p2: Vec<usize> = p.iter().map(|&k| perm[k]).collect();
        let n = y.len();
        let scores = Tensor::new(&[n, c], s.clone()).unwrap();
        let scores2 = Tensor::from_fn(&[n, c], |k| {
            let (i, col) = (k / c, k % c);
            let old = perm.iter().position(|&q| q == col).unwrap();
            s[i * c + old]
        });
        prop_assert_eq!(accuracy(&y, &p).unwrap(), accuracy(&y2, &p2).unwrap());
        let (pr1, f1) = macro_precision_f1(&y, &p, c).unwrap();
        let (pr2, f2) = macro_precision_f1(&y2, &p2, c).unwrap();
        prop_assert!((pr1 - pr2).abs() < 1e-12 && (f1 - f2).abs() < 1e-12);
        match (macro_auroc(&y, &scores), macro_auroc(&y2, &scores2)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }
}
