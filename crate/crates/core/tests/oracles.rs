mod common;

use actionllm::datapipe::{expand_segments, run_length};
use actionllm::evalkit::{decode_predictions, moc, FrameSequence};
use actionllm::objective::{build_targets, class_loss, dur_loss, seg_loss};
use actionllm::tensorkit::{softmax_rows, Matrix};
use common::*;
use proptest::prelude::*;
use rand::Rng;

const INSTANCES: u64 = 1000;

fn one_hot(labels: &[usize], width: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), width);
    for (r, &c) in labels.iter().enumerate() {
        m.set(r, c, 1.0);
    }
    m
}

#[test]
fn cmia_matches_longhand_attention() {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let (lib, reference) = cmia_instance(seed);
        for m in 0..3 {
            worst = worst.max(max_dev(&lib[m], &reference[m]));
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn losses_match_longhand() {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let k = r.random_range(1..7);
        let rows = r.random_range(1..9);
        let logits = random_rows(&mut r, rows, k, 6.0);
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
        let lib = seg_loss(&matrix(&logits), &one_hot(&labels, k)).unwrap();
        worst = worst.max((lib - common::seg_loss(&logits, &labels)).abs());

        let n = r.random_range(1..9);
        let none_pos = r.random_range(1..=n + 1);
        let qlogits = random_rows(&mut r, n, k + 1, 6.0);
        let qlabels: Vec<usize> = (0..n).map(|i| if i + 1 >= none_pos { k } else { r.random_range(0..k) }).collect();
        let lib = class_loss(&matrix(&qlogits), &one_hot(&qlabels, k + 1), none_pos).unwrap();
        worst = worst.max((lib - common::class_loss(&qlogits, &qlabels, none_pos)).abs());

        let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.5)).collect();
        let target: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let lib = dur_loss(&pred, &target, none_pos).unwrap();
        worst = worst.max((lib - common::dur_loss(&pred, &target, none_pos)).abs());
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn moc_matches_longhand() {
    let mut r = rng(12);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let len = r.random_range(1..60);
        let k = r.random_range(1..6);
        let gt: Vec<usize> = (0..len).map(|_| r.random_range(0..k)).collect();
        let pred: Vec<usize> = gt.iter().map(|&g| if r.random_bool(0.6) { g } else { r.random_range(0..k) }).collect();
        let lib = moc(&FrameSequence(pred.clone()), &FrameSequence(gt.clone())).unwrap();
        worst = worst.max((lib - common::moc(&pred, &gt)).abs());
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn decode_matches_longhand() {
    let mut r = rng(13);
    for case in 0..INSTANCES {
        let (logits, durations, horizon) = decode_instance(&mut r);
        let lib = decode_predictions(&matrix(&logits), &durations, horizon).unwrap();
        assert_eq!(lib.0, common::decode(&logits, &durations, horizon), "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decode_fills_the_horizon(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (logits, durations, horizon) = decode_instance(&mut r);
        let k = logits[0].len() - 1;
        let out = decode_predictions(&matrix(&logits), &durations, horizon).unwrap();
        prop_assert_eq!(out.len(), horizon);
        prop_assert!(out.0.iter().all(|&c| c < k));
    }

    #[test]
    fn moc_is_a_fraction_and_one_on_itself(gt in prop::collection::vec(0usize..5, 1..50), noise in prop::collection::vec(0usize..5, 50)) {
        let pred: Vec<usize> = gt.iter().zip(&noise).map(|(&g, &n)| if n < 2 { n } else { g }).collect();
        let m = moc(&FrameSequence(pred), &FrameSequence(gt.clone())).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(moc(&FrameSequence(gt.clone()), &FrameSequence(gt)).unwrap(), 1.0);
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..5) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let m = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let s = softmax_rows(&m);
        for r in 0..rows {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn run_length_round_trips(labels in prop::collection::vec(0usize..4, 1..80)) {
        let segs = run_length(&labels);
        prop_assert!(segs.windows(2).all(|w| w[0].0 != w[1].0));
        prop_assert_eq!(expand_segments(&segs), labels);
    }

    #[test]
    fn target_durations_are_normalized(labels in prop::collection::vec(0usize..4, 1..80), n in 1usize..6) {
        let segs = run_length(&labels);
        let t = build_targets(&[0], &segs, n, labels.len(), 4).unwrap();
        let kept = segs.len().min(n);
        prop_assert_eq!(t.none_pos, kept + 1);
        let total: f64 = t.durations.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(t.durations[kept..].iter().all(|&d| d == 0.0));
    }
}
