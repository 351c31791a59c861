use std::collections::HashSet;

use asymfusion::rng::Lcg64;
use asymfusion::synth::{
    bayes_ceiling, evaluate, generate, read_dataset, write_dataset, Confusion, SynthConfig, HIDDEN_LEVEL,
};
use asymfusion::tensor::LabelMap;
use proptest::prelude::*;

fn map(data: Vec<u8>) -> LabelMap {
    let n = data.len();
    LabelMap::new(1, 1, n, data).unwrap()
}

/// IoU of class `c` from pixel index sets.
fn iou_oracle(pred: &[u8], reference: &[u8], c: u8) -> Option<f64> {
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
    let r: HashSet<usize> = (0..reference.len()).filter(|&i| reference[i] == c).collect();
    let union = p.union(&r).count();
    (union > 0).then(|| p.intersection(&r).count() as f64 / union as f64)
}

fn miou_oracle(pred: &[u8], reference: &[u8], classes: u8) -> f64 {
    let ious: Vec<f64> = (0..classes).filter_map(|c| iou_oracle(pred, reference, c)).collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn hand_computed_metrics() {
    let reference = map(vec![0, 0, 1, 1, 2, 2]);
    let pred = map(vec![0, 1, 1, 1, 2, 0]);
    let r = evaluate(&[pred], &[reference], 4).unwrap();
    assert!((r.pixel_accuracy - 4.0 / 6.0).abs() < 1e-15);
    assert!((r.mean_accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.mean_iou - 0.5).abs() < 1e-15);
    assert_eq!(r.per_class_iou[3], None);
    assert!((r.per_class_iou[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn confusion_counts_and_label_bounds() {
    let mut c = Confusion::new(3);
    c.add(&map(vec![0, 2, 2]), &map(vec![0, 1, 2])).unwrap();
    assert_eq!((c.get(0, 0), c.get(1, 2), c.get(2, 2), c.get(1, 1)), (1, 1, 1, 0));
    assert!(c.add(&map(vec![3]), &map(vec![0])).is_err());
    assert!(c.add(&map(vec![0, 1]), &map(vec![0])).is_err());
}

#[test]
fn threshold_decoder_is_exact_without_noise() {
    let cfg = SynthConfig {
        modalities: 1,
        noise_sigma: 0.0,
        train_size: 4,
        test_size: 4,
        ..SynthConfig::default()
    };
    let (train, _) = generate(&cfg).unwrap();
    let k = cfg.classes as f64;
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for s in &train.samples {
        let data = s.inputs[0].data().iter().map(|v| ((v * k).round() - 1.0) as u8).collect();
        preds.push(LabelMap::new(1, cfg.height, cfg.width, data).unwrap());
        refs.push(s.labels.clone());
    }
    assert_eq!(evaluate(&preds, &refs, cfg.classes).unwrap().pixel_accuracy, 1.0);
}

#[test]
fn hidden_classes_read_as_the_uninformative_level() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        visibility: (0..5).map(|k| vec![if k % 2 == 1 { 0 } else { 1 }]).collect(),
        train_size: 3,
        test_size: 1,
        ..SynthConfig::default()
    };
    let (train, _) = generate(&cfg).unwrap();
    let mut seen_even = 0;
    for s in &train.samples {
        for (i, &l) in s.labels.data.iter().enumerate() {
            if l % 2 == 0 {
                assert_eq!(s.inputs[0].data()[i], HIDDEN_LEVEL);
                seen_even += 1;
            } else {
                assert_eq!(s.inputs[1].data()[i], HIDDEN_LEVEL);
            }
        }
    }
    assert!(seen_even > 0);
}

#[test]
fn generation_is_reproducible_and_splits_differ() {
    let cfg = SynthConfig {
        train_size: 16,
        test_size: 8,
        ..SynthConfig::default()
    };
    let (a, at) = generate(&cfg).unwrap();
    let (b, bt) = generate(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(at, bt);
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.samples[0].labels, at.samples[0].labels);
    let (c, _) = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn too_many_regions_is_rejected() {
    let cfg = SynthConfig {
        height: 4,
        width: 4,
        regions: 17,
        ..SynthConfig::default()
    };
    assert!(generate(&cfg).is_err());
    let cfg = SynthConfig {
        visibility: vec![vec![0], vec![0], vec![], vec![1], vec![1]],
        ..SynthConfig::default()
    };
    assert!(generate(&cfg).is_err());
}

#[test]
fn export_round_trip_at_f32_precision() {
    let cfg = SynthConfig {
        train_size: 5,
        test_size: 1,
        ..SynthConfig::default()
    };
    let (ds, _) = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.afds");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), ds.len());
    for (x, y) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(x.labels, y.labels);
        for (p, q) in x.inputs.iter().zip(&y.inputs) {
            for (a, b) in p.data().iter().zip(q.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(read_dataset(&path).is_err());
}

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

#[test]
fn unimodal_ceilings_match_numerical_integration() {
    let cfg = SynthConfig::default();
    let vis = cfg.visibility_matrix();
    let got = bayes_ceiling(&cfg).unwrap();
    let k = cfg.classes;
    for s in 0..cfg.modalities {
        let levels: Vec<f64> = (0..k).map(|c| cfg.level(s, c, &vis)).collect();
        // trapezoid rule on integral max_k (1/K) N(x; level_k, sigma)
        let (lo, hi, n) = (-1.0, 2.0, 600_000);
        let dx = (hi - lo) / n as f64;
        let f = |x: f64| levels.iter().map(|&m| normal_pdf(x, m, cfg.noise_sigma)).fold(0.0, f64::max) / k as f64;
        let mut acc = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            acc += f(lo + i as f64 * dx);
        }
        let want = acc * dx;
        assert!((got.per_modality[s] - want).abs() < 1e-6, "modality {s}: {} vs {want}", got.per_modality[s]);
    }
}

#[test]
fn fused_ceiling_matches_monte_carlo() {
    let cfg = SynthConfig::default();
    let vis = cfg.visibility_matrix();
    let got = bayes_ceiling(&cfg).unwrap();
    let k = cfg.classes;
    let means: Vec<[f64; 2]> = (0..k).map(|c| [cfg.level(0, c, &vis), cfg.level(1, c, &vis)]).collect();
    let mut rng = Lcg64::new(77);
    let trials = 400_000;
    let mut correct = 0usize;
    for _ in 0..trials {
        let c = rng.below(k);
        let y = [
            means[c][0] + cfg.noise_sigma * rng.normal(),
            means[c][1] + cfg.noise_sigma * rng.normal(),
        ];
        let best = (0..k)
            .min_by(|&a, &b| {
                let d = |m: &[f64; 2]| (y[0] - m[0]).powi(2) + (y[1] - m[1]).powi(2);
                d(&means[a]).total_cmp(&d(&means[b]))
            })
            .unwrap();
        correct += (best == c) as usize;
    }
    let mc = correct as f64 / trials as f64;
    let se = (mc * (1.0 - mc) / trials as f64).sqrt().max(1e-4);
    assert!((got.fused - mc).abs() < 5.0 * se, "{} vs {mc}", got.fused);
    assert!(got.fused > got.per_modality.iter().cloned().fold(0.0, f64::max));
}

#[test]
fn noise_free_ceiling_counts_distinguishable_classes() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    let c = bayes_ceiling(&cfg).unwrap();
    // modality 0 sees classes 1 and 3, modality 1 sees 0, 2 and 4
    assert!((c.per_modality[0] - (2.0 / 5.0 + (3.0 / 5.0) / 3.0)).abs() < 1e-15);
    assert!((c.per_modality[1] - (3.0 / 5.0 + (2.0 / 5.0) / 2.0)).abs() < 1e-15);
    assert_eq!(c.fused, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_the_set_oracle(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60),
    ) {
        let (pred, reference): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let r = evaluate(&[map(pred.clone())], &[map(reference.clone())], 4).unwrap();
        prop_assert!((r.mean_iou - miou_oracle(&pred, &reference, 4)).abs() < 1e-12);
        let hits = pred.iter().zip(&reference).filter(|(a, b)| a == b).count();
        prop_assert!((r.pixel_accuracy - hits as f64 / pred.len() as f64).abs() < 1e-12);
        for v in [r.pixel_accuracy, r.mean_accuracy, r.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_class_names_and_pixel_order(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60),
        seed in 0u64..1000,
    ) {
        let (pred, reference): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let base = evaluate(&[map(pred.clone())], &[map(reference.clone())], 4).unwrap();
        let mut rng = Lcg64::new(seed);
        let mut perm: Vec<u8> = (0..4).collect();
        rng.shuffle(&mut perm);
        let mut order: Vec<usize> = (0..pred.len()).collect();
        rng.shuffle(&mut order);
        let p2: Vec<u8> = order.iter().map(|&i| perm[pred[i] as usize]).collect();
        let r2: Vec<u8> = order.iter().map(|&i| perm[reference[i] as usize]).collect();
        let moved = evaluate(&[map(p2)], &[map(r2)], 4).unwrap();
        prop_assert!((base.mean_iou - moved.mean_iou).abs() < 1e-12);
        prop_assert!((base.mean_accuracy - moved.mean_accuracy).abs() < 1e-12);
        prop_assert_eq!(base.pixel_accuracy, moved.pixel_accuracy);
    }
}
