use ctxpair::eval::{
    abmil_forward, auroc, macro_auroc, probe_encoder, train_mil, train_supervised_baseline, Bag, EvalError, MilConfig,
    MilParams, ProbeConfig, SupervisedConfig,
};
use ctxpair::ndgrad::Tensor;
use ctxpair::slidegen::{generate_dataset, GenConfig, PatchDims, SplitCounts};
use ctxpair::train::{init_params, EncoderWidths};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

#[test]
fn auroc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1_000 {
        let n = rng.random_range(2..60);
        // coarse scores so ties are common
        let levels = if case % 2 == 0 { 5 } else { 1_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auroc(&scores, &labels).unwrap();
        assert!((got - auroc_oracle(&scores, &labels)).abs() < 1e-12, "case {case}");
    }
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    assert_eq!(auroc(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap(), 0.5);
    assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::UndefinedMetric(_))));
    assert!(matches!(auroc(&[0.1], &[true, false]), Err(EvalError::LengthMismatch(1, 2))));
}

#[test]
fn macro_auroc_averages_one_vs_rest() {
    let probs = [0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8, 0.6, 0.3, 0.1];
    let labels = [0, 1, 2, 1];
    let by_class: Vec<f64> = (0..3)
        .map(|k| {
            let s: Vec<f64> = probs.chunks(3).map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            auroc_oracle(&s, &l)
        })
        .collect();
    let want = by_class.iter().sum::<f64>() / 3.0;
    assert!((macro_auroc(&probs, &labels, 3).unwrap() - want).abs() < 1e-12);
}

fn random_bag(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn attention_is_a_distribution_and_pooling_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let params = MilParams::<f64>::init(trial, 6, 8, 3);
        let n = rng.random_range(1..40);
        let bag = random_bag(&mut rng, n, 6);
        let (probs, att) = abmil_forward(&params, &bag).unwrap();
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(att.iter().all(|&a| a > 0.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = Tensor::from_rows(&order.iter().map(|&i| bag.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (probs2, att2) = abmil_forward(&params, &shuffled).unwrap();
        for (a, b) in probs.iter().zip(&probs2) {
            assert!((a - b).abs() < 1e-9);
        }
        for (k, &i) in order.iter().enumerate() {
            assert!((att2[k] - att[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn mil_learns_separable_bags() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // class k bags hide a few instances shifted along axis k among noise
    let make = |rng: &mut ChaCha8Rng, id: u32, label: usize| {
        let mut t = random_bag(rng, 12, 4).map(|v| 0.3 * v);
        for i in 0..3 {
            let d = t.data_mut();
            d[i * 4 + label] += 3.0;
        }
        Bag { slide_id: id, instances: t, label }
    };
    let train: Vec<Bag<f64>> = (0..24).map(|i| make(&mut rng, i, i as usize % 3)).collect();
    let test: Vec<Bag<f64>> = (0..12).map(|i| make(&mut rng, 100 + i, i as usize % 3)).collect();
    let cfg = MilConfig { epochs: 200, max_instances: None, ..MilConfig::default() };
    let out = train_mil(&train, &test, 3, &cfg, 1).unwrap();
    assert_eq!(out.train_accuracy, 1.0);
    assert_eq!(out.test.accuracy, 1.0);
    assert_eq!(out.test.auroc, 1.0);
}

#[test]
fn empty_bags_are_rejected() {
    let good = Bag { slide_id: 0, instances: Tensor::<f64>::ones(&[2, 3]), label: 0 };
    let other = Bag { slide_id: 1, instances: Tensor::<f64>::ones(&[2, 3]), label: 1 };
    let empty = Bag { slide_id: 7, instances: Tensor::<f64>::zeros(&[0, 3]), label: 1 };
    let r = train_mil(&[good, other, empty], &[], 3, &MilConfig::default(), 0);
    assert_eq!(r.unwrap_err(), EvalError::EmptyBag(7));
}

fn small_dataset() -> ctxpair::slidegen::Dataset {
    let cfg = GenConfig { rows: 16, cols: 16, patch: PatchDims::new(8, 8, 3), lesion_radius: (2.0, 4.0), ..GenConfig::default() };
    generate_dataset(&cfg, &SplitCounts { train: [3; 3], val: [1; 3], test: [2; 3] }).unwrap()
}

fn small_probe() -> ProbeConfig {
    ProbeConfig { train_per_class: 120, val_per_class: 40, test_per_class: 80, epochs: 150, ..ProbeConfig::default() }
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let data = small_dataset();
    let encoder = init_params::<f64>(3, data.dims().len(), &EncoderWidths::default());
    let before = encoder.fingerprint();
    let a = probe_encoder(&encoder, &data, &small_probe(), 4).unwrap();
    assert_eq!(encoder.fingerprint(), before);
    let b = probe_encoder(&encoder, &data, &small_probe(), 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shuffled_labels_score_near_chance() {
    let data = small_dataset();
    let cfg = SupervisedConfig {
        train_per_class: 150,
        test_per_class: 100,
        epochs: 5,
        shuffle_labels: true,
        ..SupervisedConfig::default()
    };
    for seed in 0..5 {
        let acc = train_supervised_baseline::<f32>(&data, &cfg, seed).unwrap().test.accuracy;
        assert!((0.15..=0.55).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn supervised_training_beats_an_untrained_probe() {
    let data = small_dataset();
    let cfg = SupervisedConfig { train_per_class: 150, test_per_class: 100, epochs: 10, ..SupervisedConfig::default() };
    let sup = train_supervised_baseline::<f32>(&data, &cfg, 2).unwrap();
    let random = init_params::<f32>(2, data.dims().len(), &cfg.widths);
    let probe = probe_encoder(&random, &data, &small_probe(), 2).unwrap();
    assert!(sup.test.accuracy >= probe.test.accuracy - 0.02, "{} vs {}", sup.test.accuracy, probe.test.accuracy);
    assert!(sup.test.accuracy > 0.5);
}

proptest! {
    #[test]
    fn auroc_flips_under_negation(scores in prop::collection::vec(-5.0f64..5.0, 4..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
