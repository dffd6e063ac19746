use ctxpair::augment::AugmentConfig;
use ctxpair::ndgrad::Tensor;
use ctxpair::sampler::{build_batch, BatchRng, DistanceCap, SamplerConfig, SamplingMode};
use ctxpair::slidegen::{generate_dataset, Dataset, GenConfig, PatchDims, SplitCounts};
use ctxpair::ssl::{CombinedLossConfig, SslMethod};
use ctxpair::train::{
    directional_grad_error, images_to_tensor, init_params, pretrain, EncoderWidths, SslModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: EncoderWidths = EncoderWidths { hidden: [24, 16], embedding: 12, projector_hidden: 12, projection: 8 };

fn small_dataset() -> Dataset {
    let cfg = GenConfig { rows: 12, cols: 12, patch: PatchDims::new(4, 4, 3), lesion_radius: (1.5, 3.0), ..GenConfig::default() };
    generate_dataset(&cfg, &SplitCounts { train: [2; 3], val: [0; 3], test: [0; 3] }).unwrap()
}

fn small_config(method: SslMethod, alpha: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method);
    cfg.seed = seed;
    cfg.epochs = 4;
    cfg.steps_per_epoch = 3;
    cfg.widths = TINY;
    cfg.loss.alpha = alpha;
    cfg.sampler.pivot_count = 32;
    cfg
}

#[test]
fn step_gradients_match_finite_differences() {
    let data = small_dataset();
    for method in SslMethod::ALL {
        for alpha in [0.0, 0.5, 1.0] {
            let mut worst = 0.0f64;
            for case in 0..50u64 {
                let model = SslModel::<f64>::new(method, case, data.dims().len(), &TINY);
                let sampler = SamplerConfig { pivot_count: 8, ..SamplerConfig::default() };
                let batch = build_batch(&data.train, &sampler, &AugmentConfig::default(), &mut BatchRng::seed_from(case))
                    .unwrap();
                let loss = CombinedLossConfig { method, alpha, ..CombinedLossConfig::default() };
                let err = directional_grad_error(&model, &batch, &loss, case ^ 0xD1, 1e-6).unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-3, "{method:?} at alpha {alpha}: {worst}");
        }
    }
}

#[test]
fn pretraining_is_deterministic() {
    let data = small_dataset();
    for method in SslMethod::ALL {
        let cfg = small_config(method, 0.5, 3);
        let a = pretrain::<f64>(&data.train, &cfg).unwrap();
        let b = pretrain::<f64>(&data.train, &cfg).unwrap();
        assert_eq!(a, b);
        let other = pretrain::<f64>(&data.train, &TrainConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.model, other.model);
    }
}

#[test]
fn alpha_zero_reproduces_standard_sampling() {
    let data = small_dataset();
    for method in SslMethod::ALL {
        for seed in 0..3 {
            let ctx = small_config(method, 0.0, seed);
            let mut std = ctx.clone();
            std.sampler.mode = SamplingMode::Standard;
            let a = pretrain::<f64>(&data.train, &ctx).unwrap();
            let b = pretrain::<f64>(&data.train, &std).unwrap();
            let bits = |t: &[ctxpair::train::EpochLoss]| t.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.trace), bits(&b.trace));
            assert_eq!(a.model, b.model);
            assert_eq!(a.branch_counts.context, 0);
        }
    }
}

#[test]
fn alpha_one_never_evaluates_the_standard_branch() {
    let data = small_dataset();
    for method in SslMethod::ALL {
        let cfg = small_config(method, 1.0, 1);
        let out = pretrain::<f64>(&data.train, &cfg).unwrap();
        assert_eq!(out.branch_counts.standard, 0);
        assert_eq!(out.branch_counts.context, cfg.epochs * cfg.steps_per_epoch);
        let mixed = pretrain::<f64>(&data.train, &small_config(method, 0.5, 1)).unwrap();
        assert_eq!(mixed.branch_counts.standard, 12);
        assert_eq!(mixed.branch_counts.context, 12);
    }
}

#[test]
fn barlow_twins_loss_falls() {
    let data = small_dataset();
    for seed in 0..5 {
        let mut cfg = small_config(SslMethod::BarlowTwins, 0.5, seed);
        cfg.epochs = 10;
        cfg.steps_per_epoch = 4;
        cfg.sampler.distance_cap = DistanceCap::Bounded(1);
        let out = pretrain::<f64>(&data.train, &cfg).unwrap();
        let (first, last) = (out.trace[0].loss, out.trace[9].loss);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn invalid_training_setups_are_rejected() {
    let data = small_dataset();
    let mut cfg = small_config(SslMethod::Vicreg, 0.5, 0);
    cfg.sampler.mode = SamplingMode::Standard;
    assert!(pretrain::<f64>(&data.train, &cfg).is_err());
    assert!(pretrain::<f64>(&[], &small_config(SslMethod::Byol, 0.0, 0)).is_err());
    let cfg = TrainConfig { lr: -1.0, ..small_config(SslMethod::Byol, 0.0, 0) };
    assert!(pretrain::<f64>(&data.train, &cfg).is_err());
}

fn dense(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>, relu: bool) -> Vec<Vec<f64>> {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|j| {
                    let v = b.data()[j] + (0..fan_in).map(|i| row[i] * w.data()[i * fan_out + j]).sum::<f64>();
                    if relu { v.max(0.0) } else { v }
                })
                .collect()
        })
        .collect()
}

#[test]
fn forward_pass_matches_layer_by_layer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = init_params::<f64>(8, 48, &EncoderWidths::default());
    let pixels: Vec<f32> = (0..5 * 48).map(|_| rng.random::<f32>()).collect();
    let x = images_to_tensor::<f64>(&pixels, 48).unwrap();
    let rows: Vec<Vec<f64>> = pixels.chunks(48).map(|r| r.iter().map(|&v| f64::from(v) - 0.5).collect()).collect();
    let mut h = rows;
    for (i, layer) in params.backbone.iter().enumerate() {
        h = dense(&h, &layer.weight, &layer.bias, i < 2);
    }
    let embedding = h.clone();
    h = dense(&h, &params.projector[0].weight, &params.projector[0].bias, true);
    h = dense(&h, &params.projector[1].weight, &params.projector[1].bias, false);
    let enc = params.encode(&x).unwrap();
    for (got, want) in [(&enc.embedding, &embedding), (&enc.projection, &h)] {
        for (i, row) in want.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((got.at(i, j) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn byol_target_tracks_online_slowly() {
    let data = small_dataset();
    let out = pretrain::<f64>(&data.train, &small_config(SslMethod::Byol, 0.5, 2)).unwrap();
    let target = out.model.target.as_ref().unwrap();
    let init = init_params::<f64>(2, data.dims().len(), &TINY);
    let gap = |a: &ctxpair::train::EncoderParams<f64>, b: &ctxpair::train::EncoderParams<f64>| {
        a.tensors().iter().zip(b.tensors()).flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs())).sum::<f64>()
    };
    // with τ = 0.99 the target has moved a little, and less than the online net
    assert!(gap(target, &init) > 0.0);
    assert!(gap(target, &init) < gap(&out.model.online, &init));
}
