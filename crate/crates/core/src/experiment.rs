//! Experiment orchestration: seeded pretrain → probe → MIL runs, α and
//! distance sweeps, mismatch reports and the results table.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{load_dataset, DataError};
use crate::eval::{mil_encoder, probe_encoder, EvalError, MilConfig, ProbeConfig};
use crate::ndgrad::GradError;
use crate::sampler::{mismatch_rate, DistanceCap, SamplerError, SamplingMode};
use crate::slidegen::{generate_dataset, Dataset, GenConfig, SlideError, SplitCounts, TissueClass};
use crate::ssl::SslMethod;
use crate::train::{pretrain, EncoderParams, EpochLoss, TrainConfig, TrainError};

pub const ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DISTANCE_GRID: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("seed {seed}: {source}")]
    Train { seed: u64, source: TrainError },
    #[error("seed {seed}: {source}")]
    Eval { seed: u64, source: EvalError },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("dataset has no non-benign slides")]
    NoQualifyingSlides,
    #[error("results for {0} already exist; pass force to overwrite")]
    ExistingResult(String),
    #[error("{path}: {message}")]
    Results { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn non_finite_grad(e: &GradError) -> bool {
    matches!(e, GradError::NonFinite(_))
}

impl ExperimentError {
    /// Process exit code: 2 configuration, 3 data format, 4 numerical
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::ExistingResult(_) | Self::Sampler(_) => 2,
            Self::Slide(SlideError::Config(_)) => 2,
            Self::Slide(_) | Self::Data(_) | Self::Results { .. } => 3,
            Self::Train { source, .. } => match source {
                TrainError::NonFiniteLoss { .. } => 4,
                TrainError::Grad(g) if non_finite_grad(g) => 4,
                TrainError::Config(_) | TrainError::Sampler(_) | TrainError::Ssl(_) => 2,
                TrainError::Grad(_) => 1,
            },
            Self::Eval { source, .. } => match source {
                EvalError::Grad(g) if non_finite_grad(g) => 4,
                EvalError::Config(_) => 2,
                _ => 1,
            },
            Self::NoQualifyingSlides => 2,
            Self::Io { .. } => 1,
        }
    }
}

/// Where the slides come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic { generator: GenConfig, counts: SplitCounts },
    Path { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic { generator: GenConfig::default(), counts: SplitCounts::default() }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset, ExperimentError> {
        match self {
            DatasetSource::Synthetic { generator, counts } => Ok(generate_dataset(generator, counts)?),
            DatasetSource::Path { path } => Ok(load_dataset(path)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub method: SslMethod,
    pub sampling: SamplingMode,
    pub alpha: f64,
    /// Neighbour distance cap; only meaningful in context mode.
    pub distance: Option<DistanceCap>,
    pub seeds: Vec<u64>,
    /// Optimizer, widths, augmentation and batch settings. Its method,
    /// α, sampling mode and distance are taken from the fields above.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub mil: MilConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            method: SslMethod::BarlowTwins,
            sampling: SamplingMode::Contextual,
            alpha: 0.5,
            distance: Some(DistanceCap::Bounded(1)),
            seeds: (1..=5).collect(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            mil: MilConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ExperimentError::Config(format!("alpha {} must lie in [0, 1]", self.alpha)));
        }
        match (self.sampling, self.distance) {
            (SamplingMode::Standard, _) if self.alpha != 0.0 => {
                return Err(ExperimentError::Config("alpha must be 0 with standard sampling".into()));
            }
            (SamplingMode::Standard, Some(d)) => {
                return Err(ExperimentError::Config(format!("distance {d} requires context sampling")));
            }
            (_, Some(DistanceCap::Bounded(0))) => {
                return Err(ExperimentError::Config("distance 0 would pair a patch with itself".into()));
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed is required".into()));
        }
        self.train_config(self.seeds[0])
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.mil.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    /// The pretraining config for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t.loss.method = self.method;
        t.loss.alpha = self.alpha;
        t.sampler.mode = self.sampling;
        t.sampler.distance_cap = self.distance.unwrap_or(DistanceCap::Bounded(1));
        t
    }

    /// `self` with another method, switching to that method's default
    /// learning rate when the current one is a method default.
    pub fn with_method(&self, method: SslMethod) -> Self {
        let mut c = self.clone();
        if c.train.lr == TrainConfig::for_method(c.method).lr {
            c.train.lr = TrainConfig::for_method(method).lr;
        }
        c.method = method;
        c
    }

    pub fn standard(&self) -> Self {
        Self { sampling: SamplingMode::Standard, alpha: 0.0, distance: None, ..self.clone() }
    }

    pub fn context(&self, alpha: f64, distance: DistanceCap) -> Self {
        Self { sampling: SamplingMode::Contextual, alpha, distance: Some(distance), ..self.clone() }
    }
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset_id: String,
    pub method: SslMethod,
    pub sampling: SamplingMode,
    pub alpha: f64,
    pub d: Option<DistanceCap>,
    pub seed: u64,
    pub probe_accuracy: f64,
    pub probe_auroc: f64,
    pub mil_accuracy: f64,
    pub mil_auroc: f64,
    /// Seconds.
    pub wall_time: f64,
}

impl ExperimentResult {
    /// Identity of the run: everything except metrics and timing.
    pub fn key(&self) -> String {
        let d = self.d.map(|d| d.to_string()).unwrap_or_default();
        format!("{}/{}/{}/{}/{}/{}", self.dataset_id, self.method, self.sampling, self.alpha, d, self.seed)
    }

    /// Equality ignoring `wall_time`.
    pub fn same_metrics(&self, other: &Self) -> bool {
        Self { wall_time: 0.0, ..self.clone() } == Self { wall_time: 0.0, ..other.clone() }
    }
}

/// Everything a single seeded run produces.
pub struct RunOutput {
    pub result: ExperimentResult,
    pub encoder: EncoderParams<f32>,
    pub trace: Vec<EpochLoss>,
}

/// Runs one seed on an already loaded dataset.
pub fn run_seed(dataset: &Dataset, config: &ExperimentConfig, seed: u64) -> Result<RunOutput, ExperimentError> {
    let start = Instant::now();
    let train = config.train_config(seed);
    let out = pretrain::<f32>(&dataset.train, &train).map_err(|source| ExperimentError::Train { seed, source })?;
    let encoder = out.model.online;
    let probe = probe_encoder(&encoder, dataset, &config.probe, seed).map_err(|source| ExperimentError::Eval { seed, source })?;
    let mil = mil_encoder(&encoder, &dataset.train, &dataset.test, &config.mil, seed)
        .map_err(|source| ExperimentError::Eval { seed, source })?;
    let result = ExperimentResult {
        dataset_id: dataset.id.clone(),
        method: config.method,
        sampling: config.sampling,
        alpha: config.alpha,
        d: match config.sampling {
            SamplingMode::Standard => None,
            SamplingMode::Contextual => Some(train.sampler.distance_cap),
        },
        seed,
        probe_accuracy: probe.test.accuracy,
        probe_auroc: probe.test.auroc,
        mil_accuracy: mil.test.accuracy,
        mil_auroc: mil.test.auroc,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput { result, encoder, trace: out.trace })
}

/// A loaded dataset plus a memo of finished runs, so sweep points shared
/// between analyses are trained once.
pub struct Lab {
    dataset: Dataset,
    cache: HashMap<String, ExperimentResult>,
}

impl Lab {
    pub fn new(dataset: Dataset) -> Self {
        Self { dataset, cache: HashMap::new() }
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// Number of distinct runs performed so far.
    pub fn runs(&self) -> usize {
        self.cache.len()
    }

    pub fn run(&mut self, config: &ExperimentConfig) -> Result<Vec<ExperimentResult>, ExperimentError> {
        config.validate()?;
        let mut rows = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let key = serde_json::to_string(&(
                config.train_config(seed),
                &config.probe,
                &config.mil,
                config.sampling,
                config.distance,
            ))
            .expect("configs serialize");
            if let Some(hit) = self.cache.get(&key) {
                rows.push(hit.clone());
                continue;
            }
            let result = run_seed(&self.dataset, config, seed)?.result;
            self.cache.insert(key, result.clone());
            rows.push(result);
        }
        Ok(rows)
    }

    /// Runs `base` at each α (context mode, base distance), with per-seed
    /// accuracy gains over α = 0.
    pub fn sweep_alpha(&mut self, base: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<SweepRow>, ExperimentError> {
        if base.sampling != SamplingMode::Contextual {
            return Err(ExperimentError::Config("sweep-alpha needs context sampling".into()));
        }
        let distance = base.distance.unwrap_or(DistanceCap::Bounded(1));
        let baseline = self.run(&base.context(0.0, distance))?;
        let mut rows = Vec::new();
        for &alpha in alphas {
            let results = self.run(&base.context(alpha, distance))?;
            rows.extend(with_gains(results, &baseline));
        }
        Ok(rows)
    }

    /// Runs every method at each distance with α = 0.5, with per-seed
    /// accuracy gains over standard sampling.
    pub fn sweep_distance(
        &mut self,
        base: &ExperimentConfig,
        methods: &[SslMethod],
        distances: &[DistanceCap],
    ) -> Result<Vec<SweepRow>, ExperimentError> {
        if let Some(d) = distances.iter().find(|&&d| d == DistanceCap::Bounded(0)) {
            return Err(ExperimentError::Config(format!("distance {d} would pair a patch with itself")));
        }
        let mut rows = Vec::new();
        for &method in methods {
            let m = base.with_method(method);
            let baseline = self.run(&m.standard())?;
            for &d in distances {
                let results = self.run(&m.context(0.5, d))?;
                rows.extend(with_gains(results, &baseline));
            }
        }
        Ok(rows)
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentResult>, ExperimentError> {
    config.validate()?;
    Lab::new(config.dataset.load()?).run(config)
}

/// A result with its accuracy gains over a per-seed baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub result: ExperimentResult,
    pub probe_gain: f64,
    pub mil_gain: f64,
}

fn with_gains(results: Vec<ExperimentResult>, baseline: &[ExperimentResult]) -> Vec<SweepRow> {
    results
        .into_iter()
        .zip(baseline)
        .map(|(result, base)| SweepRow {
            probe_gain: result.probe_accuracy - base.probe_accuracy,
            mil_gain: result.mil_accuracy - base.mil_accuracy,
            result,
        })
        .collect()
}

/// Mean probe gain of the rows selected by `keep`.
pub fn mean_probe_gain(rows: &[SweepRow], keep: impl Fn(&ExperimentResult) -> bool) -> Option<f64> {
    let gains: Vec<f64> = rows.iter().filter(|r| keep(&r.result)).map(|r| r.probe_gain).collect();
    (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64)
}

pub fn sweep_alpha(base: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<SweepRow>, ExperimentError> {
    base.validate()?;
    Lab::new(base.dataset.load()?).sweep_alpha(base, alphas)
}

pub fn sweep_distance(
    base: &ExperimentConfig,
    methods: &[SslMethod],
    distances: &[DistanceCap],
) -> Result<Vec<SweepRow>, ExperimentError> {
    base.validate()?;
    Lab::new(base.dataset.load()?).sweep_distance(base, methods, distances)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub d: usize,
    pub mismatch_fraction: f64,
}

/// Label mismatch rate at each distance, pooled over the non-benign slides.
pub fn mismatch_report(dataset: &Dataset, distances: &[usize]) -> Result<Vec<MismatchRow>, ExperimentError> {
    let slides: Vec<_> = dataset.all_slides().filter(|s| s.slide_label != TissueClass::Benign).cloned().collect();
    if slides.is_empty() {
        return Err(ExperimentError::NoQualifyingSlides);
    }
    distances
        .iter()
        .map(|&d| Ok(MismatchRow { d, mismatch_fraction: mismatch_rate(&slides, d)? }))
        .collect()
}

fn results_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Results { path: path.to_path_buf(), message: e.to_string() }
}

pub fn read_results(path: &Path) -> Result<Vec<ExperimentResult>, ExperimentError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| results_err(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| results_err(path, e))).collect()
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| ExperimentError::Io { path: parent.to_path_buf(), source })?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| results_err(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| results_err(path, e))?;
    }
    writer.flush().map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Appends `rows` to the results table at `path`. A row whose run key is
/// already present is rejected unless `force`, which replaces it in place.
pub fn append_results(path: &Path, rows: &[ExperimentResult], force: bool) -> Result<(), ExperimentError> {
    let mut table = if path.exists() { read_results(path)? } else { Vec::new() };
    for row in rows {
        match table.iter_mut().find(|r| r.key() == row.key()) {
            Some(existing) if force => *existing = row.clone(),
            Some(_) => return Err(ExperimentError::ExistingResult(row.key())),
            None => table.push(row.clone()),
        }
    }
    write_csv(path, &table)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}
