//! Pivot and neighbour selection on slide grids.
//!
//! A contextual pair is a pivot patch and a random neighbour from the same
//! slide within a Chebyshev-distance cap. Both are augmented with the *same*
//! sampled transform `t1`; the standard pair is the pivot under `t1` and an
//! independent `t2`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply, sample_transform, AugmentConfig, AugmentError};
use crate::slidegen::{PatchDims, VirtualSlide};

/// Pivot redraws allowed before a contextual batch fails.
pub const PIVOT_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("cannot compare coordinates from slides {0} and {1}")]
    CrossSlide(u32, u32),
    #[error("patch ({row}, {col}) of slide {slide_id} has no neighbour within {cap}")]
    NoNeighbor { slide_id: u32, row: usize, col: usize, cap: DistanceCap },
    #[error("no pivot with a valid neighbour after {0} draws")]
    PivotRetriesExhausted(usize),
    #[error("no qualifying pairs at distance {0}")]
    NoQualifyingPairs(usize),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchCoord {
    pub slide_id: u32,
    pub row: usize,
    pub col: usize,
}

impl PatchCoord {
    pub fn new(slide_id: u32, row: usize, col: usize) -> Self {
        Self { slide_id, row, col }
    }
}

/// Chebyshev distance `max(|Δrow|, |Δcol|)` between two cells of one slide.
pub fn chebyshev(a: PatchCoord, b: PatchCoord) -> Result<usize, SamplerError> {
    if a.slide_id != b.slide_id {
        return Err(SamplerError::CrossSlide(a.slide_id, b.slide_id));
    }
    Ok(a.row.abs_diff(b.row).max(a.col.abs_diff(b.col)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DistanceCap {
    Bounded(usize),
    Unbounded,
}

impl DistanceCap {
    pub fn admits(self, d: usize) -> bool {
        match self {
            Self::Bounded(cap) => d <= cap,
            Self::Unbounded => true,
        }
    }
}

impl fmt::Display for DistanceCap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bounded(d) => write!(f, "{d}"),
            Self::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for DistanceCap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "∞" | "unbounded" => Ok(Self::Unbounded),
            other => other
                .parse()
                .map(Self::Bounded)
                .map_err(|_| format!("distance must be a non-negative integer or \"inf\", got {other:?}")),
        }
    }
}

impl From<DistanceCap> for String {
    fn from(d: DistanceCap) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DistanceCap {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Standard,
    #[serde(rename = "context", alias = "contextual")]
    Contextual,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Standard => "standard",
            SamplingMode::Contextual => "context",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(SamplingMode::Standard),
            "context" | "contextual" => Ok(SamplingMode::Contextual),
            other => Err(format!("unknown sampling mode {other:?} (expected standard or context)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Pivots per batch (the batch size).
    pub pivot_count: usize,
    pub distance_cap: DistanceCap,
    /// Keep only the `K` nearest candidates when set.
    pub candidate_cap: Option<usize>,
    pub mode: SamplingMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pivot_count: 128,
            distance_cap: DistanceCap::Bounded(1),
            candidate_cap: None,
            mode: SamplingMode::Contextual,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.pivot_count == 0 {
            return Err(SamplerError::Config("pivot_count must be at least 1".into()));
        }
        if self.distance_cap == DistanceCap::Bounded(0) {
            return Err(SamplerError::Config("distance cap must be at least 1".into()));
        }
        if self.candidate_cap == Some(0) {
            return Err(SamplerError::Config("candidate_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// All in-bounds cells other than `pivot` within `cap`, in row-major order.
pub fn neighbors_within(slide: &VirtualSlide, pivot: PatchCoord, cap: DistanceCap) -> Vec<PatchCoord> {
    let (r0, r1, c0, c1) = match cap {
        DistanceCap::Bounded(d) => (
            pivot.row.saturating_sub(d),
            (pivot.row + d).min(slide.rows - 1),
            pivot.col.saturating_sub(d),
            (pivot.col + d).min(slide.cols - 1),
        ),
        DistanceCap::Unbounded => (0, slide.rows - 1, 0, slide.cols - 1),
    };
    let mut out = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            if (row, col) != (pivot.row, pivot.col) {
                out.push(PatchCoord::new(slide.slide_id, row, col));
            }
        }
    }
    out
}

fn candidates(slide: &VirtualSlide, pivot: PatchCoord, cap: DistanceCap, k: Option<usize>) -> Vec<PatchCoord> {
    let mut all = neighbors_within(slide, pivot, cap);
    if let Some(k) = k {
        if k < all.len() {
            // stable: ties stay in row-major order
            all.sort_by_key(|&c| chebyshev(pivot, c).expect("same slide"));
            all.truncate(k);
        }
    }
    all
}

/// Uniformly random neighbour of `pivot` within `cap` (restricted to the `k`
/// nearest candidates when `k` is set).
pub fn sample_contextual_pair<R: Rng + ?Sized>(
    slide: &VirtualSlide,
    pivot: PatchCoord,
    cap: DistanceCap,
    k: Option<usize>,
    rng: &mut R,
) -> Result<PatchCoord, SamplerError> {
    let pool = candidates(slide, pivot, cap, k);
    if pool.is_empty() {
        return Err(SamplerError::NoNeighbor { slide_id: slide.slide_id, row: pivot.row, col: pivot.col, cap });
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Two independent streams: `main` drives pivots and transforms, `context`
/// drives neighbour choice. Standard and contextual batches built from the
/// same seed therefore share pivots and `t1`/`t2`.
#[derive(Clone, Debug)]
pub struct BatchRng {
    pub main: ChaCha8Rng,
    pub context: ChaCha8Rng,
}

impl BatchRng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            main: ChaCha8Rng::seed_from_u64(seed),
            context: ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B),
        }
    }
}

/// Views for one training step. Images are flattened back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub dims: PatchDims,
    /// `t1(pivot)`
    pub view_a: Vec<f32>,
    /// `t2(pivot)`
    pub view_b: Vec<f32>,
    /// `t1(neighbour)`; absent in standard mode.
    pub view_ctx: Option<Vec<f32>>,
    pub pivots: Vec<PatchCoord>,
    pub neighbors: Option<Vec<PatchCoord>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }
}

pub fn build_batch(
    slides: &[VirtualSlide],
    config: &SamplerConfig,
    augment: &AugmentConfig,
    rng: &mut BatchRng,
) -> Result<PairBatch, SamplerError> {
    config.validate()?;
    let first = slides.first().ok_or_else(|| SamplerError::Config("no training slides".into()))?;
    let dims = first.dims;
    let offsets: Vec<usize> = slides
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.cell_count();
            Some(start)
        })
        .collect();
    let total: usize = slides.iter().map(VirtualSlide::cell_count).sum();
    let contextual = config.mode == SamplingMode::Contextual;

    let m = config.pivot_count;
    let mut batch = PairBatch {
        dims,
        view_a: Vec::with_capacity(m * dims.len()),
        view_b: Vec::with_capacity(m * dims.len()),
        view_ctx: contextual.then(|| Vec::with_capacity(m * dims.len())),
        pivots: Vec::with_capacity(m),
        neighbors: contextual.then(|| Vec::with_capacity(m)),
    };

    for _ in 0..m {
        let mut attempt = 0;
        let (slide, pivot, neighbor) = loop {
            let flat = batch_pivot(&mut rng.main, total);
            let si = offsets.partition_point(|&o| o <= flat) - 1;
            let slide = &slides[si];
            let cell = flat - offsets[si];
            let pivot = PatchCoord::new(slide.slide_id, cell / slide.cols, cell % slide.cols);
            if !contextual {
                break (slide, pivot, None);
            }
            match sample_contextual_pair(slide, pivot, config.distance_cap, config.candidate_cap, &mut rng.context) {
                Ok(nb) => break (slide, pivot, Some(nb)),
                Err(SamplerError::NoNeighbor { .. }) if attempt + 1 < PIVOT_RETRIES => attempt += 1,
                Err(SamplerError::NoNeighbor { .. }) => {
                    return Err(SamplerError::PivotRetriesExhausted(PIVOT_RETRIES))
                }
                Err(e) => return Err(e),
            }
        };
        let t1 = sample_transform(augment, dims, &mut rng.main);
        let t2 = sample_transform(augment, dims, &mut rng.main);
        let pivot_patch = slide.patch(pivot.row, pivot.col);
        batch.view_a.extend(apply(&t1, pivot_patch, dims)?);
        batch.view_b.extend(apply(&t2, pivot_patch, dims)?);
        batch.pivots.push(pivot);
        if let (Some(nb), Some(ctx), Some(nbs)) = (neighbor, batch.view_ctx.as_mut(), batch.neighbors.as_mut()) {
            ctx.extend(apply(&t1, slide.patch(nb.row, nb.col), dims)?);
            nbs.push(nb);
        }
    }
    Ok(batch)
}

fn batch_pivot<R: Rng + ?Sized>(rng: &mut R, total: usize) -> usize {
    rng.random_range(0..total)
}

/// Fraction of ordered same-slide cell pairs at Chebyshev distance exactly
/// `d` whose labels differ, pooled over `slides`.
pub fn mismatch_rate(slides: &[VirtualSlide], d: usize) -> Result<f64, SamplerError> {
    if d == 0 {
        return Err(SamplerError::NoQualifyingPairs(0));
    }
    let (mut pairs, mut mismatches) = (0u64, 0u64);
    let di = d as isize;
    for slide in slides {
        let (rows, cols) = (slide.rows as isize, slide.cols as isize);
        for r in 0..rows {
            for c in 0..cols {
                let label = slide.labels[(r * cols + c) as usize];
                // perimeter of the (2d+1)-square around (r, c)
                for dr in -di..=di {
                    let ring_step = if dr.abs() == di { 1 } else { 2 * di as usize };
                    for dc in (-di..=di).step_by(ring_step) {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                            continue;
                        }
                        pairs += 1;
                        if slide.labels[(rr * cols + cc) as usize] != label {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    if pairs == 0 {
        return Err(SamplerError::NoQualifyingPairs(d));
    }
    Ok(mismatches as f64 / pairs as f64)
}
