//! Synthetic virtual slides: patch grids with circular lesion regions.
//!
//! Each patch is a class texture (base colour plus an oriented sinusoid with
//! random per-patch orientation and phase), modulated by a slide-wide smooth
//! intensity drift and perturbed by iid pixel noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SlideError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("label grid is empty")]
    EmptyGrid,
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[repr(u8)]
pub enum TissueClass {
    Benign = 0,
    Dysplasia = 1,
    Malignant = 2,
}

impl TissueClass {
    pub const ALL: [TissueClass; 3] = [Self::Benign, Self::Dysplasia, Self::Malignant];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PatchDims {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    /// Number of values in one patch.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Texture of one tissue class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    /// Base intensity per channel.
    pub base: Vec<f64>,
    /// Sinusoid frequency in cycles per patch width.
    pub frequency: f64,
    pub texture_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub rows: usize,
    pub cols: usize,
    pub patch: PatchDims,
    /// Inclusive range of lesion counts on non-benign slides.
    pub lesion_count: (u32, u32),
    /// Inclusive range of lesion radii, in grid cells.
    pub lesion_radius: (f64, f64),
    /// Indexed by [`TissueClass::index`].
    pub prototypes: Vec<ClassPrototype>,
    /// Relative strength of the smooth multiplicative drift across a slide,
    /// in `[0, 1)`.
    pub nuisance_amplitude: f64,
    /// Half-width of the per-slide, per-channel stain gain around 1.
    pub stain_gain: f64,
    /// Half-width of the per-slide, per-channel additive stain shift.
    pub stain_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            patch: PatchDims::new(16, 16, 3),
            lesion_count: (1, 3),
            lesion_radius: (2.5, 6.0),
            prototypes: vec![
                ClassPrototype { base: vec![0.78, 0.56, 0.72], frequency: 1.0, texture_amplitude: 0.2 },
                ClassPrototype { base: vec![0.66, 0.46, 0.66], frequency: 2.0, texture_amplitude: 0.2 },
                ClassPrototype { base: vec![0.54, 0.34, 0.60], frequency: 3.0, texture_amplitude: 0.2 },
            ],
            nuisance_amplitude: 0.12,
            stain_gain: 0.0,
            stain_shift: 0.0,
            noise_std: 0.08,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SlideError> {
        let err = |m: &str| Err(SlideError::Config(m.to_string()));
        if self.rows == 0 || self.cols == 0 || self.patch.is_empty() {
            return err("grid and patch dimensions must be positive");
        }
        if self.lesion_count.0 > self.lesion_count.1 || self.lesion_count.0 == 0 {
            return err("lesion_count range must be non-empty and start at 1 or more");
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return err("lesion_radius range must be non-empty and positive");
        }
        if 2.0 * r1 + 1.0 > self.rows.min(self.cols) as f64 {
            return err("lesion radius exceeds the grid");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.nuisance_amplitude) {
            return err("nuisance_amplitude must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.stain_gain) || !(0.0..1.0).contains(&self.stain_shift) {
            return err("stain_gain and stain_shift must lie in [0, 1)");
        }
        if self.prototypes.len() != TissueClass::COUNT {
            return err("exactly one prototype per tissue class is required");
        }
        if self.prototypes.iter().any(|p| p.base.len() != self.patch.channels) {
            return err("prototype base must have one entry per channel");
        }
        Ok(())
    }

    /// Euclidean distance between the Benign and Malignant base colours.
    pub fn prototype_separation(&self) -> f64 {
        let b = &self.prototypes[TissueClass::Benign.index()].base;
        let m = &self.prototypes[TissueClass::Malignant.index()].base;
        b.iter().zip(m).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualSlide {
    pub slide_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub dims: PatchDims,
    /// `rows·cols` patches back to back, each `H×W×C` row-major.
    pub pixels: Vec<f32>,
    pub labels: Vec<TissueClass>,
    pub slide_label: TissueClass,
}

impl VirtualSlide {
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        self.patch_at(self.cell_index(row, col))
    }

    pub fn patch_at(&self, cell: usize) -> &[f32] {
        let n = self.dims.len();
        &self.pixels[cell * n..(cell + 1) * n]
    }

    pub fn label(&self, row: usize, col: usize) -> TissueClass {
        self.labels[self.cell_index(row, col)]
    }
}

/// Maximum severity present in a label grid.
pub fn derive_slide_label(labels: &[TissueClass]) -> Result<TissueClass, SlideError> {
    labels.iter().copied().max().ok_or(SlideError::EmptyGrid)
}

fn mix_seed(seed: u64, slide_id: u32, class: TissueClass) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        ^ (u64::from(slide_id)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((class as u64) + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Wave {
    k_row: f64,
    k_col: f64,
    phase: f64,
}

pub fn generate_slide(
    config: &GenConfig,
    slide_id: u32,
    target_class: TissueClass,
) -> Result<VirtualSlide, SlideError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, slide_id, target_class));
    let (rows, cols) = (config.rows, config.cols);
    let mut labels = vec![TissueClass::Benign; rows * cols];

    if target_class != TissueClass::Benign {
        let count = rng.random_range(config.lesion_count.0..=config.lesion_count.1);
        // Lower-severity lesions are painted first; the final one is the
        // target class and is never overwritten.
        let mut classes: Vec<TissueClass> = (1..count)
            .map(|_| TissueClass::ALL[rng.random_range(1..=target_class.index())])
            .collect();
        classes.sort();
        classes.push(target_class);
        for class in classes {
            let center_r = rng.random_range(0..rows) as f64;
            let center_c = rng.random_range(0..cols) as f64;
            let radius = rng.random_range(config.lesion_radius.0..=config.lesion_radius.1);
            for r in 0..rows {
                for c in 0..cols {
                    let d2 = (r as f64 - center_r).powi(2) + (c as f64 - center_c).powi(2);
                    if d2 <= radius * radius {
                        labels[r * cols + c] = class;
                    }
                }
            }
        }
    }

    let dims = config.patch;
    let waves: Vec<[Wave; 2]> = (0..dims.channels)
        .map(|_| {
            let mut wave = || Wave {
                k_row: rng.random_range(-1.0..1.0),
                k_col: rng.random_range(-1.0..1.0),
                phase: rng.random_range(0.0..2.0 * PI),
            };
            [wave(), wave()]
        })
        .collect();
    let stain: Vec<(f64, f64)> = (0..dims.channels)
        .map(|_| {
            let g = 1.0 + config.stain_gain * rng.random_range(-1.0..=1.0);
            (g, config.stain_shift * rng.random_range(-1.0..=1.0))
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_std.max(0.0))
        .map_err(|e| SlideError::Config(e.to_string()))?;

    let mut pixels = Vec::with_capacity(rows * cols * dims.len());
    for r in 0..rows {
        for c in 0..cols {
            let proto = &config.prototypes[labels[r * cols + c].index()];
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (sin_t, cos_t) = theta.sin_cos();
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let proj = (x as f64 * cos_t + y as f64 * sin_t) / dims.width as f64;
                    let texture = proto.texture_amplitude * (2.0 * PI * proto.frequency * proj + phase).sin();
                    let gr = (r as f64 + y as f64 / dims.height as f64) / rows as f64;
                    let gc = (c as f64 + x as f64 / dims.width as f64) / cols as f64;
                    for ch in 0..dims.channels {
                        let drift: f64 = waves[ch]
                            .iter()
                            .map(|w| (2.0 * PI * (w.k_row * gr + w.k_col * gc) + w.phase).sin())
                            .sum::<f64>()
                            * 0.5;
                        let gain = 1.0 + config.nuisance_amplitude * drift;
                        let (sg, ss) = stain[ch];
                        let v = sg * gain * (proto.base[ch] + texture) + ss + noise.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
    }

    let slide_label = derive_slide_label(&labels)?;
    Ok(VirtualSlide { slide_id, rows, cols, dims, pixels, labels, slide_label })
}

/// Slides requested per class, indexed by [`TissueClass::index`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: [usize; 3],
    pub val: [usize; 3],
    pub test: [usize; 3],
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: [10; 3], val: [3; 3], test: [3; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub config: GenConfig,
    pub train: Vec<VirtualSlide>,
    pub val: Vec<VirtualSlide>,
    pub test: Vec<VirtualSlide>,
}

impl Dataset {
    pub fn all_slides(&self) -> impl Iterator<Item = &VirtualSlide> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn dims(&self) -> PatchDims {
        self.config.patch
    }

    /// SHA-256 over every slide's binary encoding, in split order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.id.as_bytes());
        for slide in self.all_slides() {
            hasher.update(crate::dataset_io::encode_slide(slide));
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates train/val/test slides with sequential ids across splits.
pub fn generate_dataset(config: &GenConfig, counts: &SplitCounts) -> Result<Dataset, SlideError> {
    config.validate()?;
    let mut next_id = 0u32;
    let mut split = |per_class: &[usize; 3]| -> Result<Vec<VirtualSlide>, SlideError> {
        let mut slides = Vec::new();
        for class in TissueClass::ALL {
            for _ in 0..per_class[class.index()] {
                slides.push(generate_slide(config, next_id, class)?);
                next_id += 1;
            }
        }
        Ok(slides)
    };
    let train = split(&counts.train)?;
    let val = split(&counts.val)?;
    let test = split(&counts.test)?;
    Ok(Dataset { id: format!("synthetic-{}", config.seed), config: config.clone(), train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig { rows: 12, cols: 12, patch: PatchDims::new(4, 4, 3), lesion_radius: (1.5, 3.0), ..GenConfig::default() }
    }

    #[test]
    fn seeded_slides_are_identical() {
        let cfg = small();
        let a = generate_slide(&cfg, 3, TissueClass::Malignant).unwrap();
        let b = generate_slide(&cfg, 3, TissueClass::Malignant).unwrap();
        assert_eq!(a, b);
        let c = generate_slide(&cfg, 4, TissueClass::Malignant).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn benign_target_gives_benign_slide() {
        let s = generate_slide(&small(), 0, TissueClass::Benign).unwrap();
        assert!(s.labels.iter().all(|&l| l == TissueClass::Benign));
        assert_eq!(s.slide_label, TissueClass::Benign);
    }

    #[test]
    fn malignant_fraction_is_bounded() {
        let cfg = GenConfig::default();
        for id in 0..10 {
            let s = generate_slide(&cfg, id, TissueClass::Malignant).unwrap();
            let m = s.labels.iter().filter(|&&l| l == TissueClass::Malignant).count();
            let frac = m as f64 / s.cell_count() as f64;
            assert!(frac > 0.0 && frac <= 0.5, "fraction {frac}");
            assert_eq!(s.slide_label, TissueClass::Malignant);
        }
    }

    #[test]
    fn lesions_never_exceed_target() {
        let cfg = small();
        for id in 0..20 {
            let s = generate_slide(&cfg, id, TissueClass::Dysplasia).unwrap();
            assert!(s.labels.iter().all(|&l| l <= TissueClass::Dysplasia));
            assert!(s.labels.contains(&TissueClass::Dysplasia));
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let cfg = GenConfig { noise_std: 0.5, ..small() };
        let s = generate_slide(&cfg, 1, TissueClass::Malignant).unwrap();
        assert!(s.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.pixels.len(), 144 * 48);
    }

    #[test]
    fn slide_label_is_max_severity() {
        use TissueClass::*;
        assert_eq!(derive_slide_label(&[Benign, Benign]).unwrap(), Benign);
        assert_eq!(derive_slide_label(&[Benign, Malignant]).unwrap(), Malignant);
        assert_eq!(derive_slide_label(&[Benign, Dysplasia]).unwrap(), Dysplasia);
        assert_eq!(derive_slide_label(&[]), Err(SlideError::EmptyGrid));
    }

    #[test]
    fn impossible_geometry_is_rejected() {
        let cfg = GenConfig { rows: 6, cols: 6, lesion_radius: (2.0, 4.0), ..small() };
        assert!(matches!(generate_slide(&cfg, 0, TissueClass::Malignant), Err(SlideError::Config(_))));
        let cfg = GenConfig { nuisance_amplitude: 1.0, ..small() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_counts_and_ids() {
        let counts = SplitCounts { train: [2, 2, 2], val: [1, 1, 1], test: [1, 1, 1] };
        let ds = generate_dataset(&small(), &counts).unwrap();
        assert_eq!(ds.all_slides().count(), 12);
        let mut ids: Vec<u32> = ds.all_slides().map(|s| s.slide_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        for (split, want) in [(&ds.train, 2), (&ds.val, 1), (&ds.test, 1)] {
            for class in TissueClass::ALL {
                assert_eq!(split.iter().filter(|s| s.slide_label == class).count(), want);
            }
        }
        let again = generate_dataset(&small(), &counts).unwrap();
        assert_eq!(ds.content_hash(), again.content_hash());
    }

    #[test]
    fn zero_count_split_is_empty() {
        let counts = SplitCounts { train: [1, 0, 0], val: [0; 3], test: [0; 3] };
        let ds = generate_dataset(&small(), &counts).unwrap();
        assert!(ds.val.is_empty() && ds.test.is_empty());
        assert_eq!(ds.train.len(), 1);
    }

    #[test]
    fn default_prototypes_are_separable() {
        let cfg = GenConfig::default();
        assert!(cfg.prototype_separation() > 3.0 * cfg.noise_std);
    }
}
