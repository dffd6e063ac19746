//! On-disk dataset layout: a JSON manifest plus one binary file per slide.
//!
//! Slide files are little-endian throughout:
//!
//! | field | type |
//! |---|---|
//! | magic `"CSSL"` | 4 bytes |
//! | version, rows, cols, H, W, C | u32 each |
//! | patch values, cell-major then pixel row-major | `rows·cols·H·W·C` × f32 |
//! | cell labels (0/1/2) | `rows·cols` × u8 |
//! | slide label | u8 |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slidegen::{derive_slide_label, Dataset, GenConfig, PatchDims, TissueClass, VirtualSlide};

pub const MAGIC: &[u8; 4] = b"CSSL";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic bytes {0:?}, expected \"CSSL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated slide file: header implies {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("slide file has {extra} bytes past the end of the declared payload")]
    TrailingData { extra: usize },
    #[error("invalid label byte {0}")]
    BadLabel(u8),
    #[error("stored slide label {stored:?} disagrees with cell labels ({derived:?})")]
    InconsistentLabel { stored: TissueClass, derived: TissueClass },
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub fn encode_slide(slide: &VirtualSlide) -> Vec<u8> {
    let cells = slide.cell_count();
    let mut out = Vec::with_capacity(HEADER_LEN + slide.pixels.len() * 4 + cells + 1);
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        slide.rows as u32,
        slide.cols as u32,
        slide.dims.height as u32,
        slide.dims.width as u32,
        slide.dims.channels as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &p in &slide.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend(slide.labels.iter().map(|&l| l as u8));
    out.push(slide.slide_label as u8);
    out
}

pub fn decode_slide(bytes: &[u8], slide_id: u32) -> Result<VirtualSlide, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("in header"));
    let version = word(0);
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let [rows, cols, h, w, c] = [1, 2, 3, 4, 5].map(|i| word(i) as usize);
    let overflow = || DataError::Manifest("slide dimensions overflow".into());
    let cells = rows.checked_mul(cols).ok_or_else(overflow)?;
    let values = cells.checked_mul(h * w * c).ok_or_else(overflow)?;
    let expected = values
        .checked_mul(4)
        .and_then(|b| b.checked_add(HEADER_LEN + cells + 1))
        .ok_or_else(overflow)?;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingData { extra: bytes.len() - expected });
    }
    let pix_end = HEADER_LEN + values * 4;
    let pixels = bytes[HEADER_LEN..pix_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
        .collect();
    let labels = bytes[pix_end..pix_end + cells]
        .iter()
        .map(|&b| TissueClass::from_u8(b).ok_or(DataError::BadLabel(b)))
        .collect::<Result<Vec<_>, _>>()?;
    let stored = bytes[expected - 1];
    let slide_label = TissueClass::from_u8(stored).ok_or(DataError::BadLabel(stored))?;
    if let Ok(derived) = derive_slide_label(&labels) {
        if derived != slide_label {
            return Err(DataError::InconsistentLabel { stored: slide_label, derived });
        }
    }
    Ok(VirtualSlide { slide_id, rows, cols, dims: PatchDims::new(h, w, c), pixels, labels, slide_label })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: u32,
    pub file: String,
    pub slide_label: TissueClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub rows: usize,
    pub cols: usize,
    pub dims: PatchDims,
    /// Per split, slides per class indexed by [`TissueClass::index`].
    pub class_counts: SplitClassCounts,
    pub train: Vec<SlideEntry>,
    pub val: Vec<SlideEntry>,
    pub test: Vec<SlideEntry>,
    pub generator: GenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitClassCounts {
    pub train: [usize; 3],
    pub val: [usize; 3],
    pub test: [usize; 3],
}

fn class_counts(slides: &[VirtualSlide]) -> [usize; 3] {
    let mut counts = [0; 3];
    for s in slides {
        counts[s.slide_label.index()] += 1;
    }
    counts
}

pub fn slide_file_name(slide_id: u32) -> String {
    format!("slide_{slide_id:05}.bin")
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write_split = |slides: &[VirtualSlide]| -> Result<Vec<SlideEntry>, DataError> {
        slides
            .iter()
            .map(|s| {
                let file = slide_file_name(s.slide_id);
                let path = dir.join(&file);
                fs::write(&path, encode_slide(s)).map_err(io_err(&path))?;
                Ok(SlideEntry { slide_id: s.slide_id, file, slide_label: s.slide_label })
            })
            .collect()
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dataset_id: dataset.id.clone(),
        rows: dataset.config.rows,
        cols: dataset.config.cols,
        dims: dataset.config.patch,
        class_counts: SplitClassCounts {
            train: class_counts(&dataset.train),
            val: class_counts(&dataset.val),
            test: class_counts(&dataset.test),
        },
        train: write_split(&dataset.train)?,
        val: write_split(&dataset.val)?,
        test: write_split(&dataset.test)?,
        generator: dataset.config.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads a dataset directory, or the directory containing a manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    let read_split = |entries: &[SlideEntry]| -> Result<Vec<VirtualSlide>, DataError> {
        entries
            .iter()
            .map(|e| {
                let p = dir.join(&e.file);
                let bytes = fs::read(&p).map_err(io_err(&p))?;
                let slide = decode_slide(&bytes, e.slide_id)?;
                if slide.rows != manifest.rows || slide.cols != manifest.cols || slide.dims != manifest.dims {
                    return Err(DataError::Manifest(format!("{} dims disagree with manifest", e.file)));
                }
                if slide.slide_label != e.slide_label {
                    return Err(DataError::Manifest(format!("{} label disagrees with manifest", e.file)));
                }
                Ok(slide)
            })
            .collect()
    };
    Ok(Dataset {
        id: manifest.dataset_id.clone(),
        config: manifest.generator.clone(),
        train: read_split(&manifest.train)?,
        val: read_split(&manifest.val)?,
        test: read_split(&manifest.test)?,
    })
}
