//! Paired image/mask volumes, intensity normalization and mask-constrained
//! cropping.

mod phantom;
mod volume;

pub use phantom::{generate_phantom, synthesize_subject, PhantomConfig, PhantomSubject};
pub use volume::{read_volume, write_volume, RawHeader, Volume, VoxelType};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tabular::ClinicalRecord;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("image shape {image:?} does not match mask shape {mask:?}")]
    ShapeMismatch { image: [usize; 3], mask: [usize; 3] },
    #[error("mask label {value} is not one of the {classes} classes ({count} voxels)")]
    UnknownClass { value: f64, count: usize, classes: usize },
    #[error("crop {crop:?} does not fit volume {volume:?}")]
    CropTooLarge { crop: [usize; 3], volume: [usize; 3] },
    #[error("invalid crop spec: {0}")]
    CropSpec(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

/// HU window mapped affinely onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityWindow {
    pub lower: f64,
    pub upper: f64,
}

impl Default for IntensityWindow {
    fn default() -> Self {
        Self {
            lower: -1000.0,
            upper: 400.0,
        }
    }
}

impl IntensityWindow {
    pub fn normalize(&self, hu: f64) -> f64 {
        let c = hu.clamp(self.lower, self.upper);
        2.0 * (c - self.lower) / (self.upper - self.lower) - 1.0
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * (self.upper - self.lower) + self.lower
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// Normalized intensities, `(z, y, x)`.
    pub image: Array3<f64>,
    pub mask: Array3<u8>,
    pub record: ClinicalRecord,
    pub spacing: [f64; 3],
}

impl VolumeSample {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }
}

/// Convert float labels to class indices, rejecting anything outside
/// `0..num_classes` or non-integral.
pub fn labels_from_volume(data: &Array3<f64>, num_classes: usize) -> Result<Array3<u8>, DataError> {
    let valid = |v: f64| v.fract() == 0.0 && v >= 0.0 && (v as usize) < num_classes;
    if let Some(&bad) = data.iter().find(|&&v| !valid(v)) {
        let count = data.iter().filter(|&&v| v == bad || (bad.is_nan() && v.is_nan())).count();
        return Err(DataError::UnknownClass {
            value: bad,
            count,
            classes: num_classes,
        });
    }
    Ok(data.mapv(|v| v as u8))
}

pub fn load_sample(
    image_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
    record: ClinicalRecord,
    window: &IntensityWindow,
    num_classes: usize,
) -> Result<VolumeSample, DataError> {
    let image = read_volume(image_path)?;
    let mask = read_volume(mask_path)?;
    if image.shape() != mask.shape() {
        return Err(DataError::ShapeMismatch {
            image: image.shape(),
            mask: mask.shape(),
        });
    }
    let labels = labels_from_volume(&mask.data, num_classes)?;
    Ok(VolumeSample {
        image: image.data.mapv(|v| window.normalize(v)),
        mask: labels,
        record,
        spacing: image.spacing,
    })
}

/// A set of classes that must jointly cover enough voxels of a crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRequirement {
    pub classes: Vec<u8>,
    #[serde(default)]
    pub min_voxels: usize,
    /// Fraction of the crop volume; the larger of the two thresholds applies.
    #[serde(default)]
    pub min_fraction: f64,
}

impl MaskRequirement {
    pub fn threshold(&self, crop_voxels: usize) -> usize {
        self.min_voxels.max((self.min_fraction * crop_voxels as f64).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    /// `(z, y, x)` voxels.
    pub size: [usize; 3],
    #[serde(default)]
    pub min_mask_voxels: Vec<MaskRequirement>,
    pub max_attempts: usize,
}

impl CropSpec {
    /// Any crop of `size` with at least 1% of its voxels in either lung.
    pub fn with_lung_coverage(size: [usize; 3]) -> Self {
        Self {
            size,
            min_mask_voxels: vec![MaskRequirement {
                classes: vec![1, 2],
                min_voxels: 0,
                min_fraction: 0.01,
            }],
            max_attempts: 50,
        }
    }

    /// 256×256 in-plane by 64 slices.
    pub fn paper_scale() -> Self {
        Self::with_lung_coverage([64, 256, 256])
    }

    pub fn desk_scale() -> Self {
        Self::with_lung_coverage([16, 16, 16])
    }

    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.size.contains(&0) {
            return Err(DataError::CropSpec(format!("zero-sized crop {:?}", self.size)));
        }
        if self.max_attempts == 0 {
            return Err(DataError::CropSpec("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

impl Default for CropSpec {
    fn default() -> Self {
        Self::paper_scale()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    /// Corner `(z, y, x)` in the source volume.
    pub offset: [usize; 3],
    pub image: Array3<f64>,
    pub mask: Array3<u8>,
    /// True when no attempt met the mask requirements and the best one was kept.
    pub fallback: bool,
    pub attempts: usize,
}

fn class_count(mask: &ndarray::ArrayView3<u8>, classes: &[u8]) -> usize {
    mask.iter().filter(|v| classes.contains(v)).count()
}

/// Lowest ratio of covered voxels to required voxels over all requirements.
fn coverage(mask: &ndarray::ArrayView3<u8>, spec: &CropSpec) -> f64 {
    let n = spec.voxels();
    spec.min_mask_voxels
        .iter()
        .map(|r| {
            let need = r.threshold(n);
            if need == 0 {
                f64::INFINITY
            } else {
                class_count(mask, &r.classes) as f64 / need as f64
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn take(sample: &VolumeSample, offset: [usize; 3], size: [usize; 3]) -> (Array3<f64>, Array3<u8>) {
    let sl = s![
        offset[0]..offset[0] + size[0],
        offset[1]..offset[1] + size[1],
        offset[2]..offset[2] + size[2]
    ];
    (sample.image.slice(sl).to_owned(), sample.mask.slice(sl).to_owned())
}

pub fn random_crop<R: Rng + ?Sized>(sample: &VolumeSample, spec: &CropSpec, rng: &mut R) -> Result<Crop, DataError> {
    spec.validate()?;
    let shape = sample.shape();
    if spec.size.iter().zip(shape).any(|(&c, v)| c > v) {
        return Err(DataError::CropTooLarge {
            crop: spec.size,
            volume: shape,
        });
    }
    let mut best: Option<([usize; 3], f64)> = None;
    for attempt in 1..=spec.max_attempts {
        let offset: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=shape[a] - spec.size[a]));
        let view = sample.mask.slice(s![
            offset[0]..offset[0] + spec.size[0],
            offset[1]..offset[1] + spec.size[1],
            offset[2]..offset[2] + spec.size[2]
        ]);
        let cov = coverage(&view, spec);
        if cov >= 1.0 {
            let (image, mask) = take(sample, offset, spec.size);
            return Ok(Crop {
                offset,
                image,
                mask,
                fallback: false,
                attempts: attempt,
            });
        }
        if best.is_none_or(|(_, c)| cov > c) {
            best = Some((offset, cov));
        }
    }
    let (offset, _) = best.expect("at least one attempt");
    let (image, mask) = take(sample, offset, spec.size);
    log::debug!(
        "subject {}: no crop met the mask requirements after {} attempts",
        sample.record.subject_id,
        spec.max_attempts
    );
    Ok(Crop {
        offset,
        image,
        mask,
        fallback: true,
        attempts: spec.max_attempts,
    })
}

/// Independent stream for `(global_seed, label)`.
pub fn derived_rng(global_seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `n` crops drawn from a stream seeded by `(global_seed, subject_id)`.
pub fn eval_crops(sample: &VolumeSample, spec: &CropSpec, global_seed: u64, n: usize) -> Result<Vec<Crop>, DataError> {
    let mut rng = derived_rng(global_seed, &sample.record.subject_id);
    (0..n).map(|_| random_crop(sample, spec, &mut rng)).collect()
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub subject_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Value of the records CSV id column for this subject.
    pub row_key: String,
}

/// Read newline-delimited JSON entries; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: DatasetEntry = serde_json::from_str(&line).map_err(|err| DataError::Manifest {
            line: i + 1,
            message: err.to_string(),
        })?;
        if e.image.is_relative() {
            e.image = base.join(&e.image);
        }
        if e.mask.is_relative() {
            e.mask = base.join(&e.mask);
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[DatasetEntry]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for e in entries {
        let line = serde_json::to_string(e).expect("entry serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Load every manifest entry, joining records by `row_key`. A subject
/// without a row gets an empty record, so all its attributes count as
/// missing.
pub fn load_dataset(
    manifest: impl AsRef<Path>,
    records: &[ClinicalRecord],
    window: &IntensityWindow,
    num_classes: usize,
) -> Result<Vec<VolumeSample>, DataError> {
    let by_key: HashMap<&str, &ClinicalRecord> = records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let mut record = match by_key.get(e.row_key.as_str()) {
                Some(r) => (*r).clone(),
                None => {
                    log::warn!("no clinical row for key `{}`", e.row_key);
                    ClinicalRecord::new(e.row_key.clone())
                }
            };
            record.subject_id = e.subject_id.clone();
            load_sample(&e.image, &e.mask, record, window, num_classes)
        })
        .collect()
}
