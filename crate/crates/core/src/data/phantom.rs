//! Synthetic chest phantoms with a known attribute-to-intensity link.
//!
//! Each subject is an elliptic body of soft tissue containing two lung
//! ellipsoids and a cylindrical airway. Lung attenuation rises by
//! `smoker_lung_offset_hu` for subjects recorded as smokers, which gives the
//! counterfactual analysis a ground-truth direction to recover.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derived_rng, write_manifest, write_volume, DataError, DatasetEntry, Volume, VoxelType};
use crate::tabular::{write_records_csv, ClinicalRecord, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub subjects: usize,
    /// `(z, y, x)`.
    pub shape: [usize; 3],
    pub seed: u64,
    pub lung_hu: f64,
    pub smoker_lung_offset_hu: f64,
    pub noise_hu: f64,
    /// Write `.nii.gz` volumes; otherwise the raw + JSON container.
    pub nifti: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            shape: [24, 32, 32],
            seed: 7,
            lung_hu: -850.0,
            smoker_lung_offset_hu: 150.0,
            noise_hu: 20.0,
            nifti: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub record: ClinicalRecord,
    pub image_hu: Array3<f64>,
    pub mask: Array3<u8>,
}

const BODY_HU: f64 = 40.0;
const AIR_HU: f64 = -1000.0;
const AIRWAY_HU: f64 = -950.0;

fn record_for(index: usize, rng: &mut ChaCha8Rng) -> ClinicalRecord {
    let mut r = ClinicalRecord::new(format!("P{index:03}"))
        .with("gender", if rng.random_bool(0.5) { "male" } else { "female" })
        .with("smoker", if index % 2 == 0 { "yes" } else { "no" });
    // Leave some cells empty so the omission path is exercised.
    if index % 5 != 4 {
        r.set("age", Some(&rng.random_range(40..=80).to_string()));
    }
    if index % 3 == 0 {
        r.set("diagnosis", Some("emphysema"));
    }
    r
}

pub fn synthesize_subject(config: &PhantomConfig, index: usize) -> PhantomSubject {
    let mut rng = derived_rng(config.seed, &format!("phantom-{index}"));
    let record = record_for(index, &mut rng);
    let smoker = record.get("smoker") == Some("yes");
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.92..1.08);
    let lung_r = [0.8 * jitter(&mut rng), 0.6 * jitter(&mut rng), 0.3 * jitter(&mut rng)];
    let lung_cx = 0.42 * jitter(&mut rng);
    let lung_hu = config.lung_hu + if smoker { config.smoker_lung_offset_hu } else { 0.0 };
    let noise = Normal::new(0.0, config.noise_hu.max(0.0)).expect("valid deviation");
    let [d, h, w] = config.shape;
    // at least one voxel wide on small grids
    let airway_r = 0.08f64.max(2.0 / h.min(w) as f64);
    let coord = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };

    let mut image = Array3::zeros((d, h, w));
    let mut mask = Array3::zeros((d, h, w));
    for ((z, y, x), v) in image.indexed_iter_mut() {
        let (uz, uy, ux) = (coord(z, d), coord(y, h), coord(x, w));
        let in_lung = |cx: f64| {
            (uz / lung_r[0]).powi(2) + (uy / lung_r[1]).powi(2) + ((ux - cx) / lung_r[2]).powi(2) <= 1.0
        };
        let (label, base) = if uy.powi(2) / 0.81 + ux.powi(2) / 0.9025 > 1.0 {
            (0u8, AIR_HU)
        } else if in_lung(-lung_cx) {
            (1, lung_hu)
        } else if in_lung(lung_cx) {
            (2, lung_hu)
        } else if uz < 0.2 && uy.powi(2) + ux.powi(2) <= airway_r.powi(2) {
            (3, AIRWAY_HU)
        } else {
            (0, BODY_HU)
        };
        mask[[z, y, x]] = label;
        *v = base + noise.sample(&mut rng);
    }
    PhantomSubject {
        record,
        image_hu: image,
        mask,
    }
}

/// Write `subjects` phantoms, `records.csv` and `manifest.jsonl` into `dir`.
/// Returns the manifest path.
pub fn generate_phantom(dir: impl AsRef<Path>, config: &PhantomConfig, schema: &Schema) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| DataError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir.join("volumes")).map_err(io(dir))?;
    let ext = if config.nifti { "nii.gz" } else { "json" };
    let mut records = Vec::with_capacity(config.subjects);
    let mut entries = Vec::with_capacity(config.subjects);
    for i in 0..config.subjects {
        let subject = synthesize_subject(config, i);
        let id = subject.record.subject_id.clone();
        let image = PathBuf::from(format!("volumes/{id}_image.{ext}"));
        let mask = PathBuf::from(format!("volumes/{id}_mask.{ext}"));
        write_volume(dir.join(&image), &Volume::new(subject.image_hu), VoxelType::I16)?;
        write_volume(dir.join(&mask), &Volume::new(subject.mask.mapv(f64::from)), VoxelType::U8)?;
        entries.push(DatasetEntry {
            subject_id: id.clone(),
            image,
            mask,
            row_key: id,
        });
        records.push(subject.record);
    }
    let csv_path = dir.join("records.csv");
    let file = std::fs::File::create(&csv_path).map_err(io(&csv_path))?;
    write_records_csv(file, &records, schema).map_err(|e| DataError::Format {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_has_all_classes_and_smoker_contrast() {
        let cfg = PhantomConfig {
            noise_hu: 0.0,
            ..Default::default()
        };
        let yes = synthesize_subject(&cfg, 0);
        let no = synthesize_subject(&cfg, 1);
        assert_eq!(yes.record.get("smoker"), Some("yes"));
        assert_eq!(no.record.get("smoker"), Some("no"));
        for s in [&yes, &no] {
            for k in 0..4u8 {
                assert!(s.mask.iter().any(|&v| v == k), "class {k} missing");
            }
        }
        let lung_mean = |s: &PhantomSubject| {
            let v: Vec<f64> = s
                .mask
                .iter()
                .zip(s.image_hu.iter())
                .filter(|(m, _)| **m == 1 || **m == 2)
                .map(|(_, v)| *v)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert_eq!(lung_mean(&yes) - lung_mean(&no), 150.0);
    }
}
