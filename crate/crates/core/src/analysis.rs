//! Counterfactual text edits: synthesize the same crop under two versions
//! of a clinical record and measure where the output changes.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array3, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derived_rng, random_crop, write_volume, Crop, CropSpec, DataError, Volume, VolumeSample, VoxelType};
use crate::diffusion::DiffusionError;
use crate::embedding::{EmbedError, EncoderHandle};
use crate::model::{one_hot_batch, SynthesisModel};
use crate::nn::ModelError;
use crate::tabular::{render_record, validate_record, ClinicalRecord, Schema, TabularError, TextDescription};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("slice {index} out of range for depth {depth}")]
    Slice { index: usize, depth: usize },
    #[error("subject {subject}: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<AnalysisError>,
    },
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> AnalysisError {
    AnalysisError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSpec {
    pub attribute: String,
    pub from_value: String,
    pub to_value: String,
    /// Subject ids to analyze; empty means every subject.
    #[serde(default)]
    pub subjects: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl CounterfactualSpec {
    pub fn validate(&self, schema: &Schema) -> Result<(), AnalysisError> {
        let attr = schema
            .get(&self.attribute)
            .ok_or_else(|| AnalysisError::Config(format!("attribute `{}` is not in the schema", self.attribute)))?;
        for v in [&self.from_value, &self.to_value] {
            if !attr.is_valid(v) {
                return Err(AnalysisError::Config(format!(
                    "`{v}` is not a valid value for `{}`",
                    self.attribute
                )));
            }
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            from_value: self.to_value.clone(),
            to_value: self.from_value.clone(),
            ..self.clone()
        }
    }

    pub fn selects(&self, subject_id: &str) -> bool {
        self.subjects.is_empty() || self.subjects.iter().any(|s| s == subject_id)
    }
}

/// Two syntheses of one crop that differ only in the conditioning text.
#[derive(Debug, Clone)]
pub struct CounterfactualPair {
    pub subject_id: String,
    pub crop: Crop,
    pub text_a: TextDescription,
    pub text_b: TextDescription,
    pub vol_a: Array3<f64>,
    pub vol_b: Array3<f64>,
}

fn with_value(record: &ClinicalRecord, attribute: &str, value: &str, schema: &Schema) -> Result<TextDescription, TabularError> {
    let mut r = record.clone();
    r.set(attribute, Some(value));
    Ok(render_record(&validate_record(&r, schema)?, schema))
}

/// Synthesize one lung-covering crop of `sample` under the `from` and `to`
/// versions of its record. Both syntheses consume identical copies of the
/// random stream.
pub fn counterfactual_pair(
    model: &SynthesisModel,
    encoder: &EncoderHandle,
    schema: &Schema,
    sample: &VolumeSample,
    spec: &CounterfactualSpec,
    crop_spec: &CropSpec,
) -> Result<CounterfactualPair, AnalysisError> {
    if !model.uses_text() {
        return Err(AnalysisError::Config("counterfactuals need a text-conditioned model".into()));
    }
    spec.validate(schema)?;
    let id = &sample.record.subject_id;
    let mut crop_rng = derived_rng(spec.seed, &format!("counterfactual-crop/{id}"));
    let crop = random_crop(sample, crop_spec, &mut crop_rng)?;
    let text_a = with_value(&sample.record, &spec.attribute, &spec.from_value, schema)?;
    let text_b = with_value(&sample.record, &spec.attribute, &spec.to_value, schema)?;
    let embeddings = encoder.embed_batch(&[text_a.clone(), text_b.clone()])?;
    let mask = one_hot_batch(&[&crop.mask], &model.meta.class_names)?;
    let rng = derived_rng(spec.seed, &format!("counterfactual/{id}"));
    let synth = |emb: &crate::embedding::TextEmbedding| -> Result<Array3<f64>, AnalysisError> {
        let out = model.synthesize(&mask, Some(std::slice::from_ref(emb)), &mut rng.clone())?;
        Ok(out.into_inner().index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0))
    };
    Ok(CounterfactualPair {
        subject_id: id.clone(),
        vol_a: synth(&embeddings[0])?,
        vol_b: synth(&embeddings[1])?,
        crop,
        text_a,
        text_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub voxels: usize,
    pub mean_delta: f64,
    pub mean_abs_delta: f64,
    pub fraction_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub overall: RegionSummary,
    /// One entry per mask class, in class order.
    pub per_class: Vec<RegionSummary>,
    /// Union of every class whose name contains "lung"; absent when the crop
    /// holds no such voxels.
    pub lung: Option<RegionSummary>,
}

impl DiffSummary {
    pub fn regions(&self) -> impl Iterator<Item = &RegionSummary> {
        std::iter::once(&self.overall).chain(&self.per_class).chain(&self.lung)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMap {
    /// `vol_b − vol_a` in normalized intensity units.
    pub delta: Array3<f64>,
    pub summary: DiffSummary,
}

fn region(name: &str, values: impl Iterator<Item = f64>) -> RegionSummary {
    let (mut n, mut sum, mut abs, mut pos) = (0usize, 0.0, 0.0, 0usize);
    for d in values {
        n += 1;
        sum += d;
        abs += d.abs();
        pos += usize::from(d > 0.0);
    }
    let denom = n.max(1) as f64;
    RegionSummary {
        region: name.to_string(),
        voxels: n,
        mean_delta: sum / denom,
        mean_abs_delta: abs / denom,
        fraction_positive: pos as f64 / denom,
    }
}

/// Summary statistics of `delta` over the whole crop, each class and the
/// lungs.
pub fn summarize(delta: &Array3<f64>, mask: &Array3<u8>, class_names: &[String]) -> DiffSummary {
    let pairs = || delta.iter().copied().zip(mask.iter().copied());
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(k, name)| region(name, pairs().filter(|&(_, m)| m as usize == k).map(|(d, _)| d)))
        .collect();
    let lung_classes: Vec<usize> = class_names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.contains("lung"))
        .map(|(k, _)| k)
        .collect();
    let lung = region(
        "lung",
        pairs().filter(|&(_, m)| lung_classes.contains(&(m as usize))).map(|(d, _)| d),
    );
    DiffSummary {
        overall: region("all", delta.iter().copied()),
        per_class,
        lung: (lung.voxels > 0).then_some(lung),
    }
}

pub fn difference_map(
    vol_a: &Array3<f64>,
    vol_b: &Array3<f64>,
    mask: &Array3<u8>,
    class_names: &[String],
) -> Result<DifferenceMap, AnalysisError> {
    if vol_a.shape() != vol_b.shape() || vol_a.shape() != mask.shape() {
        return Err(AnalysisError::Shape(format!(
            "volumes {:?} and {:?}, mask {:?}",
            vol_a.shape(),
            vol_b.shape(),
            mask.shape()
        )));
    }
    let delta = Zip::from(vol_b).and(vol_a).map_collect(|&b, &a| b - a);
    let summary = summarize(&delta, mask, class_names);
    Ok(DifferenceMap { delta, summary })
}

/// 99th percentile of `|delta|` (nearest rank).
pub fn abs_percentile_99(delta: &Array3<f64>) -> f64 {
    let mut v: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapMode {
    /// Blue for decreases, red for increases.
    Signed,
    /// Magnitude only, in yellow.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapOptions {
    pub slice: usize,
    /// Nearest-neighbour upscaling factor.
    pub scale: u32,
    pub mode: HeatmapMode,
}

/// Width in output pixels of the colorbar strip right of the overlay.
pub const COLORBAR_WIDTH: u32 = 6;

fn gray(v: f64) -> [f64; 3] {
    let g = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0;
    [g, g, g]
}

fn blend(base: [f64; 3], color: [f64; 3], alpha: f64) -> Rgb<u8> {
    Rgb(std::array::from_fn(|i| {
        (base[i] * (1.0 - alpha) + color[i] * alpha).round().clamp(0.0, 255.0) as u8
    }))
}

fn overlay_color(d: f64, range: f64, mode: HeatmapMode) -> ([f64; 3], f64) {
    if range <= 0.0 {
        return ([0.0; 3], 0.0);
    }
    let t = (d / range).clamp(-1.0, 1.0);
    match mode {
        HeatmapMode::Signed if t >= 0.0 => ([255.0, 0.0, 0.0], t),
        HeatmapMode::Signed => ([0.0, 0.0, 255.0], -t),
        HeatmapMode::Absolute => ([255.0, 220.0, 0.0], t.abs()),
    }
}

/// Draw one axial slice of `background` with `delta` overlaid. The color
/// scale spans `±` the 99th percentile of `|delta|` over the whole volume;
/// a strip on the right shows it from `+range` (top) to `−range` (bottom).
pub fn render_heatmap(
    diff: &DifferenceMap,
    background: &Array3<f64>,
    options: HeatmapOptions,
) -> Result<RgbImage, AnalysisError> {
    let [d, h, w]: [usize; 3] = diff.delta.shape().try_into().expect("rank 3");
    if background.shape() != diff.delta.shape() {
        return Err(AnalysisError::Shape("background does not match the difference map".into()));
    }
    if options.slice >= d {
        return Err(AnalysisError::Slice {
            index: options.slice,
            depth: d,
        });
    }
    let s = options.scale.max(1);
    let range = abs_percentile_99(&diff.delta);
    let mut img = RgbImage::new(w as u32 * s + COLORBAR_WIDTH, h as u32 * s);
    for y in 0..h {
        for x in 0..w {
            let (color, alpha) = overlay_color(diff.delta[[options.slice, y, x]], range, options.mode);
            let px = blend(gray(background[[options.slice, y, x]]), color, alpha);
            for dy in 0..s {
                for dx in 0..s {
                    img.put_pixel(x as u32 * s + dx, y as u32 * s + dy, px);
                }
            }
        }
    }
    let rows = img.height();
    for row in 0..rows {
        let t = if rows > 1 { 1.0 - 2.0 * row as f64 / (rows - 1) as f64 } else { 0.0 };
        let (color, alpha) = overlay_color(t * range, range, options.mode);
        let px = blend([128.0; 3], color, alpha);
        for c in 0..COLORBAR_WIDTH {
            img.put_pixel(w as u32 * s + c, row, px);
        }
    }
    Ok(img)
}

pub fn save_heatmap(img: &RgbImage, path: &Path) -> Result<(), AnalysisError> {
    img.save(path).map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceChoice {
    Mid,
    Index(usize),
}

impl std::str::FromStr for SliceChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mid" => Ok(Self::Mid),
            other => other
                .parse()
                .map(Self::Index)
                .map_err(|_| format!("slice must be `mid` or an index, got `{other}`")),
        }
    }
}

impl SliceChoice {
    pub fn resolve(self, depth: usize) -> usize {
        match self {
            Self::Mid => depth / 2,
            Self::Index(i) => i,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub crop: CropSpec,
    pub slices: SliceChoice,
    pub heatmap_scale: u32,
    /// Write delta volumes, heatmaps and the aggregate CSV here.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectAnalysis {
    pub subject_id: String,
    pub crop_offset: [usize; 3],
    pub text_a: String,
    pub text_b: String,
    pub summary: DiffSummary,
}

pub const AGGREGATE_CSV: &str = "aggregate.csv";

/// Counterfactual pairs and difference maps for every selected subject.
pub fn analyze(
    model: &SynthesisModel,
    encoder: &EncoderHandle,
    schema: &Schema,
    samples: &[VolumeSample],
    spec: &CounterfactualSpec,
    options: &AnalysisOptions,
) -> Result<Vec<SubjectAnalysis>, AnalysisError> {
    spec.validate(schema)?;
    if !model.uses_text() {
        return Err(AnalysisError::Config("counterfactuals need a text-conditioned model".into()));
    }
    let selected: Vec<&VolumeSample> = samples.iter().filter(|s| spec.selects(&s.record.subject_id)).collect();
    if selected.is_empty() {
        return Err(AnalysisError::Config("no subject matches the selection".into()));
    }
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let results: Vec<SubjectAnalysis> = selected
        .par_iter()
        .map(|s| {
            analyze_subject(model, encoder, schema, s, spec, options).map_err(|e| AnalysisError::Subject {
                subject: s.record.subject_id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    if let Some(dir) = &options.out_dir {
        write_aggregate(&dir.join(AGGREGATE_CSV), &results)?;
    }
    Ok(results)
}

fn analyze_subject(
    model: &SynthesisModel,
    encoder: &EncoderHandle,
    schema: &Schema,
    sample: &VolumeSample,
    spec: &CounterfactualSpec,
    options: &AnalysisOptions,
) -> Result<SubjectAnalysis, AnalysisError> {
    let pair = counterfactual_pair(model, encoder, schema, sample, spec, &options.crop)?;
    let diff = difference_map(&pair.vol_a, &pair.vol_b, &pair.crop.mask, &model.meta.class_names)?;
    if let Some(dir) = &options.out_dir {
        let id = &pair.subject_id;
        write_volume(
            dir.join(format!("{id}_delta.nii.gz")),
            &Volume::new(diff.delta.clone()),
            VoxelType::F32,
        )?;
        let slice = options.slices.resolve(diff.delta.shape()[0]);
        for mode in [HeatmapMode::Signed, HeatmapMode::Absolute] {
            let img = render_heatmap(
                &diff,
                &pair.vol_a,
                HeatmapOptions {
                    slice,
                    scale: options.heatmap_scale,
                    mode,
                },
            )?;
            let suffix = match mode {
                HeatmapMode::Signed => "signed",
                HeatmapMode::Absolute => "abs",
            };
            save_heatmap(&img, &dir.join(format!("{id}_z{slice}_{suffix}.png")))?;
        }
    }
    Ok(SubjectAnalysis {
        subject_id: pair.subject_id,
        crop_offset: pair.crop.offset,
        text_a: pair.text_a.text,
        text_b: pair.text_b.text,
        summary: diff.summary,
    })
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    subject: &'a str,
    class: &'a str,
    voxels: usize,
    mean_delta: f64,
    mean_abs_delta: f64,
    fraction_positive: f64,
}

pub fn write_aggregate(path: &Path, results: &[SubjectAnalysis]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    for r in results {
        for reg in r.summary.regions() {
            w.serialize(AggregateRow {
                subject: &r.subject_id,
                class: &reg.region,
                voxels: reg.voxels,
                mean_delta: reg.mean_delta,
                mean_abs_delta: reg.mean_abs_delta,
                fraction_positive: reg.fraction_positive,
            })
            .map_err(|e| io_error(path, e))?;
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}
