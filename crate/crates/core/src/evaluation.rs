//! Patch-level FID, KID and Inception Score between real and synthetic crops.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derived_rng, eval_crops, CropSpec, DataError, VolumeSample};
use crate::diffusion::DiffusionError;
use crate::embedding::{EmbedError, EncoderHandle};
use crate::model::{one_hot_batch, SynthesisModel};
use crate::nn::ModelError;
use crate::tabular::{render_record, validate_record, Schema, TabularError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("crops have differing shapes {first:?} and {other:?}")]
    NonUniform { first: Vec<usize>, other: Vec<usize> },
    #[error("need at least {need} rows, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("non-finite feature values")]
    NonFinite,
    #[error("row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("covariance square root failed even with regularization")]
    SqrtFailed,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("feature extractor: {0}")]
    Extractor(String),
    #[error("subject {subject}: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// One feature row per crop.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Array2<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, extractor_id: impl Into<String>) -> Result<Self, EvalError> {
        if !features.iter().all(|v| v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(Self {
            features,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Features plus class probabilities for one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CropFeatures {
    pub features: Vec<f64>,
    pub probabilities: Vec<f64>,
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;

    fn extract(&self, crop: &Array3<f64>) -> Result<CropFeatures, EvalError>;
}

/// Mean, variance and a normalized intensity histogram of a crop. The
/// histogram doubles as the class distribution for the Inception Score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsExtractor {
    pub bins: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for StatsExtractor {
    fn default() -> Self {
        Self {
            bins: 8,
            lower: -1.0,
            upper: 1.0,
        }
    }
}

impl StatsExtractor {
    pub fn histogram(&self, values: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut counts = vec![0.0; self.bins];
        let mut n = 0usize;
        let width = (self.upper - self.lower) / self.bins as f64;
        for v in values {
            let b = ((v - self.lower) / width).floor().clamp(0.0, (self.bins - 1) as f64) as usize;
            counts[b] += 1.0;
            n += 1;
        }
        counts.iter_mut().for_each(|c| *c /= n.max(1) as f64);
        counts
    }
}

impl FeatureExtractor for StatsExtractor {
    fn id(&self) -> String {
        format!("stats-hist{}", self.bins)
    }

    fn extract(&self, crop: &Array3<f64>) -> Result<CropFeatures, EvalError> {
        if crop.is_empty() {
            return Err(EvalError::Argument("empty crop".into()));
        }
        let n = crop.len() as f64;
        let mean = crop.sum() / n;
        let var = crop.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let hist = self.histogram(crop.iter().copied());
        let mut features = vec![mean, var];
        features.extend(&hist);
        Ok(CropFeatures {
            features,
            probabilities: hist,
        })
    }
}

/// Runs an external 2D classifier on every axial slice and mean-pools its
/// per-slice outputs over the slices of the crop.
///
/// The program reads one JSON object per line, `{"height", "width", "data"}`
/// with row-major intensities in `[-1, 1]`, and answers each with
/// `{"features": [...], "probabilities": [...]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceExtractor {
    pub command: Vec<String>,
    pub extractor_id: String,
}

#[derive(Serialize)]
struct SliceRequest<'a> {
    height: usize,
    width: usize,
    data: &'a [f64],
}

#[derive(Deserialize)]
struct SliceResponse {
    features: Vec<f64>,
    probabilities: Vec<f64>,
}

impl FeatureExtractor for SliceExtractor {
    fn id(&self) -> String {
        self.extractor_id.clone()
    }

    fn extract(&self, crop: &Array3<f64>) -> Result<CropFeatures, EvalError> {
        let fail = |m: String| EvalError::Extractor(format!("{}: {m}", self.extractor_id));
        let (program, args) = self.command.split_first().ok_or_else(|| fail("no command configured".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let (h, w) = (crop.shape()[1], crop.shape()[2]);
        let mut stdin = child.stdin.take().expect("piped stdin");
        let requests: Vec<String> = crop
            .axis_iter(Axis(0))
            .map(|slice| {
                let data: Vec<f64> = slice.iter().copied().collect();
                serde_json::to_string(&SliceRequest {
                    height: h,
                    width: w,
                    data: &data,
                })
                .expect("request serializes")
            })
            .collect();
        // Feed stdin from its own thread so a chatty child cannot block on a full stdout pipe.
        let writer = std::thread::spawn(move || -> std::io::Result<()> {
            for line in requests {
                writeln!(stdin, "{line}")?;
            }
            Ok(())
        });
        let stdout = child.stdout.take().expect("piped stdout");
        let mut sum: Option<CropFeatures> = None;
        let mut slices = 0usize;
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| fail(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SliceResponse = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            match &mut sum {
                None => {
                    sum = Some(CropFeatures {
                        features: r.features,
                        probabilities: r.probabilities,
                    })
                }
                Some(acc) => {
                    if acc.features.len() != r.features.len() || acc.probabilities.len() != r.probabilities.len() {
                        return Err(fail("inconsistent output lengths across slices".into()));
                    }
                    acc.features.iter_mut().zip(&r.features).for_each(|(a, b)| *a += b);
                    acc.probabilities.iter_mut().zip(&r.probabilities).for_each(|(a, b)| *a += b);
                }
            }
            slices += 1;
        }
        writer
            .join()
            .map_err(|_| fail("stdin writer panicked".into()))?
            .map_err(|e| fail(e.to_string()))?;
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        if slices != crop.shape()[0] {
            return Err(fail(format!("answered {slices} of {} slices", crop.shape()[0])));
        }
        let mut out = sum.expect("at least one slice");
        let n = slices as f64;
        out.features.iter_mut().for_each(|v| *v /= n);
        out.probabilities.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

/// Features and class probabilities for every crop, in input order.
pub fn extract_features(
    crops: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
) -> Result<(FeatureSet, Array2<f64>), EvalError> {
    let first = crops.first().ok_or(EvalError::TooFew { need: 1, got: 0 })?;
    if let Some(other) = crops.iter().find(|c| c.shape() != first.shape()) {
        return Err(EvalError::NonUniform {
            first: first.shape().to_vec(),
            other: other.shape().to_vec(),
        });
    }
    let rows: Vec<CropFeatures> = crops.par_iter().map(|c| extractor.extract(c)).collect::<Result<_, _>>()?;
    let to_matrix = |get: fn(&CropFeatures) -> &Vec<f64>| -> Result<Array2<f64>, EvalError> {
        let width = get(&rows[0]).len();
        if let Some(r) = rows.iter().find(|r| get(r).len() != width) {
            return Err(EvalError::Dimension(width, get(r).len()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| get(r).iter().copied()).collect();
        Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("rectangular"))
    };
    let features = FeatureSet::new(to_matrix(|r| &r.features)?, extractor.id())?;
    Ok((features, to_matrix(|r| &r.probabilities)?))
}

fn moments(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = DMatrix::zeros(f, f);
    for row in x.rows() {
        for i in 0..f {
            let di = row[i] - mean[i];
            for j in i..f {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..f {
        for j in i..f {
            cov[(i, j)] /= (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (DVector::from_iterator(f, mean.iter().copied()), cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if !eig.eigenvalues.iter().all(|v| v.is_finite()) {
        return None;
    }
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-6 * scale) {
        return None;
    }
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Some(&eig.eigenvectors * roots * eig.eigenvectors.transpose())
}

/// `Tr((Σ₁Σ₂)^{1/2})` through the symmetric form `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let r1 = psd_sqrt(s1)?;
    let m = &r1 * s2 * &r1;
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if !eig.eigenvalues.iter().all(|v| v.is_finite()) {
        return None;
    }
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-6 * scale) {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

const FID_EPS: f64 = 1e-6;

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::Dimension(a.dim(), b.dim()));
    }
    for s in [a, b] {
        if s.len() < 2 {
            return Err(EvalError::TooFew { need: 2, got: s.len() });
        }
    }
    let (m1, s1) = moments(&a.features);
    let (m2, s2) = moments(&b.features);
    let tr = match trace_sqrt_product(&s1, &s2) {
        Some(t) => t,
        None => {
            log::warn!("covariance square root failed; retrying with {FID_EPS}·I added");
            let reg = DMatrix::identity(a.dim(), a.dim()) * FID_EPS;
            trace_sqrt_product(&(&s1 + &reg), &(&s2 + &reg)).ok_or(EvalError::SqrtFailed)?
        }
    };
    Ok((m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr)
}

/// Polynomial kernel `(xᵀy / F + 1)³`.
pub fn kid_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² between equally sized sets, pairing `x_i` with `y_i`:
/// the mean over `i ≠ j` of `k(x_i,x_j) + k(y_i,y_j) − k(x_i,y_j) − k(x_j,y_i)`.
pub fn mmd2_unbiased(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, EvalError> {
    let m = x.nrows();
    if y.nrows() != m {
        return Err(EvalError::Argument(format!("sets of {m} and {} rows", y.nrows())));
    }
    if m < 2 {
        return Err(EvalError::TooFew { need: 2, got: m });
    }
    let row = |a: &Array2<f64>, i: usize| a.row(i).to_vec();
    let xs: Vec<Vec<f64>> = (0..m).map(|i| row(x, i)).collect();
    let ys: Vec<Vec<f64>> = (0..m).map(|i| row(y, i)).collect();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += kid_kernel(&xs[i], &xs[j]) + kid_kernel(&ys[i], &ys[j])
                    - kid_kernel(&xs[i], &ys[j])
                    - kid_kernel(&xs[j], &ys[i]);
            }
        }
    }
    Ok(total / (m * (m - 1)) as f64)
}

/// Mean and standard deviation of the MMD² over `subsets` seeded draws of
/// `subset_size` rows from each set.
pub fn kid(a: &FeatureSet, b: &FeatureSet, subsets: usize, subset_size: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::Dimension(a.dim(), b.dim()));
    }
    if subset_size < 2 {
        return Err(EvalError::TooFew {
            need: 2,
            got: subset_size,
        });
    }
    if subset_size > a.len().min(b.len()) {
        return Err(EvalError::Argument(format!(
            "subset size {subset_size} exceeds set sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    if subsets == 0 {
        return Err(EvalError::Argument("subsets must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(subsets);
    for _ in 0..subsets {
        let mut ia = sample_indices(&mut rng, a.len(), subset_size).into_vec();
        let mut ib = sample_indices(&mut rng, b.len(), subset_size).into_vec();
        ia.sort_unstable();
        ib.sort_unstable();
        values.push(mmd2_unbiased(&a.features.select(Axis(0), &ia), &b.features.select(Axis(0), &ib))?);
    }
    Ok(mean_std(&values))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` over contiguous folds of the rows.
pub fn inception_score(probs: &Array2<f64>, folds: usize) -> Result<(f64, f64), EvalError> {
    let n = probs.nrows();
    if folds == 0 || folds > n {
        return Err(EvalError::Argument(format!("{folds} folds for {n} rows")));
    }
    for (row, r) in probs.rows().into_iter().enumerate() {
        let sum = r.sum();
        if (sum - 1.0).abs() > 1e-5 || r.iter().any(|&p| !(p >= 0.0)) {
            return Err(EvalError::NotNormalized { row, sum });
        }
    }
    let scores: Vec<f64> = (0..folds)
        .map(|k| {
            let part = probs.slice(ndarray::s![k * n / folds..(k + 1) * n / folds, ..]);
            let marginal = part.mean_axis(Axis(0)).expect("non-empty fold");
            let kl: f64 = part
                .rows()
                .into_iter()
                .map(|r| {
                    r.iter()
                        .zip(&marginal)
                        .filter(|(&p, _)| p > 0.0)
                        .map(|(&p, &q)| p * (p / q).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.nrows() as f64;
            kl.exp()
        })
        .collect();
    Ok(mean_std(&scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub crops_per_subject: usize,
    pub crop: CropSpec,
    pub seed: u64,
    pub kid_subsets: usize,
    /// Clamped to the number of crops when larger.
    pub kid_subset_size: usize,
    /// Clamped to the number of crops when larger.
    pub is_folds: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            crops_per_subject: 5,
            crop: CropSpec::paper_scale(),
            seed: 0,
            kid_subsets: 100,
            kid_subset_size: 1000,
            is_folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor_id: String,
    pub backbone: String,
    pub use_text: bool,
    pub checkpoint: Option<String>,
    pub protocol: EvalProtocol,
}

impl MetricReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub const CSV_HEADER: [&'static str; 11] = [
        "backbone",
        "use_text",
        "fid",
        "kid_mean",
        "kid_std",
        "is_mean",
        "is_std",
        "n_real",
        "n_fake",
        "extractor_id",
        "seed",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.backbone.clone(),
            self.use_text.to_string(),
            self.fid.to_string(),
            self.kid_mean.to_string(),
            self.kid_std.to_string(),
            self.is_mean.to_string(),
            self.is_std.to_string(),
            self.n_real.to_string(),
            self.n_fake.to_string(),
            self.extractor_id.clone(),
            self.protocol.seed.to_string(),
        ]
    }

    /// Write `report.toml` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path, e: &dyn std::fmt::Display| EvalError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let toml_path = dir.join("report.toml");
        std::fs::write(&toml_path, self.to_toml()).map_err(|e| io(&toml_path, &e))?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io(&csv_path, &e))?;
        w.write_record(Self::CSV_HEADER).map_err(|e| io(&csv_path, &e))?;
        w.write_record(self.csv_row()).map_err(|e| io(&csv_path, &e))?;
        w.flush().map_err(|e| io(&csv_path, &e))
    }
}

/// Real and synthetic crops at identical coordinates.
#[derive(Debug, Clone)]
pub struct PairedCrops {
    pub subject_ids: Vec<String>,
    pub real: Vec<Array3<f64>>,
    pub fake: Vec<Array3<f64>>,
}

fn in_subject<T>(subject: &str, r: Result<T, impl Into<EvalError>>) -> Result<T, EvalError> {
    r.map_err(|e| EvalError::Subject {
        subject: subject.to_string(),
        source: Box::new(e.into()),
    })
}

/// Draw `crops_per_subject` crops per subject from a stream seeded by the
/// protocol seed and subject id, and synthesize each from its mask crop.
pub fn paired_crops(
    model: &SynthesisModel,
    samples: &[VolumeSample],
    encoder: Option<&EncoderHandle>,
    schema: &Schema,
    protocol: &EvalProtocol,
) -> Result<PairedCrops, EvalError> {
    if model.uses_text() && encoder.is_none() {
        return Err(EvalError::Argument("the model uses text but no encoder was given".into()));
    }
    let mut out = PairedCrops {
        subject_ids: Vec::new(),
        real: Vec::new(),
        fake: Vec::new(),
    };
    for s in samples {
        let id = &s.record.subject_id;
        let crops = in_subject(id, eval_crops(s, &protocol.crop, protocol.seed, protocol.crops_per_subject))?;
        let embedding = match encoder.filter(|_| model.uses_text()) {
            Some(enc) => {
                let record = in_subject(id, validate_record(&s.record, schema))?;
                Some(vec![in_subject(id, enc.embed(&render_record(&record, schema)))?])
            }
            None => None,
        };
        let mut rng = derived_rng(protocol.seed, &format!("synthesize/{id}"));
        for c in crops {
            let mask = in_subject(id, one_hot_batch(&[&c.mask], &model.meta.class_names))?;
            let fake = in_subject(id, model.synthesize(&mask, embedding.as_deref(), &mut rng))?;
            let fake = fake.into_inner().index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0);
            out.subject_ids.push(id.clone());
            out.real.push(c.image);
            out.fake.push(fake);
        }
    }
    Ok(out)
}

/// Synthesize paired crops for every test subject and score them.
pub fn evaluate_model(
    model: &SynthesisModel,
    samples: &[VolumeSample],
    encoder: Option<&EncoderHandle>,
    schema: &Schema,
    protocol: &EvalProtocol,
    extractor: &dyn FeatureExtractor,
) -> Result<MetricReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    let pairs = paired_crops(model, samples, encoder, schema, protocol)?;
    score_crops(&pairs.real, &pairs.fake, extractor, protocol, model)
}

/// Metrics for already-paired crops.
pub fn score_crops(
    real: &[Array3<f64>],
    fake: &[Array3<f64>],
    extractor: &dyn FeatureExtractor,
    protocol: &EvalProtocol,
    model: &SynthesisModel,
) -> Result<MetricReport, EvalError> {
    let (real_f, _) = extract_features(real, extractor)?;
    let (fake_f, fake_p) = extract_features(fake, extractor)?;
    let fid = fid(&real_f, &fake_f)?;
    let subset = protocol.kid_subset_size.min(real_f.len()).min(fake_f.len());
    let (kid_mean, kid_std) = kid(&real_f, &fake_f, protocol.kid_subsets, subset, protocol.seed)?;
    let (is_mean, is_std) = inception_score(&fake_p, protocol.is_folds.min(fake_f.len()))?;
    Ok(MetricReport {
        fid,
        kid_mean,
        kid_std,
        is_mean,
        is_std,
        n_real: real_f.len(),
        n_fake: fake_f.len(),
        extractor_id: extractor.id(),
        backbone: model.config().backbone.to_string(),
        use_text: model.uses_text(),
        checkpoint: None,
        protocol: protocol.clone(),
    })
}
