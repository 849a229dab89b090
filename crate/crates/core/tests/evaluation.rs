use clinsynth::data::{synthesize_subject, CropSpec, IntensityWindow, PhantomConfig, VolumeSample};
use clinsynth::evaluation::{
    evaluate_model, extract_features, fid, inception_score, kid, kid_kernel, score_crops, EvalError, EvalProtocol,
    FeatureSet, MetricReport, SliceExtractor, StatsExtractor,
};
use clinsynth::model::{default_class_names, ModelMeta, SynthesisModel};
use clinsynth::tabular::Schema;
use clinsynth::training::{Backbone, TrainConfig};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_set(rows: usize, cols: usize, seed: u64, shift: f64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Array2::from_shape_simple_fn((rows, cols), || shift + rng.sample::<f64, _>(StandardNormal));
    FeatureSet::new(a, "test").unwrap()
}

fn column(values: &[f64]) -> FeatureSet {
    FeatureSet::new(Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap(), "test").unwrap()
}

#[test]
fn stats_features_of_a_constant_crop() {
    let crop = Array3::from_elem((4, 4, 4), 0.3);
    let (f, p) = extract_features(&[crop.clone(), crop], &StatsExtractor::default()).unwrap();
    // 0.3 falls in bin floor((0.3 + 1) / 0.25) = 5 of 8.
    let mut expected = vec![0.3, 0.0];
    let mut hist = vec![0.0; 8];
    hist[5] = 1.0;
    expected.extend(&hist);
    for r in 0..2 {
        assert_eq!(f.features().row(r).to_vec(), expected);
        assert_eq!(p.row(r).to_vec(), hist);
    }
}

#[test]
fn one_row_per_crop_and_uniform_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let crops: Vec<Array3<f64>> = (0..5)
        .map(|_| Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(-1.0..1.0)))
        .collect();
    let (f, _) = extract_features(&crops, &StatsExtractor::default()).unwrap();
    assert_eq!(f.len(), 5);
    let mut bad = crops.clone();
    bad.push(Array3::zeros((4, 4, 5)));
    assert!(matches!(
        extract_features(&bad, &StatsExtractor::default()),
        Err(EvalError::NonUniform { .. })
    ));
}

#[test]
fn slice_extractor_mean_pools_over_axial_slices() {
    let script = r#"
import json, sys
for line in sys.stdin:
    r = json.loads(line)
    d = r["data"]
    m = sum(d) / len(d)
    print(json.dumps({"features": [m, float(r["height"] * r["width"])], "probabilities": [0.25, 0.75]}), flush=True)
"#;
    let ex = SliceExtractor {
        command: vec!["python3".into(), "-c".into(), script.into()],
        extractor_id: "mean-slice".into(),
    };
    let crop = Array3::from_shape_fn((3, 2, 4), |(z, _, _)| z as f64 * 0.5);
    let (f, p) = extract_features(&[crop], &ex).unwrap();
    assert!((f.features()[[0, 0]] - 0.5).abs() < 1e-12);
    assert_eq!(f.features()[[0, 1]], 8.0);
    assert_eq!(p.row(0).to_vec(), vec![0.25, 0.75]);

    let broken = SliceExtractor {
        command: vec!["definitely-not-a-program".into()],
        extractor_id: "x".into(),
    };
    assert!(matches!(
        extract_features(&[Array3::zeros((2, 2, 2))], &broken),
        Err(EvalError::Extractor(_))
    ));
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    let a = random_set(60, 6, 3, 0.0);
    assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
}

fn sample_mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn one_dimensional_fid_matches_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..150).map(|_| 1.0 + 1.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let (m1, s1) = sample_mean_sd(&a);
    let (m2, s2) = sample_mean_sd(&b);
    let expected = (m1 - m2).powi(2) + (s1 - s2).powi(2);
    assert!((fid(&column(&a), &column(&b)).unwrap() - expected).abs() < 1e-8);

    // Standardized to sample mean 0 / 1 and unit sample deviation: distance exactly 1.
    let std = |v: &[f64], shift: f64| {
        let (m, s) = sample_mean_sd(v);
        v.iter().map(|x| (x - m) / s + shift).collect::<Vec<_>>()
    };
    let d = fid(&column(&std(&a, 0.0)), &column(&std(&b, 1.0))).unwrap();
    assert!((d - 1.0).abs() < 1e-8, "{d}");
}

#[test]
fn fid_is_symmetric_and_rejects_tiny_sets() {
    let a = random_set(40, 5, 1, 0.0);
    let b = random_set(30, 5, 2, 0.5);
    assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    assert!(fid(&a, &b).unwrap() > 0.0);
    assert!(matches!(fid(&column(&[1.0]), &column(&[1.0, 2.0])), Err(EvalError::TooFew { .. })));
    assert!(matches!(fid(&a, &random_set(30, 4, 2, 0.0)), Err(EvalError::Dimension(5, 4))));
}

#[test]
fn fid_handles_rank_deficient_covariances() {
    // Fewer rows than features: singular covariances.
    let a = random_set(3, 8, 4, 0.0);
    let b = random_set(3, 8, 5, 0.0);
    let d = fid(&a, &b).unwrap();
    assert!(d.is_finite() && d > 0.0);
}

/// MMD² by explicit double loops over all ordered pairs i ≠ j.
fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let f = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / f + 1.0).powi(3);
    let m = x.len();
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            s += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
        }
    }
    s / (m * (m - 1)) as f64
}

fn rows(s: &FeatureSet) -> Vec<Vec<f64>> {
    s.features().rows().into_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn kid_hand_case() {
    // h = k(1,2) + k(3,4) - k(1,4) - k(2,3) = 3³ + 13³ - 5³ - 7³.
    let (mean, std) = kid(&column(&[1.0, 2.0]), &column(&[3.0, 4.0]), 1, 2, 0).unwrap();
    assert_eq!(mean, 1756.0);
    assert_eq!(std, 0.0);
    assert_eq!(kid_kernel(&[1.0], &[2.0]), 27.0);
}

#[test]
fn kid_of_a_set_with_itself_is_zero() {
    let a = random_set(12, 4, 6, 0.0);
    let (mean, _) = kid(&a, &a, 1, 12, 3).unwrap();
    assert!(mean.abs() <= 1e-6);
}

#[test]
fn kid_is_seeded_and_validates_subsets() {
    let a = random_set(20, 3, 1, 0.0);
    let b = random_set(25, 3, 2, 0.3);
    assert_eq!(kid(&a, &b, 10, 8, 5).unwrap(), kid(&a, &b, 10, 8, 5).unwrap());
    assert_ne!(kid(&a, &b, 10, 8, 5).unwrap(), kid(&a, &b, 10, 8, 6).unwrap());
    assert!(matches!(kid(&a, &b, 10, 1, 5), Err(EvalError::TooFew { .. })));
    assert!(matches!(kid(&a, &b, 10, 21, 5), Err(EvalError::Argument(_))));
}

proptest! {
    #[test]
    fn kid_equals_the_double_loop(n in 2usize..=16, f in 1usize..5, seed in any::<u64>()) {
        let a = random_set(n, f, seed, 0.0);
        let b = random_set(n, f, seed ^ 0xabc, 0.7);
        let (mean, _) = kid(&a, &b, 1, n, 0).unwrap();
        let oracle = brute_mmd(&rows(&a), &rows(&b));
        prop_assert!((mean - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }

    #[test]
    fn inception_score_is_bounded_by_the_class_count(n in 1usize..40, c in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array2::from_shape_simple_fn((n, c), || rng.random_range(0.0..1.0) + 1e-3);
        for mut r in p.rows_mut() {
            let s = r.sum();
            r.mapv_inplace(|v| v / s);
        }
        let (is, _) = inception_score(&p, 1).unwrap();
        prop_assert!(is >= 1.0 - 1e-9 && is <= c as f64 + 1e-9);
    }
}

#[test]
fn inception_score_closed_forms() {
    let same = Array2::from_shape_fn((12, 3), |(_, j)| [0.2, 0.5, 0.3][j]);
    assert!((inception_score(&same, 4).unwrap().0 - 1.0).abs() < 1e-12);

    let c = 7;
    let eye = Array2::from_shape_fn((c, c), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let (is, std) = inception_score(&eye, 1).unwrap();
    assert!((is - c as f64).abs() < 1e-12);
    assert_eq!(std, 0.0);

    // Ten folds holding the same three one-hot rows: all fold scores equal.
    let cyc = Array2::from_shape_fn((30, 3), |(i, j)| if i % 3 == j { 1.0 } else { 0.0 });
    let (is, std) = inception_score(&cyc, 10).unwrap();
    assert!((is - 3.0).abs() < 1e-12);
    assert_eq!(std, 0.0);

    let bad = Array2::from_elem((2, 2), 0.4);
    assert!(matches!(inception_score(&bad, 1), Err(EvalError::NotNormalized { row: 0, .. })));
    assert!(inception_score(&eye, 8).is_err());
}

fn phantom_samples(n: usize) -> Vec<VolumeSample> {
    let cfg = PhantomConfig {
        subjects: n,
        shape: [16, 16, 16],
        ..Default::default()
    };
    let w = IntensityWindow::default();
    (0..n)
        .map(|i| {
            let s = synthesize_subject(&cfg, i);
            VolumeSample {
                image: s.image_hu.mapv(|v| w.normalize(v)),
                mask: s.mask,
                record: s.record,
                spacing: [1.0; 3],
            }
        })
        .collect()
}

fn untrained(backbone: Backbone) -> SynthesisModel {
    let config = TrainConfig {
        crop: CropSpec::with_lung_coverage([8, 8, 8]),
        diffusion: clinsynth::diffusion::DiffusionConfig {
            timesteps: 10,
            ..Default::default()
        },
        ..TrainConfig::desk_scale(backbone)
    };
    SynthesisModel::build(ModelMeta {
        config,
        class_names: default_class_names(4),
        embed_dim: None,
        encoder: None,
    })
    .unwrap()
}

fn protocol() -> EvalProtocol {
    EvalProtocol {
        crop: CropSpec::with_lung_coverage([8, 8, 8]),
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn evaluation_protocol_counts_and_determinism() {
    let samples = phantom_samples(2);
    for backbone in [Backbone::Pix2pix, Backbone::Ddpm] {
        let model = untrained(backbone);
        let ex = StatsExtractor::default();
        let report = evaluate_model(&model, &samples, None, &Schema::default(), &protocol(), &ex).unwrap();
        assert_eq!((report.n_real, report.n_fake), (10, 10));
        assert!(report.fid.is_finite() && report.kid_mean.is_finite() && report.is_mean >= 1.0 - 1e-9);
        let again = evaluate_model(&model, &samples, None, &Schema::default(), &protocol(), &ex).unwrap();
        assert_eq!(report, again);

        let text = report.to_toml();
        assert_eq!(MetricReport::from_toml(&text).unwrap(), report);
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}

#[test]
fn identical_crop_sets_score_zero_distance() {
    let samples = phantom_samples(2);
    let model = untrained(Backbone::Pix2pix);
    let p = protocol();
    let crops: Vec<Array3<f64>> = samples
        .iter()
        .flat_map(|s| clinsynth::data::eval_crops(s, &p.crop, p.seed, 5).unwrap())
        .map(|c| c.image)
        .collect();
    let report = score_crops(&crops, &crops, &StatsExtractor::default(), &p, &model).unwrap();
    assert!(report.fid.abs() < 1e-6, "{}", report.fid);
    assert!(report.kid_mean.abs() < 1e-6);
}

#[test]
fn text_models_need_an_encoder_for_evaluation() {
    let samples = phantom_samples(1);
    let mut config = untrained(Backbone::Pix2pix).meta.config;
    config.use_text = true;
    let model = SynthesisModel::build(ModelMeta {
        config,
        class_names: default_class_names(4),
        embed_dim: Some(8),
        encoder: None,
    })
    .unwrap();
    let r = evaluate_model(&model, &samples, None, &Schema::default(), &protocol(), &StatsExtractor::default());
    assert!(matches!(r, Err(EvalError::Argument(_))));
}
