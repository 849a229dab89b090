use clinsynth::backbones::{
    DiffusionUNet, DiscriminatorConfig, GeneratorConfig, ImageGenerator, MaskVolume,
    PatchDiscriminator,
};
use clinsynth::fusion::{FeatureMap, FusionSpec};
use clinsynth::nn::ModelError;
use clinsynth::tensor::{Graph, ParamStore};
use clinsynth::embedding::TextEmbedding;
use ndarray::{s, Array4, Array5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, b: usize, n: usize) -> FeatureMap {
    let data = Array4::from_shape_simple_fn((b, n, n, n), || rng.random_range(0..4u8));
    MaskVolume::with_default_classes(data).unwrap().one_hot()
}

fn random_volume(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize, usize)) -> FeatureMap {
    FeatureMap::new(Array5::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))).unwrap()
}

fn emb(rng: &mut ChaCha8Rng, dim: usize) -> TextEmbedding {
    TextEmbedding {
        vector: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        source_text_hash: String::new(),
        encoder_id: "test".into(),
        truncated: false,
    }
}

fn l2(a: &FeatureMap, b: &FeatureMap) -> f64 {
    (a.data() - b.data()).mapv(|v| v * v).sum().sqrt()
}

#[test]
fn unet_shape_finiteness_and_mask_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let net = ImageGenerator::unet(&mut store, &mut rng, "g", &GeneratorConfig::desk_scale()).unwrap();
    let m1 = random_mask(&mut rng, 1, 8);
    let m2 = random_mask(&mut rng, 1, 8);
    let y1 = net.generate(&store, &m1, None).unwrap();
    let y2 = net.generate(&store, &m2, None).unwrap();
    assert_eq!(y1.shape(), [1, 1, 8, 8, 8]);
    assert!(l2(&y1, &y2) > 0.0);
    for _ in 0..10 {
        let m = random_mask(&mut rng, 2, 8);
        let y = net.generate(&store, &m, None).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
    let again = net.generate(&store, &m1, None).unwrap();
    assert_eq!(again, y1, "forward is deterministic");
}

#[test]
fn unet_rejects_indivisible_spatial_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = ImageGenerator::unet(&mut store, &mut rng, "g", &GeneratorConfig::desk_scale()).unwrap();
    let mask = FeatureMap::new(Array5::zeros((1, 4, 8, 6, 8))).unwrap();
    assert!(matches!(net.generate(&store, &mask, None), Err(ModelError::Shape(_))));
}

#[test]
fn output_shape_matches_input_at_several_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let net = ImageGenerator::unet(&mut store, &mut rng, "g", &GeneratorConfig::desk_scale()).unwrap();
    for dims in [(4, 4, 4), (8, 4, 12), (16, 8, 4)] {
        let mask = FeatureMap::new(Array5::zeros((1, 4, dims.0, dims.1, dims.2))).unwrap();
        let y = net.generate(&store, &mask, None).unwrap();
        assert_eq!(y.shape(), [1, 1, dims.0, dims.1, dims.2]);
    }
}

#[test]
fn pix2pix_text_sensitivity_and_ablation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = GeneratorConfig::desk_scale().with_fusion(FusionSpec::cross_attention(vec![2]));
    let net = ImageGenerator::pix2pix(&mut store, &mut rng, "g", &cfg, Some(6)).unwrap();
    let mask = random_mask(&mut rng, 1, 8);
    let a = emb(&mut rng, 6);
    let b = emb(&mut rng, 6);
    let ya = net.generate(&store, &mask, Some(&[a])).unwrap();
    let yb = net.generate(&store, &mask, Some(&[b])).unwrap();
    assert!(l2(&ya, &yb) > 0.0);
    assert!(ya.data().iter().all(|v| v.abs() <= 1.0));

    // Without an embedding the fusion units are skipped: same as a plain
    // pix2pix generator built from the same seed.
    let mut rng2 = ChaCha8Rng::seed_from_u64(4);
    let mut store2 = ParamStore::new();
    let plain = ImageGenerator::pix2pix(&mut store2, &mut rng2, "g", &GeneratorConfig::desk_scale(), None).unwrap();
    assert_eq!(
        net.generate(&store, &mask, None).unwrap(),
        plain.generate(&store2, &mask, None).unwrap()
    );

    let a = emb(&mut rng, 6);
    assert!(matches!(plain.generate(&store2, &mask, Some(&[a])), Err(ModelError::Config(_))));
}

#[test]
fn pix2pix_requires_cross_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = GeneratorConfig::desk_scale().with_fusion(FusionSpec::affine(vec![2]));
    assert!(matches!(
        ImageGenerator::pix2pix(&mut store, &mut rng, "g", &cfg, Some(6)),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn discriminator_grid_equivariance_and_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let cfg = DiscriminatorConfig {
        base_channels: 2,
        downsamplings: 3,
    };
    let d = PatchDiscriminator::new(&mut store, &mut rng, "d", &cfg, 1, 4).unwrap();
    let img = random_volume(&mut rng, (1, 1, 64, 64, 64));
    let mask = random_mask(&mut rng, 1, 64);
    let s = d.score(&store, &img, &mask).unwrap();
    assert_eq!(s.shape(), [1, 1, 8, 8, 8]);
    assert!(s.data().iter().all(|v| v.is_finite()));

    let img = random_volume(&mut rng, (3, 1, 8, 8, 8));
    let mask = random_mask(&mut rng, 3, 8);
    let s = d.score(&store, &img, &mask).unwrap();
    let perm = [2, 0, 1];
    let pi = FeatureMap::new(img.data().select(Axis(0), &perm)).unwrap();
    let pm = FeatureMap::new(mask.data().select(Axis(0), &perm)).unwrap();
    let ps = d.score(&store, &pi, &pm).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(ps.data().slice(s![k, .., .., .., ..]), s.data().slice(s![src, .., .., .., ..]));
    }

    let bad = random_mask(&mut rng, 3, 16);
    assert!(matches!(d.score(&store, &img, &bad), Err(ModelError::Shape(_))));
}

#[test]
fn discriminator_input_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let d = PatchDiscriminator::new(&mut store, &mut rng, "d", &DiscriminatorConfig::desk_scale(), 1, 1).unwrap();
    let a = random_volume(&mut rng, (1, 1, 8, 8, 8));
    let b = random_volume(&mut rng, (1, 1, 8, 8, 8));
    let ab = d.score(&store, &a, &b).unwrap();
    let ba = d.score(&store, &b, &a).unwrap();
    assert!(l2(&ab, &ba) > 0.0);
}

#[test]
fn diffusion_unet_shapes_and_timestep_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let net = DiffusionUNet::new(&mut store, &mut rng, "eps", &GeneratorConfig::desk_scale(), None, 250).unwrap();
    let x = random_volume(&mut rng, (1, 1, 8, 8, 8));
    let mask = random_mask(&mut rng, 1, 8);
    let e0 = net.predict_noise(&store, &x, &mask, 0, None).unwrap();
    let e1 = net.predict_noise(&store, &x, &mask, 249, None).unwrap();
    assert_eq!(e0.shape(), [1, 1, 8, 8, 8]);
    assert!(l2(&e0, &e1) > 0.0);
    assert!(matches!(
        net.predict_noise(&store, &x, &mask, 250, None),
        Err(ModelError::Argument(_))
    ));
}

#[test]
fn diffusion_fusion_at_identity_matches_no_text_bitwise() {
    let build = |fusion: Option<FusionSpec>| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let mut cfg = GeneratorConfig::desk_scale();
        cfg.fusion = fusion;
        let dim = cfg.fusion.as_ref().map(|_| 5);
        let net = DiffusionUNet::new(&mut store, &mut rng, "eps", &cfg, dim, 250).unwrap();
        (net, store)
    };
    let (plain, s_plain) = build(None);
    let (fused, s_fused) = build(Some(FusionSpec::affine(vec![0, 1, 2])));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_volume(&mut rng, (2, 1, 8, 8, 8));
    let mask = random_mask(&mut rng, 2, 8);
    let e = [emb(&mut rng, 5), emb(&mut rng, 5)];
    let a = plain.predict_noise(&s_plain, &x, &mask, 17, None).unwrap();
    let b = fused.predict_noise(&s_fused, &x, &mask, 17, Some(&e)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn diffusion_requires_affine_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let cfg = GeneratorConfig::desk_scale().with_fusion(FusionSpec::cross_attention(vec![1]));
    assert!(matches!(
        DiffusionUNet::new(&mut store, &mut rng, "eps", &cfg, Some(4), 10),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn forward_is_deterministic_with_batch_timesteps() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let net = DiffusionUNet::new(&mut store, &mut rng, "eps", &GeneratorConfig::desk_scale(), None, 50).unwrap();
    let x = random_volume(&mut rng, (2, 1, 4, 4, 4));
    let mask = random_mask(&mut rng, 2, 4);
    let run = || {
        let mut g = Graph::with_params(&store);
        let xv = g.input(x.to_dyn());
        let mv = g.input(mask.to_dyn());
        let y = net.forward(&mut g, xv, mv, &[3, 40], None).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
