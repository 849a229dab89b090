use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clinsynth::analysis::{self, AnalysisOptions, CounterfactualSpec, SliceChoice};
use clinsynth::checkpoint::Checkpoint;
use clinsynth::data::{
    derived_rng, generate_phantom, load_dataset, random_crop, write_volume, Volume, VolumeSample, VoxelType,
};
use clinsynth::embedding::EncoderHandle;
use clinsynth::evaluation::{evaluate_model, EvalProtocol, FeatureExtractor, SliceExtractor, StatsExtractor};
use clinsynth::model::{default_class_names, one_hot_batch, SynthesisModel};
use clinsynth::tabular::{load_records_csv, render_record, render_table, validate_record, write_text_outputs, Schema};
use clinsynth::training::{Trainer, TrainOptions};
use ndarray::Axis;

use crate::config::RunConfig;
use crate::{AnalyzeArgs, ConvertArgs, DatasetArgs, EvaluateArgs, PhantomArgs, SynthesizeArgs, TrainArgs};

fn schema(config: &RunConfig) -> Result<Schema> {
    match &config.tabular.schema {
        Some(p) => Schema::load(p).with_context(|| format!("loading schema {}", p.display())),
        None => Ok(Schema::default()),
    }
}

fn dataset(config: &RunConfig, args: &DatasetArgs, schema: &Schema) -> Result<Vec<VolumeSample>> {
    let sibling = args.manifest.parent().unwrap_or(Path::new(".")).join("records.csv");
    let records_path = config.data.records.clone().or_else(|| sibling.exists().then_some(sibling));
    let records = match &records_path {
        Some(p) => load_records_csv(p, schema, config.tabular.strict)
            .with_context(|| format!("reading records {}", p.display()))?,
        None => {
            log::warn!("no records CSV; every subject is described by the fallback text");
            Vec::new()
        }
    };
    let samples = load_dataset(&args.manifest, &records, &config.data.window, config.data.num_classes)
        .with_context(|| format!("loading dataset {}", args.manifest.display()))?;
    if samples.is_empty() {
        bail!("manifest {} lists no subjects", args.manifest.display());
    }
    Ok(samples)
}

fn load_model(path: &Path) -> Result<(SynthesisModel, Option<EncoderHandle>)> {
    let ckpt = Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let model = SynthesisModel::from_checkpoint(&ckpt).with_context(|| format!("loading {}", path.display()))?;
    let encoder = match (&model.meta.encoder, model.uses_text()) {
        (Some(cfg), true) => Some(EncoderHandle::open(cfg.clone()).context("opening the text encoder")?),
        (None, true) => bail!("{} uses text but records no encoder", path.display()),
        _ => None,
    };
    Ok((model, encoder))
}

pub fn phantom(config: &RunConfig, args: &PhantomArgs) -> Result<()> {
    let schema = schema(config)?;
    let manifest = generate_phantom(&args.out, &config.phantom, &schema)
        .with_context(|| format!("writing phantom to {}", args.out.display()))?;
    config.write_echo(&args.out, "phantom", config.phantom.seed)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn convert(config: &RunConfig, args: &ConvertArgs) -> Result<()> {
    let schema = schema(config)?;
    let records = load_records_csv(&args.csv, &schema, config.tabular.strict)
        .with_context(|| format!("reading {}", args.csv.display()))?;
    let texts = render_table(&records, &schema)?;
    let manifest = args.manifest_out.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    write_text_outputs(&args.out, &manifest, &records, &texts, &schema)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} descriptions -> {}", texts.len(), args.out.display());
    Ok(())
}

pub fn train(config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let schema = schema(config)?;
    let samples = dataset(config, &args.data, &schema)?;
    let options = TrainOptions {
        run_dir: Some(args.out.clone()),
        schema,
        class_names: default_class_names(config.data.num_classes),
        stop_after_epoch: None,
        echo_progress: true,
    };
    let mut effective = config.clone();
    if let Some(ckpt) = &args.resume {
        let saved = Checkpoint::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
        let model = SynthesisModel::from_checkpoint(&saved)?;
        effective.train = model.config().clone();
        if let Some(enc) = &model.meta.encoder {
            effective.encoder = enc.clone();
        }
    }
    let encoder = effective
        .train
        .use_text
        .then(|| EncoderHandle::open(effective.encoder.clone()))
        .transpose()
        .context("opening the text encoder")?;
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(ckpt, &samples, encoder.as_ref(), options)?,
        None => Trainer::new(effective.train.clone(), &samples, encoder.as_ref(), options)?,
    };
    effective.write_echo(&args.out, "train", effective.train.seed)?;
    let path = trainer.run()?;
    if let Some(p) = path {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

pub fn synthesize(config: &RunConfig, args: &SynthesizeArgs) -> Result<()> {
    let schema = schema(config)?;
    let samples = dataset(config, &args.data, &schema)?;
    let (model, encoder) = load_model(&args.checkpoint)?;
    let seed = config.synthesize.seed;
    config.write_echo(&args.out, "synthesize", seed)?;
    let crop_spec = &model.config().crop;
    let window = &config.data.window;
    for sample in &samples {
        let id = &sample.record.subject_id;
        if !config.synthesize.subjects.is_empty() && !config.synthesize.subjects.contains(id) {
            continue;
        }
        let crop = random_crop(sample, crop_spec, &mut derived_rng(seed, &format!("synthesize-crop/{id}")))?;
        let mask = one_hot_batch(&[&crop.mask], &model.meta.class_names)?;
        let embedding = match &encoder {
            Some(enc) => Some(vec![enc.embed(&render_record(&validate_record(&sample.record, &schema)?, &schema))?]),
            None => None,
        };
        let fake = model
            .synthesize(&mask, embedding.as_deref(), &mut derived_rng(seed, &format!("synthesize/{id}")))
            .with_context(|| format!("synthesizing {id}"))?
            .into_inner()
            .index_axis_move(Axis(0), 0)
            .index_axis_move(Axis(0), 0);
        let hu = |v: &ndarray::Array3<f64>| Volume {
            data: v.mapv(|x| window.denormalize(x)),
            spacing: sample.spacing,
        };
        write_volume(args.out.join(format!("{id}_synthetic.nii.gz")), &hu(&fake), VoxelType::F32)?;
        write_volume(args.out.join(format!("{id}_real.nii.gz")), &hu(&crop.image), VoxelType::F32)?;
        write_volume(
            args.out.join(format!("{id}_mask.nii.gz")),
            &Volume {
                data: crop.mask.mapv(f64::from),
                spacing: sample.spacing,
            },
            VoxelType::U8,
        )?;
        println!("{id} crop at {:?}", crop.offset);
    }
    Ok(())
}

pub fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let schema = schema(config)?;
    let samples = dataset(config, &args.data, &schema)?;
    let (model, encoder) = load_model(&args.checkpoint)?;
    let e = &config.eval;
    let protocol = EvalProtocol {
        crops_per_subject: e.crops_per_subject,
        crop: model.config().crop.clone(),
        seed: e.seed,
        kid_subsets: e.kid_subsets,
        kid_subset_size: e.kid_subset_size,
        is_folds: e.is_folds,
    };
    let extractor: Box<dyn FeatureExtractor> = match e.extractor.as_str() {
        "stats" => Box::new(StatsExtractor::default()),
        "command" if !e.extractor_command.is_empty() => Box::new(SliceExtractor {
            command: e.extractor_command.clone(),
            extractor_id: e.extractor_id.clone(),
        }),
        "command" => bail!("eval.extractor = \"command\" needs eval.extractor_command"),
        other => bail!("unknown extractor `{other}`; use `stats` or `command`"),
    };
    config.write_echo(&args.out, "evaluate", e.seed)?;
    let mut report = evaluate_model(&model, &samples, encoder.as_ref(), &schema, &protocol, extractor.as_ref())?;
    report.checkpoint = Some(args.checkpoint.display().to_string());
    report.write(&args.out)?;
    print!("{}", report.to_toml());
    Ok(())
}

pub fn analyze(config: &RunConfig, args: &AnalyzeArgs) -> Result<()> {
    let schema = schema(config)?;
    let samples = dataset(config, &args.data, &schema)?;
    let (model, encoder) = load_model(&args.checkpoint)?;
    let Some(encoder) = encoder else {
        bail!("{} is not text-conditioned; nothing to perturb", args.checkpoint.display());
    };
    let a = &config.analyze;
    let spec = CounterfactualSpec {
        attribute: a.attribute.clone(),
        from_value: a.from.clone(),
        to_value: a.to.clone(),
        subjects: a.subjects.clone(),
        seed: a.seed,
    };
    let options = AnalysisOptions {
        crop: model.config().crop.clone(),
        slices: a.slices.parse::<SliceChoice>().map_err(anyhow::Error::msg)?,
        heatmap_scale: a.heatmap_scale,
        out_dir: Some(args.out.clone()),
    };
    config.write_echo(&args.out, "analyze", a.seed)?;
    let results = analysis::analyze(&model, &encoder, &schema, &samples, &spec, &options)?;
    for r in &results {
        let lung = r.summary.lung.as_ref().map_or(f64::NAN, |l| l.mean_delta);
        println!(
            "{} lung mean delta {lung:+.6} overall {:+.6}",
            r.subject_id, r.summary.overall.mean_delta
        );
    }
    Ok(())
}
