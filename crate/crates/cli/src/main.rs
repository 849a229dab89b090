mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clinsynth::analysis::AnalysisError;
use clinsynth::diffusion::DiffusionError;
use clinsynth::evaluation::EvalError;
use clinsynth::training::{Backbone, TrainError};
use toml::Value;

use crate::config::{parse_value, Layers, Preset};

/// Mask- and clinical-text-conditioned CT volume synthesis.
///
/// Configuration is layered: preset defaults, then `--config`, then
/// `CLINSYNTH_SECTION__KEY` environment variables, then flags. Keys are
/// namespaced by section (tabular., encoder., data., phantom., fusion.,
/// diffusion., train., synthesize., eval., analyze.) and unknown keys are
/// rejected. Exit status: 0 success, 2 usage or configuration error,
/// 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "clinsynth", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "CLINSYNTH_CONFIG")]
    config: Option<PathBuf>,
    /// Default values to start from.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Override one configuration key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic chest phantom dataset (volumes, records, manifest).
    Phantom(PhantomArgs),
    /// Render a clinical CSV into one text description per row.
    Convert(ConvertArgs),
    /// Train a synthesis model.
    Train(TrainArgs),
    /// Synthesize one crop per subject from a checkpoint.
    Synthesize(SynthesizeArgs),
    /// Score a checkpoint with FID, KID and IS on paired crops.
    Evaluate(EvaluateArgs),
    /// Counterfactual attribute edits and their difference maps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    /// Volume shape as `z,y,x`.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 3]>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub csv: PathBuf,
    /// Schema TOML; the bundled clinical schema when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output text file, one description per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Sidecar listing the attributes rendered for each subject
    /// (default: `<out>.manifest.json`).
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    /// Reject columns that are not in the schema.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset manifest (one JSON object per line).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Clinical records CSV (default: `records.csv` beside the manifest).
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Run directory for checkpoints, logs and the config echo.
    #[arg(long)]
    pub out: PathBuf,
    /// `unet`, `pix2pix` or `ddpm`.
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Condition on the rendered clinical text.
    #[arg(long)]
    text: bool,
    /// Must stay above `train.decay_start_epoch`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    crops_per_subject: Option<usize>,
    /// `stats` or `command` (see `eval.extractor_command`).
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    attribute: Option<String>,
    #[arg(long)]
    from: Option<String>,
    #[arg(long)]
    to: Option<String>,
    /// `mid` or an axial slice index.
    #[arg(long)]
    slices: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|e| format!("`{d}`: {e}")))
        .collect::<Result<_, _>>()?;
    dims.try_into().map_err(|d: Vec<usize>| format!("expected 3 dimensions, got {}", d.len()))
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn push(out: &mut Vec<(String, Value)>, key: &str, v: Option<Value>) {
    if let Some(v) = v {
        out.push((key.to_string(), v));
    }
}

impl DatasetArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) {
        push(out, "data.records", self.records.as_ref().map(|p| p.display().to_string().into()));
    }
}

impl Command {
    /// Flags that map onto configuration keys.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        match self {
            Command::Phantom(a) => {
                push(&mut o, "phantom.subjects", a.subjects.map(int));
                push(
                    &mut o,
                    "phantom.shape",
                    a.shape.as_ref().map(|s| Value::Array(s.iter().map(|&v| int(v)).collect())),
                );
                push(&mut o, "phantom.seed", a.seed.map(int));
            }
            Command::Convert(a) => {
                push(&mut o, "tabular.schema", a.schema.as_ref().map(|p| p.display().to_string().into()));
                if a.strict {
                    o.push(("tabular.strict".into(), Value::Boolean(true)));
                }
            }
            Command::Train(a) => {
                a.data.overrides(&mut o);
                push(&mut o, "train.backbone", a.backbone.map(|b| b.to_string().into()));
                if a.text {
                    o.push(("train.use_text".into(), Value::Boolean(true)));
                }
                push(&mut o, "train.epochs", a.epochs.map(int));
                push(&mut o, "train.seed", a.seed.map(int));
            }
            Command::Synthesize(a) => {
                a.data.overrides(&mut o);
                push(&mut o, "synthesize.seed", a.seed.map(int));
            }
            Command::Evaluate(a) => {
                a.data.overrides(&mut o);
                push(&mut o, "eval.crops_per_subject", a.crops_per_subject.map(int));
                push(&mut o, "eval.extractor", a.extractor.clone().map(Value::String));
                push(&mut o, "eval.seed", a.seed.map(int));
            }
            Command::Analyze(a) => {
                a.data.overrides(&mut o);
                push(&mut o, "analyze.attribute", a.attribute.clone().map(Value::String));
                push(&mut o, "analyze.from", a.from.clone().map(Value::String));
                push(&mut o, "analyze.to", a.to.clone().map(Value::String));
                push(&mut o, "analyze.slices", a.slices.clone().map(Value::String));
                push(&mut o, "analyze.seed", a.seed.map(int));
            }
        }
        o
    }
}

fn layers(cli: &Cli) -> anyhow::Result<Layers> {
    let mut flags = Vec::new();
    if let Some(p) = cli.global.preset {
        flags.push(("preset".to_string(), Value::try_from(p)?));
    }
    for kv in &cli.global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        flags.push((k.trim().to_string(), parse_value(v.trim())));
    }
    flags.extend(cli.command.overrides());
    Ok(Layers {
        file: cli.global.config.clone(),
        env: Layers::from_env(std::env::vars()),
        flags,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = layers(&cli)?.resolve()?;
    match &cli.command {
        Command::Phantom(a) => commands::phantom(&config, a),
        Command::Convert(a) => commands::convert(&config, a),
        Command::Train(a) => commands::train(&config, a),
        Command::Synthesize(a) => commands::synthesize(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::Analyze(a) => commands::analyze(&config, a),
    }
}

fn diffusion_numeric(e: &DiffusionError) -> bool {
    matches!(e, DiffusionError::NonFinite { .. })
}

fn eval_numeric(e: &EvalError) -> bool {
    match e {
        EvalError::NonFinite | EvalError::SqrtFailed => true,
        EvalError::Diffusion(d) => diffusion_numeric(d),
        EvalError::Subject { source, .. } => eval_numeric(source),
        _ => false,
    }
}

fn analysis_numeric(e: &AnalysisError) -> bool {
    match e {
        AnalysisError::Diffusion(d) => diffusion_numeric(d),
        AnalysisError::Subject { source, .. } => analysis_numeric(source),
        _ => false,
    }
}

/// 3 for numerical failures anywhere in the chain, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        c.downcast_ref::<TrainError>().is_some_and(|e| match e {
            TrainError::NonFinite { .. } => true,
            TrainError::Diffusion(d) => diffusion_numeric(d),
            _ => false,
        }) || c.downcast_ref::<EvalError>().is_some_and(eval_numeric)
            || c.downcast_ref::<AnalysisError>().is_some_and(analysis_numeric)
            || c.downcast_ref::<DiffusionError>().is_some_and(diffusion_numeric)
    });
    if numeric {
        3
    } else {
        2
    }
}

/// The error chain joined with `: `, skipping causes whose text the
/// message already ends with.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLINSYNTH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
