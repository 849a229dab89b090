//! Layered run configuration: preset defaults, then a TOML file, then
//! `CLINSYNTH_` environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use clinsynth::data::{IntensityWindow, PhantomConfig};
use clinsynth::embedding::EncoderConfig;
use clinsynth::training::{Backbone, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "CLINSYNTH_";
pub const CONFIG_ECHO: &str = "config.toml";
pub const RUN_INFO: &str = "run.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small crops and networks; minutes on a CPU.
    #[default]
    DeskScale,
    /// Full-size crops and the long training schedule.
    PaperScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSection {
    /// Attribute schema TOML; the bundled clinical schema when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// Reject CSV columns that are not in the schema.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub window: IntensityWindow,
    pub num_classes: usize,
    /// Clinical records CSV; defaults to `records.csv` beside the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeSection {
    pub seed: u64,
    /// Subject ids to synthesize; empty means all.
    pub subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub crops_per_subject: usize,
    pub seed: u64,
    pub kid_subsets: usize,
    pub kid_subset_size: usize,
    pub is_folds: usize,
    /// `stats` for the built-in histogram extractor, `command` for an
    /// external per-slice process.
    pub extractor: String,
    pub extractor_command: Vec<String>,
    pub extractor_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub attribute: String,
    pub from: String,
    pub to: String,
    pub subjects: Vec<String>,
    /// `mid` or an axial index.
    pub slices: String,
    pub heatmap_scale: u32,
    pub seed: u64,
}

/// The merged configuration every subcommand reads from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub tabular: TabularSection,
    pub encoder: EncoderConfig,
    pub data: DataSection,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub synthesize: SynthesizeSection,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
}

impl RunConfig {
    pub fn preset(preset: Preset, backbone: Backbone) -> Self {
        let desk = preset == Preset::DeskScale;
        let train = if desk {
            TrainConfig::desk_scale(backbone)
        } else {
            TrainConfig::paper_scale(backbone)
        };
        let dimension = if desk { 64 } else { 768 };
        Self {
            preset,
            tabular: TabularSection {
                schema: None,
                strict: false,
            },
            encoder: EncoderConfig {
                encoder_id: format!("stub-{dimension}"),
                dimension,
                ..EncoderConfig::default()
            },
            data: DataSection {
                window: IntensityWindow::default(),
                num_classes: 4,
                records: None,
            },
            phantom: PhantomConfig::default(),
            train,
            synthesize: SynthesizeSection {
                seed: 0,
                subjects: Vec::new(),
            },
            eval: EvalSection {
                crops_per_subject: 5,
                seed: 0,
                kid_subsets: 100,
                kid_subset_size: 1000,
                is_folds: if desk { 1 } else { 10 },
                extractor: "stats".into(),
                extractor_command: Vec::new(),
                extractor_id: "external".into(),
            },
            analyze: AnalyzeSection {
                attribute: "smoker".into(),
                from: "yes".into(),
                to: "no".into(),
                subjects: Vec::new(),
                slices: "mid".into(),
                heatmap_scale: 8,
                seed: 0,
            },
        }
    }

    /// Namespaced TOML with `fusion` and `diffusion` as top-level sections.
    pub fn to_toml(&self) -> String {
        let mut v = Value::try_from(self).expect("config serializes");
        lift(&mut v);
        toml::to_string(&v).expect("config renders")
    }

    pub fn write_echo(&self, dir: &Path, command: &str, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(CONFIG_ECHO), self.to_toml())
            .with_context(|| format!("writing {}", dir.join(CONFIG_ECHO).display()))?;
        let mut info = Table::new();
        info.insert("command".into(), command.into());
        info.insert("seed".into(), Value::Integer(seed as i64));
        info.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        info.insert("encoder_id".into(), self.encoder.encoder_id.clone().into());
        std::fs::write(dir.join(RUN_INFO), toml::to_string(&info)?)
            .with_context(|| format!("writing {}", dir.join(RUN_INFO).display()))?;
        Ok(())
    }
}

/// Move `train.diffusion` and `train.generator.fusion` to the top level.
fn lift(v: &mut Value) {
    let root = v.as_table_mut().expect("table");
    let train = root.get_mut("train").and_then(Value::as_table_mut).expect("train section");
    let diffusion = train.remove("diffusion");
    let fusion = train
        .get_mut("generator")
        .and_then(Value::as_table_mut)
        .and_then(|g| g.remove("fusion"));
    if let Some(d) = diffusion {
        root.insert("diffusion".into(), d);
    }
    if let Some(f) = fusion {
        root.insert("fusion".into(), f);
    }
}

/// Inverse of [`lift`]: fold the top-level sections back into `train`.
fn lower(v: &mut Value) {
    let root = v.as_table_mut().expect("table");
    let diffusion = root.remove("diffusion");
    let fusion = root.remove("fusion");
    let train = root
        .entry("train")
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut();
    let Some(train) = train else { return };
    if let Some(d) = diffusion {
        merge(train.entry("diffusion").or_insert_with(|| Value::Table(Table::new())), d);
    }
    if let Some(f) = fusion {
        let generator = train.entry("generator").or_insert_with(|| Value::Table(Table::new()));
        if let Some(g) = generator.as_table_mut() {
            merge(g.entry("fusion").or_insert_with(|| Value::Table(Table::new())), f);
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parse a scalar the way it would be written on the right of `key = ` in
/// TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed config key `{key}`");
    }
    let mut table = root;
    for (i, part) in parts.iter().enumerate() {
        let name = table
            .keys()
            .find(|k| k.eq_ignore_ascii_case(part))
            .cloned()
            .unwrap_or_else(|| part.to_string());
        if i + 1 == parts.len() {
            table.insert(name, value);
            return Ok(());
        }
        let next = table.entry(name).or_insert_with(|| Value::Table(Table::new()));
        table = match next {
            Value::Table(t) => t,
            _ => bail!("config key `{key}` descends into a non-table value"),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Sources of configuration other than the preset defaults.
#[derive(Debug, Default, Clone)]
pub struct Layers {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    /// Applied in order after everything else.
    pub flags: Vec<(String, Value)>,
}

impl Layers {
    /// Collect `CLINSYNTH_SECTION__KEY=value` variables; `__` separates
    /// nesting levels.
    pub fn from_env(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                rest.contains("__")
                    .then(|| (rest.split("__").collect::<Vec<_>>().join(".").to_ascii_lowercase(), v))
            })
            .collect();
        out.sort();
        out
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Value::Table(Table::new());
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut overrides, Value::Table(file));
        }
        let table = overrides.as_table_mut().expect("table");
        for (k, v) in &self.env {
            set_path(table, k, parse_value(v)).with_context(|| format!("environment override `{k}`"))?;
        }
        for (k, v) in &self.flags {
            set_path(table, k, v.clone()).with_context(|| format!("flag override `{k}`"))?;
        }

        let preset: Preset = match table.get("preset") {
            Some(v) => v.clone().try_into().context("invalid `preset`")?,
            None => Preset::default(),
        };
        let backbone: Backbone = match table.get("train").and_then(|t| t.get("backbone")) {
            Some(v) => v.clone().try_into().context("invalid `train.backbone`")?,
            None => Backbone::Pix2pix,
        };
        let mut merged = Value::try_from(RunConfig::preset(preset, backbone)).expect("defaults serialize");
        lift(&mut merged);
        merge(&mut merged, overrides);
        lower(&mut merged);
        let config: RunConfig = merged.try_into().context("invalid configuration")?;
        Ok(config)
    }
}
