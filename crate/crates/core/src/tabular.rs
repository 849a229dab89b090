//! Tabular clinical rows to template-rendered text.
//!
//! Each row is validated against an [`AttributeSchema`] list; attributes that
//! are missing, malformed, or out of range are dropped rather than imputed.
//! The surviving attributes render as one sentence each, in schema order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SCHEMA_TOML: &str = include_str!("../assets/default_schema.toml");
const PLACEHOLDER: &str = "{v}";

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("schema has no attributes")]
    EmptySchema,
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown column `{0}` (strict mode)")]
    UnknownColumn(String),
    #[error("missing id column `{0}`")]
    MissingIdColumn(String),
    #[error("row {index}: {source}")]
    Row {
        index: usize,
        #[source]
        source: Box<TabularError>,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Categorical,
    Numeric,
    Boolean,
    /// Free text passed through when non-empty and single-line.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub name: String,
    pub kind: AttributeKind,
    /// Allowed values for categorical attributes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    /// Inclusive interval for numeric attributes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    pub template: String,
    /// Optional value → phrase substitutions (booleans use `true` / `false`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub renderings: BTreeMap<String, String>,
}

impl AttributeSchema {
    /// The canonical rendering of `raw` if it is valid for this attribute.
    pub fn render_value(&self, raw: &str) -> Option<String> {
        let v = raw.trim();
        if v.is_empty() {
            return None;
        }
        let lookup = |key: &str, fallback: &str| {
            self.renderings
                .get(key)
                .cloned()
                .unwrap_or_else(|| fallback.to_string())
        };
        match self.kind {
            AttributeKind::Categorical => {
                self.values.iter().any(|a| a == v).then(|| lookup(v, v))
            }
            AttributeKind::Numeric => {
                let x: f64 = v.parse().ok()?;
                if !x.is_finite() {
                    return None;
                }
                if let Some([lo, hi]) = self.range {
                    if x < lo || x > hi {
                        return None;
                    }
                }
                Some(v.to_string())
            }
            AttributeKind::Boolean => {
                let b = parse_bool(v)?;
                let key = if b { "true" } else { "false" };
                Some(lookup(key, v))
            }
            AttributeKind::Text => (!v.contains(['\n', '\r'])).then(|| v.to_string()),
        }
    }

    pub fn is_valid(&self, raw: &str) -> bool {
        self.render_value(raw).is_some()
    }

    fn check(&self) -> Result<(), TabularError> {
        let bad = |m: String| Err(TabularError::InvalidSchema(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() {
            return bad("empty attribute name".into());
        }
        if self.template.matches(PLACEHOLDER).count() != 1 {
            return bad(format!("template must contain `{PLACEHOLDER}` exactly once"));
        }
        match self.kind {
            AttributeKind::Categorical if self.values.is_empty() => {
                bad("categorical attribute needs `values`".into())
            }
            AttributeKind::Numeric => match self.range {
                Some([lo, hi]) if !(lo <= hi) => bad(format!("empty range [{lo}, {hi}]")),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "y" => Some(true),
        "false" | "no" | "0" | "n" => Some(false),
        _ => None,
    }
}

/// Ordered attribute list plus rendering conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub version: u32,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_fallback")]
    pub fallback: String,
    #[serde(rename = "attribute")]
    pub attributes: Vec<AttributeSchema>,
}

fn default_id_column() -> String {
    "subject_id".into()
}

fn default_fallback() -> String {
    "A patient.".into()
}

impl Default for Schema {
    fn default() -> Self {
        Self::from_toml(DEFAULT_SCHEMA_TOML).expect("bundled schema is valid")
    }
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSchema>) -> Result<Self, TabularError> {
        let s = Self {
            version: 1,
            id_column: default_id_column(),
            fallback: default_fallback(),
            attributes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_toml(text: &str) -> Result<Self, TabularError> {
        let s: Schema = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TabularError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn validate(&self) -> Result<(), TabularError> {
        if self.attributes.is_empty() {
            return Err(TabularError::EmptySchema);
        }
        for (i, a) in self.attributes.iter().enumerate() {
            a.check()?;
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(TabularError::InvalidSchema(format!(
                    "duplicate attribute `{}`",
                    a.name
                )));
            }
        }
        if self.fallback.trim().is_empty() {
            return Err(TabularError::InvalidSchema("empty fallback sentence".into()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AttributeSchema> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

/// One row of clinical data. Missing attributes are absent from `values`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub subject_id: String,
    pub values: BTreeMap<String, String>,
}

impl ClinicalRecord {
    pub fn new(subject_id: impl Into<String>) -> Self {
        Self {
            subject_id: subject_id.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: &str) -> Self {
        self.values.insert(name.to_string(), value.to_string());
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    pub fn set(&mut self, name: &str, value: Option<&str>) {
        match value {
            Some(v) => self.values.insert(name.to_string(), v.to_string()),
            None => self.values.remove(name),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDescription {
    pub text: String,
    pub rendered_attributes: Vec<String>,
}

/// Drop out-of-range or malformed values; valid values pass through untouched.
pub fn validate_record(
    record: &ClinicalRecord,
    schema: &Schema,
) -> Result<ClinicalRecord, TabularError> {
    if schema.attributes.is_empty() {
        return Err(TabularError::EmptySchema);
    }
    let mut out = ClinicalRecord::new(record.subject_id.clone());
    for (name, value) in &record.values {
        let attr = schema
            .get(name)
            .ok_or_else(|| TabularError::UnknownAttribute(name.clone()))?;
        if attr.is_valid(value) {
            out.values.insert(name.clone(), value.clone());
        }
    }
    Ok(out)
}

/// Render present-and-valid attributes in schema order.
pub fn render_record(record: &ClinicalRecord, schema: &Schema) -> TextDescription {
    let mut sentences = Vec::new();
    let mut rendered = Vec::new();
    for attr in &schema.attributes {
        let Some(raw) = record.get(&attr.name) else {
            continue;
        };
        if let Some(v) = attr.render_value(raw) {
            sentences.push(attr.template.replace(PLACEHOLDER, &v).trim().to_string());
            rendered.push(attr.name.clone());
        }
    }
    let text = if sentences.is_empty() {
        schema.fallback.trim().to_string()
    } else {
        sentences.join(" ")
    };
    TextDescription {
        text,
        rendered_attributes: rendered,
    }
}

/// Validate and render every row, preserving order.
pub fn render_table(
    records: &[ClinicalRecord],
    schema: &Schema,
) -> Result<Vec<TextDescription>, TabularError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            validate_record(r, schema)
                .map(|v| render_record(&v, schema))
                .map_err(|e| TabularError::Row {
                    index,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Read a headered CSV. Empty cells become absent values. In strict mode a
/// column that is neither the id column nor a schema attribute is an error;
/// otherwise such columns are ignored.
pub fn read_records_csv<R: Read>(
    reader: R,
    schema: &Schema,
    strict: bool,
) -> Result<Vec<ClinicalRecord>, TabularError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == schema.id_column)
        .ok_or_else(|| TabularError::MissingIdColumn(schema.id_column.clone()))?;
    let mut keep = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == id_col {
            continue;
        }
        if schema.get(h).is_some() {
            keep.push((i, h.to_string()));
        } else if strict {
            return Err(TabularError::UnknownColumn(h.to_string()));
        }
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let mut rec = ClinicalRecord::new(row.get(id_col).unwrap_or_default());
        for (i, name) in &keep {
            if let Some(v) = row.get(*i).filter(|v| !v.is_empty()) {
                rec.values.insert(name.clone(), v.to_string());
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records_csv(
    path: impl AsRef<Path>,
    schema: &Schema,
    strict: bool,
) -> Result<Vec<ClinicalRecord>, TabularError> {
    read_records_csv(std::fs::File::open(path)?, schema, strict)
}

/// Write records back to CSV with the id column first and schema column order.
pub fn write_records_csv<W: Write>(
    writer: W,
    records: &[ClinicalRecord],
    schema: &Schema,
) -> Result<(), TabularError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.id_column.clone()];
    header.extend(schema.attributes.iter().map(|a| a.name.clone()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.subject_id.clone()];
        row.extend(
            schema
                .attributes
                .iter()
                .map(|a| r.get(&a.name).unwrap_or_default().to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub rendered_attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextManifest {
    pub schema_version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// Write newline-delimited texts plus the `subject_id → attributes` sidecar.
pub fn write_text_outputs(
    text_path: &Path,
    manifest_path: &Path,
    records: &[ClinicalRecord],
    texts: &[TextDescription],
    schema: &Schema,
) -> Result<(), TabularError> {
    let mut body = String::new();
    for t in texts {
        body.push_str(&t.text);
        body.push('\n');
    }
    std::fs::write(text_path, body)?;
    let manifest = TextManifest {
        schema_version: schema.version,
        entries: records
            .iter()
            .zip(texts)
            .map(|(r, t)| ManifestEntry {
                subject_id: r.subject_id.clone(),
                rendered_attributes: t.rendered_attributes.clone(),
            })
            .collect(),
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
