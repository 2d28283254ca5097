//! Domain types shared across the pipeline and manifest loading.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token a model emits when it cannot read an attribute.
pub const MISSING_TOKEN: &str = "None";

/// Task key used for multi-attribute (JSON) prompts.
pub const JSON_TASK_KEY: &str = "json_all";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("attribute key must not be empty")]
    EmptyKey,
    #[error("attribute `{0}` needs at least one example pair")]
    MissingExamples(String),
    #[error("task has no attributes")]
    EmptyTask,
    #[error("single output mode requires exactly one attribute, got {0}")]
    SingleModeArity(usize),
    #[error("duplicate attribute key `{0}` in task")]
    DuplicateAttribute(String),
    #[error("duplicate task key `{0}` in task suite")]
    DuplicateTask(String),
    #[error("cannot read task file: {0}")]
    Io(#[from] io::Error),
    #[error("malformed task file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest record on line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate doc_id `{0}`")]
    DuplicateId(String),
    #[error("image for `{doc_id}` is unreadable: {reason}")]
    UnreadableImage { doc_id: String, reason: String },
    #[error("manifest io: {0}")]
    Io(#[from] io::Error),
}

/// Where a document's raster lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageRef {
    Path(PathBuf),
    /// Inline payload, e.g. from a `data:image/png;base64,...` manifest entry.
    Inline { media_type: String, bytes: Vec<u8> },
}

impl ImageRef {
    /// Parses a manifest `image` field, resolving relative paths against `base_dir`.
    pub fn from_manifest_field(field: &str, base_dir: &Path) -> Result<Self, String> {
        if let Some(rest) = field.strip_prefix("data:") {
            let (meta, payload) = rest
                .split_once(',')
                .ok_or_else(|| "data URI without payload".to_string())?;
            let media_type = meta
                .strip_suffix(";base64")
                .ok_or_else(|| "only base64 data URIs are supported".to_string())?;
            let bytes = BASE64.decode(payload.trim()).map_err(|e| e.to_string())?;
            return Ok(ImageRef::Inline {
                media_type: media_type.to_string(),
                bytes,
            });
        }
        if field.trim().is_empty() {
            return Err("empty image path".into());
        }
        let p = Path::new(field);
        Ok(ImageRef::Path(if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }))
    }

    pub fn to_manifest_field(&self) -> String {
        match self {
            ImageRef::Path(p) => p.display().to_string(),
            ImageRef::Inline { media_type, bytes } => {
                format!("data:{media_type};base64,{}", BASE64.encode(bytes))
            }
        }
    }

    pub fn read_bytes(&self) -> io::Result<Vec<u8>> {
        match self {
            ImageRef::Path(p) => fs::read(p),
            ImageRef::Inline { bytes, .. } => Ok(bytes.clone()),
        }
    }

    /// MIME type sniffed from the payload, falling back to the path extension.
    pub fn media_type(&self) -> String {
        match self {
            ImageRef::Inline { media_type, .. } => media_type.clone(),
            ImageRef::Path(p) => match p
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase())
                .as_deref()
            {
                Some("jpg") | Some("jpeg") => "image/jpeg".into(),
                _ => "image/png".into(),
            },
        }
    }

    fn reader(&self) -> Result<ImageReader<Cursor<Vec<u8>>>, String> {
        let bytes = self.read_bytes().map_err(|e| e.to_string())?;
        ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| e.to_string())
    }

    /// Reads only the header; cheap validity check.
    pub fn dimensions(&self) -> Result<(u32, u32), String> {
        self.reader()?.into_dimensions().map_err(|e| e.to_string())
    }

    pub fn decode(&self) -> Result<DynamicImage, String> {
        self.reader()?.decode().map_err(|e| e.to_string())
    }
}

/// One receipt or invoice together with what the employee typed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub image: ImageRef,
    /// Employee-typed values. Absent key means nothing was typed.
    pub claimed: BTreeMap<String, String>,
    pub vendor: Option<String>,
    pub currency: Option<String>,
}

/// Wire form of a manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub doc_id: String,
    pub image: String,
    #[serde(default)]
    pub claimed: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vendor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub currency: Option<String>,
}

impl Document {
    pub fn to_record(&self) -> ManifestRecord {
        ManifestRecord {
            doc_id: self.doc_id.clone(),
            image: self.image.to_manifest_field(),
            claimed: self.claimed.clone(),
            vendor: self.vendor.clone(),
            currency: self.currency.clone(),
        }
    }
}

/// Output contract for one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueFormat {
    /// As few words as possible, e.g. a merchant name.
    FreeTextShort,
    /// Local currency value without currency sign.
    AmountPlain,
    /// `yyyymmdd`.
    DateYyyymmdd,
    /// Exactly as printed on the document.
    Verbatim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub raw: String,
    pub formatted: String,
}

impl ExamplePair {
    pub fn new(raw: impl Into<String>, formatted: impl Into<String>) -> Self {
        Self {
            raw: raw.into(),
            formatted: formatted.into(),
        }
    }
}

fn default_missing_token() -> String {
    MISSING_TOKEN.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub key: String,
    pub format: ValueFormat,
    #[serde(default)]
    pub example_pairs: Vec<ExamplePair>,
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    /// Human wording used in prompts; defaults to the key with spaces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Answer for the fixed business example in the prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub business_example: Option<String>,
}

impl AttributeSpec {
    pub fn new(
        key: impl Into<String>,
        format: ValueFormat,
        example_pairs: Vec<ExamplePair>,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            key: key.into(),
            format,
            example_pairs,
            missing_token: default_missing_token(),
            label: None,
            business_example: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_business_example(mut self, value: impl Into<String>) -> Self {
        self.business_example = Some(value.into());
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.key.trim().is_empty() {
            return Err(ModelError::EmptyKey);
        }
        if self.format != ValueFormat::Verbatim && self.example_pairs.is_empty() {
            return Err(ModelError::MissingExamples(self.key.clone()));
        }
        Ok(())
    }

    pub fn display_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.key.replace('_', " "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Single,
    Json,
}

/// The attributes requested by one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    attributes: Vec<AttributeSpec>,
    output_mode: OutputMode,
}

#[derive(Deserialize)]
struct TaskSpecWire {
    attributes: Vec<AttributeSpec>,
    #[serde(default)]
    output_mode: Option<OutputMode>,
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = TaskSpecWire::deserialize(d)?;
        let spec = match wire.output_mode {
            Some(OutputMode::Json) => {
                let spec = TaskSpec::forced_json(wire.attributes);
                spec.validate().map(|_| spec)
            }
            _ => TaskSpec::new(wire.attributes),
        };
        spec.map_err(serde::de::Error::custom)
    }
}

impl TaskSpec {
    /// Output mode follows the attribute count: one attribute is single, more is JSON.
    pub fn new(attributes: Vec<AttributeSpec>) -> Result<Self, ModelError> {
        let output_mode = if attributes.len() > 1 {
            OutputMode::Json
        } else {
            OutputMode::Single
        };
        let spec = Self {
            attributes,
            output_mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single(attribute: AttributeSpec) -> Result<Self, ModelError> {
        Self::new(vec![attribute])
    }

    /// JSON mode regardless of arity. Not validated, so an empty task can reach
    /// the renderer and be rejected there.
    pub fn forced_json(attributes: Vec<AttributeSpec>) -> Self {
        Self {
            attributes,
            output_mode: OutputMode::Json,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.attributes.is_empty() {
            return Err(ModelError::EmptyTask);
        }
        if self.output_mode == OutputMode::Single && self.attributes.len() != 1 {
            return Err(ModelError::SingleModeArity(self.attributes.len()));
        }
        let mut seen = HashSet::new();
        for a in &self.attributes {
            a.validate()?;
            if !seen.insert(a.key.as_str()) {
                return Err(ModelError::DuplicateAttribute(a.key.clone()));
            }
        }
        Ok(())
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn arity(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute(&self, key: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.key == key)
    }

    /// Attribute key for single tasks, `json_all` for JSON tasks.
    pub fn task_key(&self) -> &str {
        match self.output_mode {
            OutputMode::Single => &self.attributes[0].key,
            OutputMode::Json => JSON_TASK_KEY,
        }
    }
}

/// All tasks run over a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub tasks: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self, ModelError> {
        let suite = Self { tasks };
        suite.validate()?;
        Ok(suite)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ModelError> {
        Self::from_json_slice(&fs::read(path)?)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self, ModelError> {
        let suite: TaskSuite = serde_json::from_slice(bytes)?;
        suite.validate()?;
        Ok(suite)
    }

    /// Merchant name, total amount and transaction date, one prompt each.
    pub fn expense_default() -> Self {
        Self::from_json_slice(include_bytes!("../assets/tasks_expense.json")).expect("bundled task suite is valid")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut keys = HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !keys.insert(t.task_key()) {
                return Err(ModelError::DuplicateTask(t.task_key().to_string()));
            }
        }
        Ok(())
    }

    pub fn task(&self, task_key: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_key() == task_key)
    }

    pub fn attribute(&self, key: &str) -> Option<&AttributeSpec> {
        self.tasks.iter().find_map(|t| t.attribute(key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelSource {
    Noisy,
    #[serde(rename = "TAIL")]
    Tail,
    Exact,
    Model,
}

/// Labels for one document from one source. `None` values are explicit
/// missing answers; absent keys mean no label at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub source: LabelSource,
    pub values: BTreeMap<String, Option<String>>,
}

impl LabelRecord {
    /// Noisy labels straight from a manifest document.
    pub fn noisy_from(doc: &Document) -> Self {
        Self {
            doc_id: doc.doc_id.clone(),
            source: LabelSource::Noisy,
            values: doc
                .claimed
                .iter()
                .map(|(k, v)| (k.clone(), Some(v.clone())))
                .collect(),
        }
    }

    /// Keys not governed by `task`.
    pub fn foreign_keys<'a>(&'a self, task: &'a TaskSpec) -> impl Iterator<Item = &'a str> + 'a {
        self.values
            .keys()
            .filter(move |k| task.attribute(k).is_none())
            .map(String::as_str)
    }
}

/// Reads a JSON-lines manifest. Relative image paths resolve against the
/// manifest's directory; claimed keys no task asks for are dropped.
pub fn load_manifest(path: &Path, tasks: &TaskSuite) -> Result<Vec<Document>, ManifestError> {
    let file = fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(BufReader::new(file), base, tasks)
}

pub fn parse_manifest<R: BufRead>(
    reader: R,
    base_dir: &Path,
    tasks: &TaskSuite,
) -> Result<Vec<Document>, ManifestError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ManifestError::MalformedRecord { line_no, reason };
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.doc_id.trim().is_empty() {
            return Err(malformed("empty doc_id".into()));
        }
        if !seen.insert(rec.doc_id.clone()) {
            return Err(ManifestError::DuplicateId(rec.doc_id));
        }
        let image = ImageRef::from_manifest_field(&rec.image, base_dir).map_err(malformed)?;
        image
            .dimensions()
            .map_err(|reason| ManifestError::UnreadableImage {
                doc_id: rec.doc_id.clone(),
                reason,
            })?;
        let mut claimed = rec.claimed;
        claimed.retain(|k, _| {
            let known = tasks.attribute(k).is_some();
            if !known {
                tracing::warn!(doc_id = %rec.doc_id, key = %k, "claimed label for unknown attribute dropped");
            }
            known
        });
        docs.push(Document {
            doc_id: rec.doc_id,
            image,
            claimed,
            vendor: rec.vendor,
            currency: rec.currency,
        });
    }
    Ok(docs)
}

pub fn write_manifest<W: Write>(docs: &[Document], mut out: W) -> io::Result<()> {
    for d in docs {
        serde_json::to_writer(&mut out, &d.to_record())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
