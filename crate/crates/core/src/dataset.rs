//! Joins documents with teacher labels and exports fine-tuning data.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Document, ImageRef, OutputMode, TaskSpec, TaskSuite};
use crate::parser::{LabelStatus, ParsedLabel};
use crate::prompt::RenderedPrompt;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no annotation for document `{doc_id}`, task `{task_key}`")]
    MissingAnnotation { doc_id: String, task_key: String },
    #[error("no prompt for document `{doc_id}`, task `{task_key}`")]
    MissingPrompt { doc_id: String, task_key: String },
    #[error("annotation refers to unknown document `{0}`")]
    UnknownDocument(String),
    #[error("annotation refers to unknown task `{0}`")]
    UnknownTask(String),
    #[error("two annotations for document `{doc_id}`, attribute `{attribute_key}`")]
    DuplicateAnnotation { doc_id: String, attribute_key: String },
    #[error("train_n {train_n} exceeds the {available} available records")]
    TrainTooLarge { train_n: usize, available: usize },
    #[error("malformed export line {line_no}: {reason}")]
    Malformed { line_no: usize, reason: String },
    #[error("dataset io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub doc_id: String,
    pub image_ref: ImageRef,
    /// Exact prompt text that produced `tail_label`.
    pub prompt_text: String,
    pub image_marker: String,
    /// A string for single-value tasks, an object for JSON tasks.
    pub tail_label: Value,
    pub noisy_label: Option<String>,
    pub task_key: String,
}

impl DatasetRecord {
    /// Target text the student learns to emit.
    pub fn target_text(&self) -> String {
        match &self.tail_label {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

/// Prompts by task, with optional per-document overrides.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    by_task: HashMap<String, RenderedPrompt>,
    by_doc: HashMap<(String, String), RenderedPrompt>,
}

impl PromptSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_task_prompts(prompts: impl IntoIterator<Item = RenderedPrompt>) -> Self {
        let mut set = Self::new();
        for p in prompts {
            set.insert_task(p);
        }
        set
    }

    pub fn insert_task(&mut self, prompt: RenderedPrompt) {
        self.by_task.insert(prompt.task_key.clone(), prompt);
    }

    pub fn insert_doc(&mut self, doc_id: &str, prompt: RenderedPrompt) {
        self.by_doc.insert((doc_id.to_string(), prompt.task_key.clone()), prompt);
    }

    pub fn get(&self, doc_id: &str, task_key: &str) -> Option<&RenderedPrompt> {
        self.by_doc
            .get(&(doc_id.to_string(), task_key.to_string()))
            .or_else(|| self.by_task.get(task_key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Keep records whose teacher answer was the missing token.
    pub keep_missing: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { keep_missing: true }
    }
}

/// Every input annotation is counted once as valid, missing or excluded.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub annotations: usize,
    pub valid: usize,
    pub missing: usize,
    /// Annotations in records dropped for a refusal or wrong format.
    pub excluded: usize,
    pub refusals: usize,
    pub wrong_format: usize,
    pub records: usize,
    /// Records dropped because every answer was missing and `keep_missing` is off.
    pub dropped_missing: usize,
}

fn noisy_for(doc: &Document, task: &TaskSpec) -> Option<String> {
    match task.output_mode() {
        OutputMode::Single => doc.claimed.get(&task.attributes()[0].key).cloned(),
        OutputMode::Json => {
            let obj: serde_json::Map<String, Value> = task
                .attributes()
                .iter()
                .filter_map(|a| doc.claimed.get(&a.key).map(|v| (a.key.clone(), Value::String(v.clone()))))
                .collect();
            (!obj.is_empty()).then(|| Value::Object(obj).to_string())
        }
    }
}

/// One record per (document, task). Records containing a refusal or wrongly
/// formatted answer are dropped and counted. Output is sorted by doc_id then task.
pub fn build_dataset(
    docs: &[Document],
    suite: &TaskSuite,
    annotations: &[ParsedLabel],
    prompts: &PromptSet,
    opts: BuildOptions,
) -> Result<(Vec<DatasetRecord>, BuildReport), DatasetError> {
    let known_docs: HashMap<&str, &Document> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut grouped: BTreeMap<(&str, &str), BTreeMap<&str, &ParsedLabel>> = BTreeMap::new();
    for label in annotations {
        if !known_docs.contains_key(label.doc_id.as_str()) {
            return Err(DatasetError::UnknownDocument(label.doc_id.clone()));
        }
        let task = suite
            .task(&label.task_key)
            .ok_or_else(|| DatasetError::UnknownTask(label.task_key.clone()))?;
        if task.attribute(&label.attribute_key).is_none() {
            return Err(DatasetError::UnknownTask(format!("{}.{}", label.task_key, label.attribute_key)));
        }
        let slot = grouped
            .entry((label.doc_id.as_str(), label.task_key.as_str()))
            .or_default();
        if slot.insert(label.attribute_key.as_str(), label).is_some() {
            return Err(DatasetError::DuplicateAnnotation {
                doc_id: label.doc_id.clone(),
                attribute_key: label.attribute_key.clone(),
            });
        }
    }

    let mut report = BuildReport {
        annotations: annotations.len(),
        ..BuildReport::default()
    };
    let mut records = Vec::new();
    let mut sorted_docs: Vec<&Document> = docs.iter().collect();
    sorted_docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let mut tasks: Vec<&TaskSpec> = suite.tasks.iter().collect();
    tasks.sort_by(|a, b| a.task_key().cmp(b.task_key()));

    for doc in sorted_docs {
        for task in &tasks {
            let task_key = task.task_key();
            let labels = grouped.get(&(doc.doc_id.as_str(), task_key)).ok_or_else(|| {
                DatasetError::MissingAnnotation {
                    doc_id: doc.doc_id.clone(),
                    task_key: task_key.to_string(),
                }
            })?;
            let count = |s: LabelStatus| labels.values().filter(|l| l.status == s).count();
            let (refusals, wrong) = (count(LabelStatus::Refusal), count(LabelStatus::WrongFormat));
            if refusals + wrong > 0 {
                report.refusals += refusals;
                report.wrong_format += wrong;
                report.excluded += labels.len();
                continue;
            }
            let (valid, missing) = (count(LabelStatus::Valid), count(LabelStatus::Missing));
            report.valid += valid;
            report.missing += missing;
            if valid == 0 && !opts.keep_missing {
                report.dropped_missing += 1;
                continue;
            }
            let answer = |key: &str, missing_token: &str| {
                labels
                    .get(key)
                    .and_then(|l| l.value.clone())
                    .unwrap_or_else(|| missing_token.to_string())
            };
            let tail_label = match task.output_mode() {
                OutputMode::Single => {
                    let a = &task.attributes()[0];
                    Value::String(answer(&a.key, &a.missing_token))
                }
                OutputMode::Json => Value::Object(
                    task.attributes()
                        .iter()
                        .map(|a| (a.key.clone(), Value::String(answer(&a.key, &a.missing_token))))
                        .collect(),
                ),
            };
            let prompt = prompts
                .get(&doc.doc_id, task_key)
                .ok_or_else(|| DatasetError::MissingPrompt {
                    doc_id: doc.doc_id.clone(),
                    task_key: task_key.to_string(),
                })?;
            records.push(DatasetRecord {
                doc_id: doc.doc_id.clone(),
                image_ref: doc.image.clone(),
                prompt_text: prompt.text.clone(),
                image_marker: prompt.image_marker.clone(),
                tail_label,
                noisy_label: noisy_for(doc, task),
                task_key: task_key.to_string(),
            });
        }
    }
    report.records = records.len();
    Ok((records, report))
}

/// Shuffles whole documents with ChaCha8 seeded by `seed`, then fills the
/// training half greedily up to `train_n` records. A document never straddles
/// the split. Both halves come back sorted by doc_id then task.
pub fn split_train_val(
    records: &[DatasetRecord],
    train_n: usize,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), DatasetError> {
    if train_n > records.len() {
        return Err(DatasetError::TrainTooLarge {
            train_n,
            available: records.len(),
        });
    }
    let mut groups: BTreeMap<&str, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.doc_id.as_str()).or_default().push(r);
    }
    let mut groups: Vec<Vec<&DatasetRecord>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let (mut train, mut val) = (Vec::new(), Vec::new());
    for group in groups {
        let dest = if train.len() + group.len() <= train_n {
            &mut train
        } else {
            &mut val
        };
        dest.extend(group.into_iter().cloned());
    }
    let key = |r: &DatasetRecord| (r.doc_id.clone(), r.task_key.clone());
    train.sort_by_key(key);
    val.sort_by_key(key);
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

/// One exported line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportLine {
    pub id: String,
    pub doc_id: String,
    pub task: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_label: Option<String>,
    pub conversations: Vec<Turn>,
}

impl From<&DatasetRecord> for ExportLine {
    fn from(r: &DatasetRecord) -> Self {
        Self {
            id: format!("{}:{}", r.doc_id, r.task_key),
            doc_id: r.doc_id.clone(),
            task: r.task_key.clone(),
            image: r.image_ref.to_manifest_field(),
            noisy_label: r.noisy_label.clone(),
            conversations: vec![
                Turn {
                    from: "human".into(),
                    value: format!("{}\n{}", r.image_marker, r.prompt_text),
                },
                Turn {
                    from: "model".into(),
                    value: r.target_text(),
                },
            ],
        }
    }
}

impl ExportLine {
    pub fn into_record(self) -> Result<DatasetRecord, String> {
        let [human, model]: [Turn; 2] = self
            .conversations
            .try_into()
            .map_err(|_| "expected exactly two conversation turns".to_string())?;
        if human.from != "human" || model.from != "model" {
            return Err("turns must be human then model".into());
        }
        let (marker, prompt) = human
            .value
            .split_once('\n')
            .ok_or_else(|| "human turn lacks the image marker line".to_string())?;
        // Targets of JSON tasks are objects; single-value targets stay strings
        // even when they happen to look like JSON.
        let tail_label = match serde_json::from_str::<Value>(&model.value) {
            Ok(v @ Value::Object(_)) if self.task == crate::model::JSON_TASK_KEY => v,
            _ => Value::String(model.value),
        };
        Ok(DatasetRecord {
            doc_id: self.doc_id,
            image_ref: ImageRef::from_manifest_field(&self.image, Path::new(""))?,
            prompt_text: prompt.to_string(),
            image_marker: marker.to_string(),
            tail_label,
            noisy_label: self.noisy_label,
            task_key: self.task,
        })
    }
}

pub fn export_finetune_jsonl<W: Write>(records: &[DatasetRecord], mut out: W) -> Result<(), DatasetError> {
    for r in records {
        serde_json::to_writer(&mut out, &ExportLine::from(r)).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_finetune_file(records: &[DatasetRecord], path: &Path) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    export_finetune_jsonl(records, io::BufWriter::new(file))
}

pub fn import_finetune_jsonl<R: BufRead>(reader: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| DatasetError::Malformed {
            line_no: idx + 1,
            reason,
        };
        let parsed: ExportLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(parsed.into_record().map_err(malformed)?);
    }
    Ok(out)
}
