//! Comparison reports between label sources.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::{
    json_to_tree, pair_score, ted_similarity, AnlsOptions, MetricName, MetricReport, StratumScore,
};
use crate::model::{LabelRecord, OutputMode, TaskSpec};
use crate::parser::{LabelStatus, ParsedLabel};
use crate::scalar::Real;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("candidate and reference share no documents")]
    NoOverlap,
    #[error("document `{0}` has no stratum key")]
    MissingStratumKey(String),
    #[error("no labels to report on")]
    EmptyInput,
    #[error("document `{0}` appears twice in one label set")]
    DuplicateRecord(String),
    #[error("threshold must lie in (0, 1]")]
    BadThreshold,
}

/// Score of one document under one report key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ItemScore<T> {
    pub doc_id: String,
    pub task_key: String,
    pub score: T,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageGaps {
    pub candidate_only: Vec<String>,
    pub reference_only: Vec<String>,
}

impl CoverageGaps {
    pub fn is_empty(&self) -> bool {
        self.candidate_only.is_empty() && self.reference_only.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Evaluation<T> {
    pub reports: Vec<MetricReport<T>>,
    pub items: Vec<ItemScore<T>>,
    pub coverage: CoverageGaps,
}

fn index(records: &[LabelRecord]) -> Result<BTreeMap<&str, &LabelRecord>, EvalError> {
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.doc_id.as_str(), r).is_some() {
            return Err(EvalError::DuplicateRecord(r.doc_id.clone()));
        }
    }
    Ok(out)
}

/// Object of the task's attributes present in `rec`; explicit missing answers
/// become the attribute's missing token.
fn task_object(rec: &LabelRecord, task: &TaskSpec) -> Value {
    Value::Object(
        task.attributes()
            .iter()
            .filter_map(|a| {
                rec.values.get(&a.key).map(|v| {
                    let text = v.clone().unwrap_or_else(|| a.missing_token.clone());
                    (a.key.clone(), Value::String(text))
                })
            })
            .collect(),
    )
}

fn mean<T: Real>(scores: impl Iterator<Item = T>) -> Option<(T, usize)> {
    let mut n = 0usize;
    let mut total = T::zero();
    for s in scores {
        total = total + s;
        n += 1;
    }
    (n > 0).then(|| (total / T::from_count(n), n))
}

/// ANLS for single-value tasks, mean TED similarity per document for JSON
/// tasks. A single-value pair is scored only when both sides carry the key.
/// Documents present on one side only are reported as coverage gaps.
pub fn evaluate<T: Real>(
    candidate: &[LabelRecord],
    reference: &[LabelRecord],
    task: &TaskSpec,
    opts: &AnlsOptions<T>,
) -> Result<Evaluation<T>, EvalError> {
    if !(opts.tau > T::zero() && opts.tau <= T::one()) {
        return Err(EvalError::BadThreshold);
    }
    let cand = index(candidate)?;
    let refs = index(reference)?;
    let coverage = CoverageGaps {
        candidate_only: cand.keys().filter(|k| !refs.contains_key(*k)).map(|k| k.to_string()).collect(),
        reference_only: refs.keys().filter(|k| !cand.contains_key(*k)).map(|k| k.to_string()).collect(),
    };
    let shared: Vec<(&str, &LabelRecord, &LabelRecord)> = cand
        .iter()
        .filter_map(|(id, c)| refs.get(id).map(|r| (*id, *c, *r)))
        .collect();
    if shared.is_empty() {
        return Err(EvalError::NoOverlap);
    }

    let mut items = Vec::new();
    let mut reports = Vec::new();
    match task.output_mode() {
        OutputMode::Single => {
            let key = &task.attributes()[0].key;
            for (doc_id, c, r) in &shared {
                if let (Some(cv), Some(rv)) = (c.values.get(key), r.values.get(key)) {
                    items.push(ItemScore {
                        doc_id: doc_id.to_string(),
                        task_key: key.clone(),
                        score: pair_score(cv.as_deref(), rv.as_deref(), opts),
                    });
                }
            }
            if let Some((score, n)) = mean(items.iter().map(|i| i.score)) {
                reports.push(MetricReport {
                    task_key: key.clone(),
                    metric_name: MetricName::Anls,
                    score,
                    n_items: n,
                    strata: None,
                });
            }
        }
        OutputMode::Json => {
            let key = task.task_key().to_string();
            for (doc_id, c, r) in &shared {
                let (tc, tr) = (json_to_tree(&task_object(c, task)), json_to_tree(&task_object(r, task)));
                items.push(ItemScore {
                    doc_id: doc_id.to_string(),
                    task_key: key.clone(),
                    score: ted_similarity(&tc, &tr),
                });
            }
            if let Some((score, n)) = mean(items.iter().map(|i| i.score)) {
                reports.push(MetricReport {
                    task_key: key,
                    metric_name: MetricName::TedSim,
                    score,
                    n_items: n,
                    strata: None,
                });
            }
        }
    }
    if reports.is_empty() {
        tracing::warn!(task = task.task_key(), "no scorable pairs");
    }
    Ok(Evaluation {
        reports,
        items,
        coverage,
    })
}

/// Mean score per stratum. `keys` maps doc_id to its stratum (quality bin or vendor).
pub fn stratify<T: Real>(
    items: &[ItemScore<T>],
    keys: &HashMap<String, String>,
) -> Result<BTreeMap<String, StratumScore<T>>, EvalError> {
    let mut buckets: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for item in items {
        let key = keys
            .get(&item.doc_id)
            .ok_or_else(|| EvalError::MissingStratumKey(item.doc_id.clone()))?;
        buckets.entry(key.clone()).or_default().push(item.score);
    }
    Ok(buckets
        .into_iter()
        .filter_map(|(k, scores)| mean(scores.into_iter()).map(|(score, n_items)| (k, StratumScore { score, n_items })))
        .collect())
}

/// Attaches strata to each report from the items that produced it.
pub fn attach_strata<T: Real>(eval: &mut Evaluation<T>, keys: &HashMap<String, String>) -> Result<(), EvalError> {
    for report in &mut eval.reports {
        let own: Vec<ItemScore<T>> = eval
            .items
            .iter()
            .filter(|i| i.task_key == report.task_key)
            .cloned()
            .collect();
        report.strata = Some(stratify(&own, keys)?);
    }
    Ok(())
}

pub type Rate = Ratio<u64>;

fn rate_as_string<S: Serializer>(r: &Rate, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StatusCounts {
    pub valid: u64,
    pub missing: u64,
    pub refusal: u64,
    pub wrong_format: u64,
}

impl StatusCounts {
    pub fn total(&self) -> u64 {
        self.valid + self.missing + self.refusal + self.wrong_format
    }
}

/// Share of each answer class. Rates are exact and sum to one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdherenceReport {
    pub counts: StatusCounts,
    #[serde(serialize_with = "rate_as_string")]
    pub refusal_rate: Rate,
    #[serde(serialize_with = "rate_as_string")]
    pub wrong_format_rate: Rate,
    #[serde(serialize_with = "rate_as_string")]
    pub missing_rate: Rate,
    #[serde(serialize_with = "rate_as_string")]
    pub valid_rate: Rate,
}

impl AdherenceReport {
    pub fn rate_sum(&self) -> Rate {
        self.refusal_rate + self.wrong_format_rate + self.missing_rate + self.valid_rate
    }
}

pub fn adherence_report(parsed: &[ParsedLabel]) -> Result<AdherenceReport, EvalError> {
    if parsed.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut counts = StatusCounts::default();
    for p in parsed {
        match p.status {
            LabelStatus::Valid => counts.valid += 1,
            LabelStatus::Missing => counts.missing += 1,
            LabelStatus::Refusal => counts.refusal += 1,
            LabelStatus::WrongFormat => counts.wrong_format += 1,
        }
    }
    let n = counts.total();
    Ok(AdherenceReport {
        counts,
        refusal_rate: Ratio::new(counts.refusal, n),
        wrong_format_rate: Ratio::new(counts.wrong_format, n),
        missing_rate: Ratio::new(counts.missing, n),
        valid_rate: Ratio::new(counts.valid, n),
    })
}

/// Fixed-width comparison grid: one row per label source or task, one column
/// per task or stratum, scores as whole percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ComparisonTable {
    /// Rows are sources, columns are report keys in first-seen order.
    pub fn by_task<T: Real>(corner: &str, sources: &[(String, Vec<MetricReport<T>>)]) -> Self {
        let mut columns: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for (_, reports) in sources {
            for r in reports {
                if seen.insert(r.task_key.clone()) {
                    columns.push(r.task_key.clone());
                }
            }
        }
        let rows = sources
            .iter()
            .map(|(name, reports)| {
                let cells = columns
                    .iter()
                    .map(|c| reports.iter().find(|r| &r.task_key == c).and_then(|r| r.score.to_f64()))
                    .collect();
                (name.clone(), cells)
            })
            .collect();
        Self {
            corner: corner.to_string(),
            columns,
            rows,
        }
    }

    /// Rows are report keys, columns are `all` followed by every stratum seen.
    pub fn by_stratum<T: Real>(corner: &str, reports: &[MetricReport<T>]) -> Self {
        let mut strata: Vec<String> = reports
            .iter()
            .flat_map(|r| r.strata.iter().flat_map(|s| s.keys().cloned()))
            .collect();
        strata.sort();
        strata.dedup();
        let rows = reports
            .iter()
            .map(|r| {
                let mut cells = vec![r.score.to_f64()];
                cells.extend(strata.iter().map(|k| {
                    r.strata
                        .as_ref()
                        .and_then(|s| s.get(k))
                        .and_then(|s| s.score.to_f64())
                }));
                (format!("{} ({})", r.task_key, r.metric_name), cells)
            })
            .collect();
        let mut columns = vec!["all".to_string()];
        columns.extend(strata);
        Self {
            corner: corner.to_string(),
            columns,
            rows,
        }
    }

    pub fn render(&self) -> String {
        let first = self
            .rows
            .iter()
            .map(|(n, _)| n.chars().count())
            .chain([self.corner.chars().count()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count().max(4)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", self.corner);
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, " | {c:>w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(first));
        for w in &widths {
            out.push_str("-+-");
            out.push_str(&"-".repeat(*w));
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(out, "{name:<first$}");
            for (cell, w) in cells.iter().zip(&widths) {
                let text = cell.map_or_else(|| "-".to_string(), |v| format!("{:.0}%", v * 100.0));
                let _ = write!(out, " | {text:>w$}");
            }
            out.push('\n');
        }
        out
    }
}
