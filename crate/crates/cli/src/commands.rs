use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use synthlabel::dataset::{
    build_dataset as build_records, export_finetune_file, split_train_val, BuildOptions, PromptSet,
};
use synthlabel::eval::{adherence_report, attach_strata, evaluate as run_eval, ComparisonTable};
use synthlabel::image_quality::{score_document, BinEdges, QualityOptions, QualityScore};
use synthlabel::metrics::{AnlsOptions, MetricReport};
use synthlabel::model::{load_manifest, Document, LabelRecord, LabelSource, TaskSuite};
use synthlabel::parser::{Classifier, LabelStatus, ParsedLabel, PhraseLists};
use synthlabel::prompt::{render_task, JsonPromptOptions, PromptTemplate, RenderedPrompt};
use synthlabel::risk::{aggregate_risk, default_epsilon, scan_documents, RiskSummary};
use synthlabel::teacher::{
    connect, compare_costs, estimate_annual_cost, Annotator, EndpointConfig, EndpointError, RetryPolicy,
    UsageTotals,
};

use crate::config::Config;
use crate::io::{read_jsonl, sink, write_json, write_jsonl};
use crate::{OutputFormat, Status, StratifyBy, TaskArgs};

const DEFAULT_PARALLELISM: usize = 4;

fn suite(cfg: &Config, args: &TaskArgs) -> Result<TaskSuite> {
    match args.tasks.as_ref().or(cfg.templates.tasks.as_ref()) {
        Some(p) => TaskSuite::from_json_file(p).with_context(|| format!("loading tasks {}", p.display())),
        None => Ok(TaskSuite::expense_default()),
    }
}

fn template(flag: Option<&PathBuf>, cfg: Option<&PathBuf>, fallback: fn() -> PromptTemplate) -> Result<PromptTemplate> {
    match flag.or(cfg) {
        Some(p) => PromptTemplate::from_json_file(p).with_context(|| format!("loading template {}", p.display())),
        None => Ok(fallback()),
    }
}

fn render_prompts(cfg: &Config, args: &TaskArgs, suite: &TaskSuite) -> Result<Vec<RenderedPrompt>> {
    let single = template(args.template.as_ref(), cfg.templates.single.as_ref(), PromptTemplate::default_single)?;
    let json = template(args.json_template.as_ref(), cfg.templates.json.as_ref(), PromptTemplate::default_json)?;
    let opts = JsonPromptOptions {
        example_limit: cfg
            .templates
            .json_example_limit
            .unwrap_or(JsonPromptOptions::default().example_limit),
    };
    suite
        .tasks
        .iter()
        .map(|t| render_task(t, &single, &json, opts).with_context(|| format!("rendering task {}", t.task_key())))
        .collect()
}

fn manifest(path: &Path, suite: &TaskSuite) -> Result<Vec<Document>> {
    load_manifest(path, suite).with_context(|| format!("loading manifest {}", path.display()))
}

/// One line of `annotate` output. Failed items carry `error` instead of `raw_text`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub doc_id: String,
    pub task_key: String,
    pub prompt: String,
    pub image_marker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default)]
    pub latency_s: f64,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<EndpointError>,
}

pub struct AnnotateArgs {
    pub manifest: PathBuf,
    pub endpoint: Option<String>,
    pub parallelism: Option<usize>,
    pub max_attempts: Option<u32>,
    pub out: Option<PathBuf>,
    pub usage_out: Option<PathBuf>,
}

pub fn annotate(cfg: &Config, targs: &TaskArgs, args: &AnnotateArgs) -> Result<Status> {
    let suite = suite(cfg, targs)?;
    let docs = manifest(&args.manifest, &suite)?;
    let prompts = render_prompts(cfg, targs, &suite)?;
    let e = &cfg.endpoint;
    let url = args
        .endpoint
        .clone()
        .or_else(|| e.url.clone())
        .ok_or_else(|| anyhow!("no endpoint: pass --endpoint, set SYNTHLABEL_ENDPOINT or [endpoint].url"))?;
    let endpoint = connect(&EndpointConfig {
        url,
        token_env: e.token_env.clone(),
        model: e.model.clone().unwrap_or_default(),
        timeout_s: e.timeout_s.unwrap_or(60.0),
        max_payload_bytes: e.max_payload_bytes,
    })
    .context("connecting to endpoint")?;
    let defaults = RetryPolicy::default();
    let policy = RetryPolicy {
        max_attempts: args.max_attempts.or(e.max_attempts).unwrap_or(defaults.max_attempts),
        base_delay: e.base_delay_ms.map_or(defaults.base_delay, Duration::from_millis),
        jitter: e.jitter.unwrap_or(defaults.jitter),
    };
    let annotator = Annotator::new(endpoint, policy);
    let jobs: Vec<(&Document, &RenderedPrompt)> =
        docs.iter().flat_map(|d| prompts.iter().map(move |p| (d, p))).collect();
    let parallelism = args.parallelism.or(e.parallelism).unwrap_or(DEFAULT_PARALLELISM);
    let outcomes = annotator.batch_annotate(&jobs, parallelism);

    let mut failures = 0usize;
    let lines: Vec<AnnotationLine> = jobs
        .iter()
        .zip(outcomes)
        .map(|((_, prompt), outcome)| match outcome {
            Ok(r) => AnnotationLine {
                doc_id: r.doc_id,
                task_key: r.task_key,
                prompt: prompt.text.clone(),
                image_marker: prompt.image_marker.clone(),
                raw_text: Some(r.raw_text),
                input_tokens: r.input_tokens,
                output_tokens: r.output_tokens,
                latency_s: r.latency_s,
                attempt_count: r.attempt_count,
                error: None,
            },
            Err(f) => {
                failures += 1;
                tracing::warn!(doc_id = %f.doc_id, task = %f.task_key, error = %f.error, "annotation failed");
                AnnotationLine {
                    doc_id: f.doc_id,
                    task_key: f.task_key,
                    prompt: prompt.text.clone(),
                    image_marker: prompt.image_marker.clone(),
                    raw_text: None,
                    input_tokens: 0,
                    output_tokens: 0,
                    latency_s: 0.0,
                    attempt_count: f.attempt_count,
                    error: Some(f.error),
                }
            }
        })
        .collect();
    write_jsonl(args.out.as_deref(), &lines)?;
    let usage = annotator.usage();
    match &args.usage_out {
        Some(p) => write_json(Some(p), &usage)?,
        None => tracing::info!(?usage, "usage"),
    }
    Ok(if failures > 0 { Status::Partial } else { Status::Ok })
}

pub fn parse(
    cfg: &Config,
    targs: &TaskArgs,
    annotations: &Path,
    phrases: Option<PathBuf>,
    out: Option<PathBuf>,
    labels_out: Option<PathBuf>,
    adherence_out: Option<PathBuf>,
) -> Result<Status> {
    let suite = suite(cfg, targs)?;
    let phrases = match phrases.as_ref().or(cfg.templates.phrases.as_ref()) {
        Some(p) => PhraseLists::from_text(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => PhraseLists::default(),
    };
    let classifier = Classifier::new(phrases);
    let lines: Vec<AnnotationLine> = read_jsonl(annotations)?;
    let mut parsed = Vec::new();
    let mut skipped = 0usize;
    for line in &lines {
        let task = suite
            .task(&line.task_key)
            .ok_or_else(|| anyhow!("annotation for unknown task `{}`", line.task_key))?;
        match &line.raw_text {
            Some(raw) => parsed.extend(classifier.labels_for_task(raw, task, &line.doc_id)),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        tracing::warn!(skipped, "failed annotations have no answer to parse");
    }
    write_jsonl(out.as_deref(), &parsed)?;
    if let Some(p) = labels_out {
        write_jsonl(Some(&p), label_records(&parsed, LabelSource::Tail))?;
    }
    if let Some(p) = adherence_out {
        let report = adherence_report(&parsed).context("adherence report")?;
        write_json(Some(&p), &report)?;
    }
    Ok(if skipped > 0 { Status::Partial } else { Status::Ok })
}

/// Groups labels by document in first-seen order. Anything but a valid answer
/// becomes an explicit missing value.
fn label_records(parsed: &[ParsedLabel], source: LabelSource) -> Vec<LabelRecord> {
    let mut order: Vec<&str> = Vec::new();
    let mut values: HashMap<&str, BTreeMap<String, Option<String>>> = HashMap::new();
    for p in parsed {
        let slot = values.entry(p.doc_id.as_str()).or_insert_with(|| {
            order.push(p.doc_id.as_str());
            BTreeMap::new()
        });
        let v = (p.status == LabelStatus::Valid).then(|| p.value.clone()).flatten();
        slot.insert(p.attribute_key.clone(), v);
    }
    order
        .into_iter()
        .map(|d| LabelRecord {
            doc_id: d.to_string(),
            source,
            values: values.remove(d).unwrap_or_default(),
        })
        .collect()
}

fn edges(cfg: &Config) -> Result<BinEdges> {
    let e = cfg.thresholds.quality_bins.map_or_else(BinEdges::default, BinEdges);
    if !e.is_ascending() {
        bail!("[thresholds].quality_bins must be strictly ascending");
    }
    Ok(e)
}

/// Scores documents on up to `parallelism` threads, keeping input order.
fn score_all(docs: &[Document], opts: &QualityOptions, parallelism: usize) -> Vec<Option<QualityScore>> {
    let next = AtomicUsize::new(0);
    let slots = Mutex::new(vec![None; docs.len()]);
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(docs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(doc) = docs.get(i) else { break };
                let score = match score_document(doc, opts) {
                    Ok(q) => Some(q),
                    Err(e) => {
                        tracing::warn!(doc_id = %doc.doc_id, error = %e, "cannot score image");
                        None
                    }
                };
                slots.lock().unwrap()[i] = score;
            });
        }
    });
    slots.into_inner().unwrap()
}

pub fn quality(
    cfg: &Config,
    targs: &TaskArgs,
    manifest_path: &Path,
    max_dimension: Option<u32>,
    parallelism: Option<usize>,
    out: Option<PathBuf>,
) -> Result<Status> {
    let suite = suite(cfg, targs)?;
    let docs = manifest(manifest_path, &suite)?;
    let opts = QualityOptions {
        max_dimension,
        edges: Some(edges(cfg)?),
    };
    let scores = score_all(
        &docs,
        &opts,
        parallelism.or(cfg.endpoint.parallelism).unwrap_or(DEFAULT_PARALLELISM),
    );
    let failed = scores.iter().filter(|s| s.is_none()).count();
    write_jsonl(out.as_deref(), scores.into_iter().flatten())?;
    Ok(if failed > 0 { Status::Partial } else { Status::Ok })
}

pub struct BuildArgs {
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub annotations: Option<PathBuf>,
    pub train_n: Option<usize>,
    pub seed: Option<u64>,
    pub drop_missing: bool,
    pub skip_unannotated: bool,
    pub out_dir: PathBuf,
}

pub fn build_dataset(cfg: &Config, targs: &TaskArgs, args: &BuildArgs) -> Result<Status> {
    let suite = suite(cfg, targs)?;
    let mut docs = manifest(&args.manifest, &suite)?;
    let labels: Vec<ParsedLabel> = read_jsonl(&args.labels)?;
    let prompts = match &args.annotations {
        Some(path) => {
            let mut set = PromptSet::new();
            for line in read_jsonl::<AnnotationLine>(path)? {
                set.insert_doc(
                    &line.doc_id,
                    RenderedPrompt {
                        text: line.prompt,
                        image_marker: line.image_marker,
                        task_key: line.task_key,
                    },
                );
            }
            set
        }
        None => PromptSet::from_task_prompts(render_prompts(cfg, targs, &suite)?),
    };

    let mut status = Status::Ok;
    if args.skip_unannotated {
        let have: HashSet<(&str, &str)> = labels.iter().map(|l| (l.doc_id.as_str(), l.task_key.as_str())).collect();
        let before = docs.len();
        docs.retain(|d| {
            let complete = suite.tasks.iter().all(|t| have.contains(&(d.doc_id.as_str(), t.task_key())));
            if !complete {
                tracing::warn!(doc_id = %d.doc_id, "document lacks annotations; skipped");
            }
            complete
        });
        if docs.len() < before {
            status = Status::Partial;
        }
        let kept: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        let labels: Vec<ParsedLabel> = labels.iter().filter(|l| kept.contains(l.doc_id.as_str())).cloned().collect();
        return finish_build(&docs, &suite, &labels, &prompts, cfg, args).map(|s| worst(s, status));
    }
    finish_build(&docs, &suite, &labels, &prompts, cfg, args).map(|s| worst(s, status))
}

fn worst(a: Status, b: Status) -> Status {
    if a == Status::Partial || b == Status::Partial {
        Status::Partial
    } else {
        Status::Ok
    }
}

fn finish_build(
    docs: &[Document],
    suite: &TaskSuite,
    labels: &[ParsedLabel],
    prompts: &PromptSet,
    cfg: &Config,
    args: &BuildArgs,
) -> Result<Status> {
    let (records, report) = build_records(
        docs,
        suite,
        labels,
        prompts,
        BuildOptions {
            keep_missing: !args.drop_missing,
        },
    )?;
    let seed = args.seed.or(cfg.seeds.split).unwrap_or(0);
    let (train, val) = split_train_val(&records, args.train_n.unwrap_or(records.len()), seed)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    export_finetune_file(&train, &args.out_dir.join("train.jsonl"))?;
    export_finetune_file(&val, &args.out_dir.join("val.jsonl"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        #[serde(flatten)]
        report: &'a synthlabel::dataset::BuildReport,
        train: usize,
        val: usize,
        seed: u64,
    }
    write_json(
        Some(&args.out_dir.join("build_report.json")),
        &Summary {
            report: &report,
            train: train.len(),
            val: val.len(),
            seed,
        },
    )?;
    Ok(Status::Ok)
}

pub struct EvalArgs {
    pub candidate: PathBuf,
    pub reference: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub tau: Option<f64>,
    pub strict: bool,
    pub stratify_by: Option<StratifyBy>,
    pub quality: Option<PathBuf>,
    pub format: OutputFormat,
    pub name: String,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput {
    reports: Vec<MetricReport<f64>>,
    coverage: BTreeMap<String, synthlabel::eval::CoverageGaps>,
}

pub fn evaluate(cfg: &Config, targs: &TaskArgs, args: &EvalArgs) -> Result<Status> {
    let suite = suite(cfg, targs)?;
    let docs = args.manifest.as_deref().map(|p| manifest(p, &suite)).transpose()?;
    let candidate: Vec<LabelRecord> = read_jsonl(&args.candidate)?;
    let reference: Vec<LabelRecord> = match (&args.reference, &docs) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(docs)) => docs.iter().map(LabelRecord::noisy_from).collect(),
        (None, None) => bail!("pass --reference or --manifest for noisy reference labels"),
    };
    let opts = AnlsOptions {
        tau: args.tau.or(cfg.thresholds.tau).unwrap_or(0.5),
        normalize: !args.strict && cfg.thresholds.normalize.unwrap_or(true),
    };
    let strata_keys: Option<HashMap<String, String>> = match args.stratify_by {
        None => None,
        Some(StratifyBy::Vendor) => {
            let docs = docs.as_ref().ok_or_else(|| anyhow!("--stratify-by vendor needs --manifest"))?;
            Some(
                docs.iter()
                    .filter_map(|d| d.vendor.clone().map(|v| (d.doc_id.clone(), v)))
                    .collect(),
            )
        }
        Some(StratifyBy::Quality) => {
            let scores: Vec<QualityScore> = match (&args.quality, &docs) {
                (Some(p), _) => read_jsonl(p)?,
                (None, Some(docs)) => {
                    let opts = QualityOptions {
                        max_dimension: None,
                        edges: Some(edges(cfg)?),
                    };
                    score_all(docs, &opts, DEFAULT_PARALLELISM).into_iter().flatten().collect()
                }
                (None, None) => bail!("--stratify-by quality needs --quality or --manifest"),
            };
            Some(scores.into_iter().map(|q| (q.doc_id, q.bin.to_string())).collect())
        }
    };

    let mut reports = Vec::new();
    let mut coverage = BTreeMap::new();
    for task in &suite.tasks {
        let mut ev = run_eval(&candidate, &reference, task, &opts)
            .with_context(|| format!("evaluating task {}", task.task_key()))?;
        if let Some(keys) = &strata_keys {
            attach_strata(&mut ev, keys)?;
        }
        if !ev.coverage.is_empty() {
            tracing::warn!(
                task = task.task_key(),
                candidate_only = ev.coverage.candidate_only.len(),
                reference_only = ev.coverage.reference_only.len(),
                "coverage gaps"
            );
            coverage.insert(task.task_key().to_string(), ev.coverage);
        }
        reports.extend(ev.reports);
    }
    match args.format {
        OutputFormat::Json => write_json(args.out.as_deref(), &EvalOutput { reports, coverage })?,
        OutputFormat::Table => {
            let table = if strata_keys.is_some() {
                ComparisonTable::by_stratum(&args.name, &reports)
            } else {
                ComparisonTable::by_task("source", &[(args.name.clone(), reports)])
            };
            let mut out = sink(args.out.as_deref())?;
            out.write_all(table.render().as_bytes())?;
            out.flush()?;
        }
    }
    Ok(Status::Ok)
}

pub struct RiskArgs {
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub amount_key: String,
    pub epsilon: Option<Decimal>,
    pub corpus_size: Option<u64>,
    pub out: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Serialize)]
struct RiskOutput {
    #[serde(flatten)]
    summary: RiskSummary,
    epsilon: Decimal,
    clear: usize,
    no_extraction: usize,
    currency_mismatch: usize,
    not_covered: usize,
    unparseable: Vec<(String, String)>,
}

pub fn detect_overpayment(cfg: &Config, targs: &TaskArgs, args: &RiskArgs) -> Result<Status> {
    let suite = suite(cfg, targs)?;
    let docs = manifest(&args.manifest, &suite)?;
    let labels: Vec<ParsedLabel> = read_jsonl(&args.labels)?;
    let epsilon = args.epsilon.or(cfg.thresholds.epsilon).unwrap_or_else(default_epsilon);
    let scan = scan_documents(&docs, &labels, &args.amount_key, epsilon);

    let mut csv = csv::Writer::from_writer(sink(args.out.as_deref())?);
    csv.write_record(["doc_id", "claimed_amount", "extracted_amount", "delta", "currency"])?;
    for f in &scan.flags {
        csv.write_record([
            f.doc_id.as_str(),
            &f.claimed_amount.to_string(),
            &f.extracted_amount.to_string(),
            &f.delta.to_string(),
            f.currency.as_deref().unwrap_or(""),
        ])?;
    }
    csv.flush()?;

    let summary = aggregate_risk(&scan.flags, args.corpus_size.unwrap_or(docs.len() as u64))?;
    let output = RiskOutput {
        summary,
        epsilon,
        clear: scan.clear,
        no_extraction: scan.no_extraction,
        currency_mismatch: scan.currency_mismatch,
        not_covered: scan.not_covered,
        unparseable: scan.unparseable.clone(),
    };
    match &args.summary {
        Some(p) => write_json(Some(p), &output)?,
        None => eprintln!("{}", serde_json::to_string_pretty(&output)?),
    }
    for (doc, err) in &scan.unparseable {
        tracing::warn!(doc_id = %doc, error = %err, "claim not checked");
    }
    Ok(if scan.unparseable.is_empty() { Status::Ok } else { Status::Partial })
}

pub struct CostArgs {
    pub annual_docs: Option<u64>,
    pub input_tokens: Option<Decimal>,
    pub output_tokens: Option<Decimal>,
    pub usage: Option<PathBuf>,
    pub student_input_tokens: Option<Decimal>,
    pub student_output_tokens: Option<Decimal>,
    pub out: Option<PathBuf>,
}

pub fn estimate_cost(cfg: &Config, args: &CostArgs) -> Result<Status> {
    let teacher = cfg
        .pricing
        .teacher
        .as_ref()
        .ok_or_else(|| anyhow!("config needs a [pricing.teacher] table"))?;
    let student = cfg
        .pricing
        .student
        .as_ref()
        .ok_or_else(|| anyhow!("config needs a [pricing.student] table"))?;
    teacher.validate().context("[pricing.teacher]")?;
    student.validate().context("[pricing.student]")?;
    let annual_docs = args
        .annual_docs
        .or(cfg.pricing.annual_docs)
        .ok_or_else(|| anyhow!("pass --annual-docs or set [pricing].annual_docs"))?;

    let from_usage = match &args.usage {
        Some(p) => {
            let u: UsageTotals = serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?;
            if u.successes == 0 {
                bail!("usage file records no successful requests");
            }
            let n = Decimal::from(u.successes);
            Some((Decimal::from(u.input_tokens) / n, Decimal::from(u.output_tokens) / n))
        }
        None => None,
    };
    let teacher_tokens = match (args.input_tokens, args.output_tokens, from_usage) {
        (Some(i), Some(o), _) => (i, o),
        (i, o, Some((ui, uo))) => (i.unwrap_or(ui), o.unwrap_or(uo)),
        _ => bail!("pass --input-tokens and --output-tokens, or --usage"),
    };
    let student_tokens = (
        args.student_input_tokens.unwrap_or(teacher_tokens.0),
        args.student_output_tokens.unwrap_or(teacher_tokens.1),
    );
    let teacher_cost = estimate_annual_cost(teacher, annual_docs, teacher_tokens);
    let student_cost = estimate_annual_cost(student, annual_docs, student_tokens);
    let comparison = compare_costs(teacher, teacher_cost, student, student_cost)
        .ok_or_else(|| anyhow!("teacher cost and throughput must be nonzero"))?;
    write_json(args.out.as_deref(), &comparison)?;
    Ok(Status::Ok)
}
