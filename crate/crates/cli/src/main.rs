mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rust_decimal::Decimal;

use crate::config::Config;

/// Exit 0 on success, 1 when some items failed, 2 on fatal errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Partial,
}

#[derive(Parser)]
#[command(name = "synthlabel", version, about = "Synthetic labels for receipts and invoices")]
struct Cli {
    /// TOML config with [endpoint], [pricing], [templates], [thresholds], [seeds].
    #[arg(long, global = true, env = "SYNTHLABEL_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    log_format: LogFormat,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Text,
    Json,
}

#[derive(Args, Clone, Default)]
pub struct TaskArgs {
    /// Task suite JSON; defaults to merchant name, amount and date.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Prompt template for single-attribute tasks.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Prompt template for multi-attribute (JSON) tasks.
    #[arg(long)]
    pub json_template: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Send every (document, task) prompt to the teacher endpoint.
    Annotate {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// `mock://fixtures.jsonl` or an http(s) URL.
        #[arg(long, env = "SYNTHLABEL_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long, env = "SYNTHLABEL_PARALLELISM")]
        parallelism: Option<usize>,
        #[arg(long)]
        max_attempts: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Token and request totals as JSON.
        #[arg(long)]
        usage_out: Option<PathBuf>,
    },
    /// Classify raw answers into labels.
    Parse {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        annotations: PathBuf,
        /// Refusal/preamble phrase list.
        #[arg(long)]
        phrases: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-document label records for `evaluate`.
        #[arg(long)]
        labels_out: Option<PathBuf>,
        /// Refusal and format adherence rates as JSON.
        #[arg(long)]
        adherence_out: Option<PathBuf>,
    },
    /// Variance-of-Laplacian sharpness and quality bin per document.
    Quality {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Downscale so the longer side is at most this many pixels first.
        #[arg(long)]
        max_dimension: Option<u32>,
        #[arg(long, env = "SYNTHLABEL_PARALLELISM")]
        parallelism: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Join documents with labels, split, and export fine-tuning JSONL.
    BuildDataset {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Parsed labels from `parse`.
        #[arg(long)]
        labels: PathBuf,
        /// Annotations from `annotate`; supplies the exact prompts used.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Records in the training half; all records when omitted.
        #[arg(long)]
        train_n: Option<usize>,
        #[arg(long, env = "SYNTHLABEL_SEED")]
        seed: Option<u64>,
        /// Drop records whose answer was the missing token.
        #[arg(long)]
        drop_missing: bool,
        /// Leave out documents lacking an annotation for some task instead of failing.
        #[arg(long)]
        skip_unannotated: bool,
        /// Receives train.jsonl, val.jsonl and build_report.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score candidate labels against a reference.
    Evaluate {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        candidate: PathBuf,
        /// Reference label records; noisy labels from --manifest when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, env = "SYNTHLABEL_TAU")]
        tau: Option<f64>,
        /// Compare strings exactly, without lowercasing or whitespace folding.
        #[arg(long)]
        strict: bool,
        #[arg(long, value_enum)]
        stratify_by: Option<StratifyBy>,
        /// Output of `quality`; computed from the manifest when omitted.
        #[arg(long)]
        quality: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
        /// Row name for the candidate in the table.
        #[arg(long, default_value = "candidate")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flag documents whose extracted amount is below the claimed amount.
    DetectOverpayment {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Parsed labels from `parse`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "amount")]
        amount_key: String,
        #[arg(long, env = "SYNTHLABEL_EPSILON")]
        epsilon: Option<Decimal>,
        /// Denominator for per-document risk; the manifest size by default.
        #[arg(long)]
        corpus_size: Option<u64>,
        /// CSV of flags; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON summary; stderr when omitted.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Annual cost and speed of the teacher versus the student.
    EstimateCost {
        #[arg(long)]
        annual_docs: Option<u64>,
        /// Mean prompt tokens per document.
        #[arg(long)]
        input_tokens: Option<Decimal>,
        /// Mean answer tokens per document.
        #[arg(long)]
        output_tokens: Option<Decimal>,
        /// Derive teacher token means from an `annotate --usage-out` file.
        #[arg(long)]
        usage: Option<PathBuf>,
        #[arg(long)]
        student_input_tokens: Option<Decimal>,
        #[arg(long)]
        student_output_tokens: Option<Decimal>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StratifyBy {
    Quality,
    Vendor,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

fn init_logging(format: LogFormat, verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    match format {
        LogFormat::Text => builder.init(),
        LogFormat::Json => builder.json().init(),
    }
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    use commands as c;
    match cli.command {
        Command::Annotate {
            tasks,
            manifest,
            endpoint,
            parallelism,
            max_attempts,
            out,
            usage_out,
        } => c::annotate(
            &cfg,
            &tasks,
            &c::AnnotateArgs {
                manifest,
                endpoint,
                parallelism,
                max_attempts,
                out,
                usage_out,
            },
        ),
        Command::Parse {
            tasks,
            annotations,
            phrases,
            out,
            labels_out,
            adherence_out,
        } => c::parse(&cfg, &tasks, &annotations, phrases, out, labels_out, adherence_out),
        Command::Quality {
            tasks,
            manifest,
            max_dimension,
            parallelism,
            out,
        } => c::quality(&cfg, &tasks, &manifest, max_dimension, parallelism, out),
        Command::BuildDataset {
            tasks,
            manifest,
            labels,
            annotations,
            train_n,
            seed,
            drop_missing,
            skip_unannotated,
            out_dir,
        } => c::build_dataset(
            &cfg,
            &tasks,
            &c::BuildArgs {
                manifest,
                labels,
                annotations,
                train_n,
                seed,
                drop_missing,
                skip_unannotated,
                out_dir,
            },
        ),
        Command::Evaluate {
            tasks,
            candidate,
            reference,
            manifest,
            tau,
            strict,
            stratify_by,
            quality,
            format,
            name,
            out,
        } => c::evaluate(
            &cfg,
            &tasks,
            &c::EvalArgs {
                candidate,
                reference,
                manifest,
                tau,
                strict,
                stratify_by,
                quality,
                format,
                name,
                out,
            },
        ),
        Command::DetectOverpayment {
            tasks,
            manifest,
            labels,
            amount_key,
            epsilon,
            corpus_size,
            out,
            summary,
        } => c::detect_overpayment(
            &cfg,
            &tasks,
            &c::RiskArgs {
                manifest,
                labels,
                amount_key,
                epsilon,
                corpus_size,
                out,
                summary,
            },
        ),
        Command::EstimateCost {
            annual_docs,
            input_tokens,
            output_tokens,
            usage,
            student_input_tokens,
            student_output_tokens,
            out,
        } => c::estimate_cost(
            &cfg,
            &c::CostArgs {
                annual_docs,
                input_tokens,
                output_tokens,
                usage,
                student_input_tokens,
                student_output_tokens,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_format, cli.verbose);
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
