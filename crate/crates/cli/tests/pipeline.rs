use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_synthlabel"));
    for var in [
        "SYNTHLABEL_CONFIG",
        "SYNTHLABEL_ENDPOINT",
        "SYNTHLABEL_PARALLELISM",
        "SYNTHLABEL_SEED",
        "SYNTHLABEL_TAU",
        "SYNTHLABEL_EPSILON",
    ] {
        c.env_remove(var);
    }
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct Receipt {
    id: &'static str,
    vendor: &'static str,
    claimed: [&'static str; 3],
    answers: [&'static str; 3],
    sharp: bool,
}

const RECEIPTS: [Receipt; 4] = [
    Receipt {
        id: "r1",
        vendor: "Uber",
        claimed: ["Airport T5", "6.67", "20190322"],
        answers: ["Heathrow Airport", "6.67", "20190322"],
        sharp: true,
    },
    Receipt {
        id: "r2",
        vendor: "Lyft",
        claimed: ["meal Nampa", "2.6", "20190401"],
        answers: ["Holy Cow!", "2.60", "20190401"],
        sharp: false,
    },
    Receipt {
        id: "r3",
        vendor: "Uber",
        claimed: ["Hotel Berlin", "600", "20230105"],
        answers: ["Hotel Berlin", "321.64 EUR", "20230105"],
        sharp: true,
    },
    Receipt {
        id: "r4",
        vendor: "Lyft",
        claimed: ["Cafe", "12.00", "20230301"],
        answers: ["I'm sorry, I can't read this.", "None", "Based on the receipt, 1 March 2023"],
        sharp: false,
    },
];

const TASKS: [&str; 3] = ["merchant_name", "amount", "date"];

/// Writes images, a manifest and mock fixtures into `dir`.
fn corpus(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir.join("img")).unwrap();
    let mut manifest = String::new();
    let mut fixtures = String::new();
    for r in &RECEIPTS {
        let img = RgbImage::from_fn(24, 16, |x, y| {
            let v = if r.sharp {
                if (x / 2 + y / 2) % 2 == 0 { 0 } else { 255 }
            } else {
                (100 + x) as u8
            };
            Rgb([v, v, v])
        });
        img.save(dir.join(format!("img/{}.png", r.id))).unwrap();
        let claimed: serde_json::Map<String, Value> =
            TASKS.iter().zip(r.claimed).map(|(k, v)| (k.to_string(), json!(v))).collect();
        manifest += &json!({"doc_id": r.id, "image": format!("img/{}.png", r.id), "claimed": claimed, "vendor": r.vendor})
            .to_string();
        manifest.push('\n');
        for (task, answer) in TASKS.iter().zip(r.answers) {
            fixtures += &json!({"doc_id": r.id, "task": task, "response": answer}).to_string();
            fixtures.push('\n');
        }
    }
    fs::write(dir.join("manifest.jsonl"), manifest).unwrap();
    fs::write(dir.join("fixtures.jsonl"), fixtures).unwrap();
    dir.join("manifest.jsonl")
}

#[test]
fn pipeline_composes_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);

    for out in ["a1.jsonl", "a2.jsonl"] {
        let o = run(
            d,
            &["annotate", "--manifest", "manifest.jsonl", "--endpoint", "mock://fixtures.jsonl", "--out", out],
        );
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(fs::read(d.join("a1.jsonl")).unwrap(), fs::read(d.join("a2.jsonl")).unwrap());
    let ann = lines(&d.join("a1.jsonl"));
    assert_eq!(ann.len(), 12);
    assert!(ann[0]["prompt"].as_str().unwrap().contains("merchant name"));

    let o = run(
        d,
        &[
            "parse",
            "--annotations",
            "a1.jsonl",
            "--out",
            "parsed.jsonl",
            "--labels-out",
            "labels.jsonl",
            "--adherence-out",
            "adherence.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let parsed = lines(&d.join("parsed.jsonl"));
    let status = |doc: &str, key: &str| {
        parsed
            .iter()
            .find(|p| p["doc_id"] == doc && p["attribute_key"] == key)
            .map(|p| p["status"].as_str().unwrap().to_string())
            .unwrap()
    };
    assert_eq!(status("r4", "merchant_name"), "Refusal");
    assert_eq!(status("r4", "amount"), "Missing");
    assert_eq!(status("r4", "date"), "WrongFormat");
    let adherence: Value = serde_json::from_slice(&fs::read(d.join("adherence.json")).unwrap()).unwrap();
    assert_eq!(adherence["refusal_rate"], "1/12");

    for dir in ["ds1", "ds2"] {
        let o = run(
            d,
            &[
                "build-dataset",
                "--manifest",
                "manifest.jsonl",
                "--labels",
                "parsed.jsonl",
                "--annotations",
                "a1.jsonl",
                "--train-n",
                "6",
                "--seed",
                "3",
                "--out-dir",
                dir,
            ],
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["train.jsonl", "val.jsonl", "build_report.json"] {
        assert_eq!(fs::read(d.join("ds1").join(f)).unwrap(), fs::read(d.join("ds2").join(f)).unwrap());
    }
    let report: Value = serde_json::from_slice(&fs::read(d.join("ds1/build_report.json")).unwrap()).unwrap();
    assert_eq!(report["excluded"], 2);
    assert_eq!(report["records"], 10);
    assert_eq!(report["train"].as_u64().unwrap() + report["val"].as_u64().unwrap(), 10);
    let train = lines(&d.join("ds1/train.jsonl"));
    assert!(train[0]["conversations"][0]["value"].as_str().unwrap().starts_with("<image>\n"));

    let o = run(d, &["evaluate", "--candidate", "labels.jsonl", "--reference", "labels.jsonl"]);
    assert_eq!(o.status.code(), Some(0));
    let ev: Value = serde_json::from_slice(&o.stdout).unwrap();
    for r in ev["reports"].as_array().unwrap() {
        assert_eq!(r["score"], 1.0);
    }

    let o = run(
        d,
        &[
            "evaluate",
            "--candidate",
            "labels.jsonl",
            "--manifest",
            "manifest.jsonl",
            "--stratify-by",
            "vendor",
            "--format",
            "table",
            "--name",
            "teacher",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("teacher"), "{table}");
    assert!(table.contains("Lyft") && table.contains("Uber"), "{table}");
    assert!(table.contains("merchant_name (ANLS)"));

    let o = run(
        d,
        &["evaluate", "--candidate", "labels.jsonl", "--manifest", "manifest.jsonl", "--stratify-by", "quality", "--format", "table"],
    );
    assert_eq!(o.status.code(), Some(0));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("B1") && table.contains("B5"), "{table}");

    let o = run(
        d,
        &["detect-overpayment", "--manifest", "manifest.jsonl", "--labels", "parsed.jsonl", "--summary", "risk.json"],
    );
    assert_eq!(o.status.code(), Some(0));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv, "doc_id,claimed_amount,extracted_amount,delta,currency\nr3,600,321.64,278.36,EUR\n");
    let risk: Value = serde_json::from_slice(&fs::read(d.join("risk.json")).unwrap()).unwrap();
    assert_eq!(risk["n_flags"], 1);
    assert_eq!(risk["per_doc_risk"], "69.59");
    assert_eq!(risk["no_extraction"], 1);

    let o = run(d, &["quality", "--manifest", "manifest.jsonl", "--parallelism", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let q: Vec<Value> = String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(q.len(), 4);
    assert_eq!(q[0]["doc_id"], "r1");
    assert_eq!(q[0]["bin"], "B5");
    assert_eq!(q[1]["bin"], "B1");
    assert!(q[1]["variance"].as_f64().unwrap() < 1e-9);
}

#[test]
fn failures_exit_one_and_fatal_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    let mut fixtures = fs::read_to_string(d.join("fixtures.jsonl")).unwrap();
    fixtures = fixtures.replace(
        r#"{"doc_id":"r2","response":"2.60","task":"amount"}"#,
        r#"{"doc_id":"r2","task":"amount","always_fail":true,"fail_with":"rate_limited"}"#,
    );
    fs::write(d.join("fixtures.jsonl"), fixtures).unwrap();
    fs::write(d.join("cfg.toml"), "[endpoint]\nbase_delay_ms = 0\n").unwrap();
    let o = run(
        d,
        &[
            "--config",
            "cfg.toml",
            "annotate",
            "--manifest",
            "manifest.jsonl",
            "--endpoint",
            "mock://fixtures.jsonl",
            "--out",
            "a.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let failed: Vec<Value> = lines(&d.join("a.jsonl")).into_iter().filter(|l| l.get("error").is_some()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["attempt_count"], 3);
    assert_eq!(failed[0]["error"]["kind"], "rate_limited");

    let o = run(d, &["parse", "--annotations", "a.jsonl", "--out", "p.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(
        d,
        &["build-dataset", "--manifest", "manifest.jsonl", "--labels", "p.jsonl", "--out-dir", "ds"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no annotation for document `r2`"));
    let o = run(
        d,
        &["build-dataset", "--manifest", "manifest.jsonl", "--labels", "p.jsonl", "--out-dir", "ds", "--skip-unannotated"],
    );
    assert_eq!(o.status.code(), Some(1));

    let o = run(d, &["quality", "--manifest", "nope.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d, &["annotate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d, &["annotate", "--manifest", "manifest.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_beat_env_beat_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    fs::write(d.join("other.jsonl"), "").unwrap();
    fs::write(d.join("cfg.toml"), "[endpoint]\nurl = \"mock://missing.jsonl\"\n").unwrap();
    let annotate = |extra: &[&str], env: Option<&str>| {
        let mut c = bin();
        c.current_dir(d).args(["--config", "cfg.toml", "annotate", "--manifest", "manifest.jsonl", "--out", "a.jsonl"]);
        c.args(extra);
        if let Some(e) = env {
            c.env("SYNTHLABEL_ENDPOINT", e);
        }
        c.output().unwrap().status.code()
    };
    // Config alone names a file that does not exist.
    assert_eq!(annotate(&[], None), Some(2));
    // Env overrides config; the empty fixture table fails every item.
    assert_eq!(annotate(&[], Some("mock://other.jsonl")), Some(1));
    // Flag overrides env.
    assert_eq!(annotate(&["--endpoint", "mock://fixtures.jsonl"], Some("mock://other.jsonl")), Some(0));
}

#[test]
fn cost_estimate_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("cfg.toml"),
        r#"
[pricing]
annual_docs = 1000000
[pricing.teacher]
input_price_per_1k_tokens = "0.003"
output_price_per_1k_tokens = "0.015"
docs_per_second = "0.3"
[pricing.student]
input_price_per_1k_tokens = "0.00048"
output_price_per_1k_tokens = "0"
fixed_labeling_cost = "48"
docs_per_second = "1.5"
"#,
    )
    .unwrap();
    let o = run(
        d,
        &["--config", "cfg.toml", "estimate-cost", "--input-tokens", "1500", "--output-tokens", "20"],
    );
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["baseline_cost"], "4800");
    assert_eq!(v["candidate_cost"], "768");
    assert_eq!(v["cost_ratio"], "0.16");
    assert_eq!(v["savings_percent"], "84");
    assert_eq!(v["speed_ratio"], "5");
    let o = run(d, &["estimate-cost", "--annual-docs", "5"]);
    assert_eq!(o.status.code(), Some(2));
}
