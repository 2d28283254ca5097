//! TOML config file. Every value is optional; flags and environment variables win.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rust_decimal::Decimal;
use serde::Deserialize;
use synthlabel::teacher::PricingModel;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub endpoint: EndpointSection,
    pub pricing: PricingSection,
    pub templates: TemplatesSection,
    pub thresholds: ThresholdsSection,
    pub seeds: SeedsSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub url: Option<String>,
    pub token_env: Option<String>,
    pub model: Option<String>,
    pub timeout_s: Option<f64>,
    pub max_payload_bytes: Option<usize>,
    pub max_attempts: Option<u32>,
    pub base_delay_ms: Option<u64>,
    pub jitter: Option<f64>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PricingSection {
    pub teacher: Option<PricingModel>,
    pub student: Option<PricingModel>,
    pub annual_docs: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesSection {
    pub single: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub phrases: Option<PathBuf>,
    pub json_example_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdsSection {
    pub tau: Option<f64>,
    pub normalize: Option<bool>,
    pub epsilon: Option<Decimal>,
    pub quality_bins: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub split: Option<u64>,
}

impl Config {
    /// Paths inside the file are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let t = &mut cfg.templates;
        for p in [&mut t.single, &mut t.json, &mut t.tasks, &mut t.phrases].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(url) = &cfg.endpoint.url {
            if let Some(rel) = url.strip_prefix("mock://") {
                if Path::new(rel).is_relative() {
                    cfg.endpoint.url = Some(format!("mock://{}", base.join(rel).display()));
                }
            }
        }
        Ok(cfg)
    }
}
