//! Overpayment detection: claimed amount versus amount read off the document.

use std::collections::HashMap;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Document;
use crate::parser::{detect_currency, normalize_amount, LabelStatus, ParsedLabel};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RiskError {
    #[error("claimed amount `{0}` is not a number")]
    UnparseableClaim(String),
    #[error("extracted amount `{0}` is not a number")]
    UnparseableExtraction(String),
    #[error("corpus of {corpus_size} is smaller than the {n_flags} flags")]
    CorpusTooSmall { corpus_size: u64, n_flags: usize },
}

/// Default tolerance, in currency units.
pub fn default_epsilon() -> Decimal {
    Decimal::new(1, 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverpaymentFlag {
    pub doc_id: String,
    pub claimed_amount: Decimal,
    pub extracted_amount: Decimal,
    /// `claimed_amount − extracted_amount`, always above epsilon.
    pub delta: Decimal,
    pub currency: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Flagged(OverpaymentFlag),
    Clear,
    /// The extraction was missing, refused or wrongly formatted.
    NoExtraction(LabelStatus),
    CurrencyMismatch { claimed: String, extracted: String },
}

fn parse_money(raw: &str) -> Option<Decimal> {
    let plain = normalize_amount(raw).ok()?;
    Decimal::from_str(&plain).ok()
}

/// `claimed_currency` is a hint from the manifest; a currency marker in the
/// claimed text itself takes precedence.
pub fn detect_overpayment(
    claimed: &str,
    claimed_currency: Option<&str>,
    extracted: &ParsedLabel,
    epsilon: Decimal,
) -> Result<Outcome, RiskError> {
    let claimed_amount = parse_money(claimed).ok_or_else(|| RiskError::UnparseableClaim(claimed.to_string()))?;
    if extracted.status != LabelStatus::Valid {
        return Ok(Outcome::NoExtraction(extracted.status));
    }
    let raw_value = extracted.value.as_deref().unwrap_or_default();
    let extracted_amount = Decimal::from_str(raw_value)
        .ok()
        .or_else(|| parse_money(raw_value))
        .ok_or_else(|| RiskError::UnparseableExtraction(raw_value.to_string()))?;

    let claimed_cur = detect_currency(claimed).or_else(|| claimed_currency.map(str::to_string));
    if let (Some(c), Some(e)) = (&claimed_cur, &extracted.currency) {
        if c != e {
            return Ok(Outcome::CurrencyMismatch {
                claimed: c.clone(),
                extracted: e.clone(),
            });
        }
    }
    let delta = claimed_amount - extracted_amount;
    if delta > epsilon {
        Ok(Outcome::Flagged(OverpaymentFlag {
            doc_id: extracted.doc_id.clone(),
            claimed_amount,
            extracted_amount,
            delta,
            currency: claimed_cur.or_else(|| extracted.currency.clone()),
        }))
    } else {
        Ok(Outcome::Clear)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub n_flags: usize,
    pub total_delta: Decimal,
    pub per_doc_risk: Decimal,
}

/// Sums deltas exactly; per-document risk spreads the total over the corpus.
pub fn aggregate_risk(flags: &[OverpaymentFlag], corpus_size: u64) -> Result<RiskSummary, RiskError> {
    if (corpus_size as u128) < flags.len() as u128 {
        return Err(RiskError::CorpusTooSmall {
            corpus_size,
            n_flags: flags.len(),
        });
    }
    let total_delta: Decimal = flags.iter().map(|f| f.delta).sum();
    let per_doc_risk = if corpus_size == 0 {
        Decimal::ZERO
    } else {
        (total_delta / Decimal::from(corpus_size)).normalize()
    };
    Ok(RiskSummary {
        n_flags: flags.len(),
        total_delta,
        per_doc_risk,
    })
}

/// Corpus-level tally of [`detect_overpayment`] outcomes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskScan {
    pub flags: Vec<OverpaymentFlag>,
    pub clear: usize,
    pub no_extraction: usize,
    pub currency_mismatch: usize,
    /// Documents without a claimed amount or extraction for the attribute.
    pub not_covered: usize,
    pub unparseable: Vec<(String, String)>,
}

/// Checks every document that has both a claimed amount under `amount_key`
/// and an extracted label for that attribute. Documents are visited in input order.
pub fn scan_documents(docs: &[Document], extracted: &[ParsedLabel], amount_key: &str, epsilon: Decimal) -> RiskScan {
    let by_doc: HashMap<&str, &ParsedLabel> = extracted
        .iter()
        .filter(|l| l.attribute_key == amount_key)
        .map(|l| (l.doc_id.as_str(), l))
        .collect();
    let mut scan = RiskScan::default();
    for doc in docs {
        let (Some(claimed), Some(label)) = (doc.claimed.get(amount_key), by_doc.get(doc.doc_id.as_str())) else {
            scan.not_covered += 1;
            continue;
        };
        match detect_overpayment(claimed, doc.currency.as_deref(), label, epsilon) {
            Ok(Outcome::Flagged(f)) => scan.flags.push(f),
            Ok(Outcome::Clear) => scan.clear += 1,
            Ok(Outcome::NoExtraction(_)) => scan.no_extraction += 1,
            Ok(Outcome::CurrencyMismatch { .. }) => scan.currency_mismatch += 1,
            Err(e) => scan.unparseable.push((doc.doc_id.clone(), e.to_string())),
        }
    }
    scan
}
