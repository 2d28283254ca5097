//! Classification and normalisation of raw model output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{AttributeSpec, OutputMode, TaskSpec, ValueFormat};

/// Longest answer (in words) still accepted as a short free-text value.
pub const MAX_SHORT_WORDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelStatus {
    Valid,
    Missing,
    Refusal,
    WrongFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    pub doc_id: String,
    /// Task that produced the label (attribute key, or `json_all`).
    pub task_key: String,
    pub attribute_key: String,
    pub status: LabelStatus,
    /// Normalised value, present iff `status` is `Valid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    /// ISO code of a currency marker seen in an amount answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub currency: Option<String>,
    /// JSON salvaged from surrounding prose.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub recovered: bool,
}

/// Outcome of classifying one answer, before it is tied to a document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classified {
    pub status: LabelStatus,
    pub value: Option<String>,
    pub currency: Option<String>,
}

impl Classified {
    fn of(status: LabelStatus) -> Self {
        Self {
            status,
            value: None,
            currency: None,
        }
    }

    pub fn into_label(self, doc_id: &str, task_key: &str, attribute_key: &str) -> ParsedLabel {
        ParsedLabel {
            doc_id: doc_id.to_string(),
            task_key: task_key.to_string(),
            attribute_key: attribute_key.to_string(),
            status: self.status,
            value: self.value,
            currency: self.currency,
            recovered: false,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("not an amount: `{0}`")]
    NotAnAmount(String),
    #[error("not a yyyymmdd date: `{0}`")]
    NotADate(String),
    #[error("no JSON object found in `{0}`")]
    NoJsonFound(String),
}

/// Prefix lists that decide refusals and chatty answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseLists {
    pub refusal: Vec<String>,
    pub preamble: Vec<String>,
}

impl Default for PhraseLists {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            refusal: s(&[
                "I cannot",
                "I can't",
                "I can not",
                "I'm sorry",
                "I am sorry",
                "Sorry,",
                "As an AI",
                "I'm unable",
                "I am unable",
                "I won't",
            ]),
            preamble: s(&[
                "Based on",
                "Sure",
                "Here is",
                "Here's",
                "It seems",
                "It looks like",
                "According to",
                "The image",
                "The invoice",
                "The receipt",
                "This invoice",
                "This receipt",
            ]),
        }
    }
}

impl PhraseLists {
    /// Reads a plain-text list: `refusal: <phrase>` / `preamble: <phrase>` per line,
    /// bare lines count as refusals, `#` starts a comment.
    pub fn from_text(text: &str) -> Self {
        let mut out = Self {
            refusal: Vec::new(),
            preamble: Vec::new(),
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(p) = line.strip_prefix("preamble:") {
                out.preamble.push(p.trim().to_string());
            } else {
                let p = line.strip_prefix("refusal:").unwrap_or(line);
                out.refusal.push(p.trim().to_string());
            }
        }
        out
    }
}

/// Case-insensitive prefix match that ends on a word boundary.
fn starts_with_phrase(text: &str, phrase: &str) -> bool {
    let n = phrase.len();
    n > 0
        && text.len() >= n
        && text.is_char_boundary(n)
        && text[..n].eq_ignore_ascii_case(phrase)
        && (!phrase.ends_with(char::is_alphanumeric)
            || !text[n..].starts_with(char::is_alphanumeric))
}

/// Classifies raw model output against an attribute's output contract.
#[derive(Debug, Clone, Default)]
pub struct Classifier {
    phrases: PhraseLists,
}

impl Classifier {
    pub fn new(phrases: PhraseLists) -> Self {
        Self { phrases }
    }

    pub fn phrases(&self) -> &PhraseLists {
        &self.phrases
    }

    fn is_refusal(&self, text: &str) -> bool {
        self.phrases.refusal.iter().any(|p| starts_with_phrase(text, p))
    }

    fn has_preamble(&self, text: &str) -> bool {
        self.phrases.preamble.iter().any(|p| starts_with_phrase(text, p))
    }

    pub fn classify(&self, raw: &str, attr: &AttributeSpec) -> Classified {
        let text = raw.trim();
        if text == attr.missing_token {
            return Classified::of(LabelStatus::Missing);
        }
        if self.is_refusal(text) {
            return Classified::of(LabelStatus::Refusal);
        }
        if self.has_preamble(text) {
            return Classified::of(LabelStatus::WrongFormat);
        }
        match validate_format(text, attr.format) {
            Some(value) => Classified {
                status: LabelStatus::Valid,
                currency: (attr.format == ValueFormat::AmountPlain)
                    .then(|| detect_currency(text))
                    .flatten(),
                value: Some(value),
            },
            None => Classified::of(LabelStatus::WrongFormat),
        }
    }

    pub fn classify_label(
        &self,
        raw: &str,
        attr: &AttributeSpec,
        doc_id: &str,
        task_key: &str,
    ) -> ParsedLabel {
        self.classify(raw, attr).into_label(doc_id, task_key, &attr.key)
    }

    /// Pulls the first JSON object out of `raw` and classifies each task key.
    pub fn parse_json_labels(
        &self,
        raw: &str,
        task: &TaskSpec,
        doc_id: &str,
    ) -> Result<JsonLabels, ParseError> {
        let extracted = extract_json_object(raw).ok_or_else(|| ParseError::NoJsonFound(raw.to_string()))?;
        let recovered = extracted.had_surrounding_text;
        let object = extracted.object;
        let unknown_keys: Vec<String> = object
            .keys()
            .filter(|k| task.attribute(k).is_none())
            .cloned()
            .collect();
        for k in &unknown_keys {
            tracing::warn!(doc_id, key = %k, "unknown key in JSON answer ignored");
        }
        let task_key = task.task_key();
        let labels = task
            .attributes()
            .iter()
            .map(|attr| {
                let classified = match object.get(&attr.key) {
                    None | Some(Value::Null) => Classified::of(LabelStatus::Missing),
                    Some(Value::String(s)) => self.classify(s, attr),
                    Some(v @ (Value::Object(_) | Value::Array(_))) => {
                        if attr.format == ValueFormat::Verbatim {
                            Classified {
                                status: LabelStatus::Valid,
                                value: Some(v.to_string()),
                                currency: None,
                            }
                        } else {
                            Classified::of(LabelStatus::WrongFormat)
                        }
                    }
                    Some(other) => self.classify(&other.to_string(), attr),
                };
                let mut label = classified.into_label(doc_id, task_key, &attr.key);
                label.recovered = recovered;
                (attr.key.clone(), label)
            })
            .collect();
        Ok(JsonLabels {
            labels,
            recovered,
            unknown_keys,
            object,
        })
    }
}

impl Classifier {
    /// Labels for every attribute of `task` from one raw answer. An answer with
    /// no JSON object marks every attribute of a JSON task as wrongly formatted.
    pub fn labels_for_task(&self, raw: &str, task: &TaskSpec, doc_id: &str) -> Vec<ParsedLabel> {
        match task.output_mode() {
            OutputMode::Single => {
                vec![self.classify_label(raw, &task.attributes()[0], doc_id, task.task_key())]
            }
            OutputMode::Json => match self.parse_json_labels(raw, task, doc_id) {
                Ok(parsed) => parsed.labels.into_values().collect(),
                Err(_) => task
                    .attributes()
                    .iter()
                    .map(|a| {
                        Classified::of(LabelStatus::WrongFormat).into_label(doc_id, task.task_key(), &a.key)
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsonLabels {
    pub labels: BTreeMap<String, ParsedLabel>,
    /// The object was surrounded by prose (a wrongly formatted answer that was salvaged).
    pub recovered: bool,
    pub unknown_keys: Vec<String>,
    pub object: serde_json::Map<String, Value>,
}

/// Checks `text` against a format, returning the normalised value.
pub fn validate_format(text: &str, format: ValueFormat) -> Option<String> {
    match format {
        ValueFormat::FreeTextShort => {
            let words = text.split_whitespace().count();
            (words > 0 && words <= MAX_SHORT_WORDS && !text.contains('\n')).then(|| text.to_string())
        }
        ValueFormat::AmountPlain => normalize_amount(text).ok(),
        ValueFormat::DateYyyymmdd => validate_date(text).ok(),
        ValueFormat::Verbatim => (!text.is_empty()).then(|| text.to_string()),
    }
}

struct Extracted {
    object: serde_json::Map<String, Value>,
    had_surrounding_text: bool,
}

/// End index (exclusive) of the balanced `{...}` starting at `start`, string-aware.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn extract_json_object(raw: &str) -> Option<Extracted> {
    for (start, _) in raw.match_indices('{') {
        let Some(end) = balanced_end(raw, start) else { continue };
        if let Ok(Value::Object(object)) = serde_json::from_str::<Value>(&raw[start..end]) {
            let had_surrounding_text =
                !raw[..start].trim().is_empty() || !raw[end..].trim().is_empty();
            return Some(Extracted {
                object,
                had_surrounding_text,
            });
        }
    }
    None
}

fn is_currency_symbol(c: char) -> bool {
    matches!(
        c,
        '$' | '€' | '£' | '¥' | '₹' | '₩' | '₽' | '₺' | '₫' | '₪' | '฿' | '¢' | '₱' | '₦' | '₴' | '₡' | '₲' | '₵' | '₸' | '៛'
    )
}

fn is_group_separator(c: char) -> bool {
    matches!(c, ' ' | '\u{a0}' | '\u{202f}' | '\'')
}

/// Strips a currency affix: symbols, whitespace and at most three letters
/// (ISO code, `Rp`, `kr`, ...), optionally ending in `.` after letters.
fn strip_affix(s: &str, from_start: bool) -> Option<&str> {
    let is_affix = |c: char| c.is_alphabetic() || is_currency_symbol(c) || c.is_whitespace() || c == '.';
    let boundary = if from_start {
        s.char_indices()
            .find(|&(_, c)| !is_affix(c))
            .map_or(s.len(), |(i, _)| i)
    } else {
        s.char_indices()
            .rev()
            .find(|&(_, c)| !is_affix(c))
            .map_or(0, |(i, c)| i + c.len_utf8())
    };
    let (affix, rest) = if from_start {
        (&s[..boundary], &s[boundary..])
    } else {
        (&s[boundary..], &s[..boundary])
    };
    let letters = affix.chars().filter(|c| c.is_alphabetic()).count();
    if letters > 3 {
        return None;
    }
    // A dot only belongs to the affix when it closes an abbreviation ("Rs.").
    let affix_chars = affix.chars().filter(|c| !c.is_whitespace());
    let mut prev: Option<char> = None;
    for c in affix_chars {
        if c == '.' && !prev.is_some_and(char::is_alphabetic) {
            return None;
        }
        prev = Some(c);
    }
    Some(rest)
}

/// Normalises an amount to plain decimal digits with `.` as decimal mark.
///
/// Currency symbols and codes and thousands separators are removed. When both
/// `.` and `,` occur the last one is the decimal mark. A lone comma followed by
/// exactly three digits is a thousands separator, otherwise it is decimal. A
/// lone dot is always decimal. Given decimal digits are kept as written.
pub fn normalize_amount(raw: &str) -> Result<String, ParseError> {
    let err = || ParseError::NotAnAmount(raw.to_string());
    let mut s = raw.trim();
    let mut negative = false;
    if let Some(rest) = s.strip_prefix('-') {
        negative = true;
        s = rest.trim_start();
    }
    s = strip_affix(s, true).ok_or_else(err)?;
    if !negative {
        if let Some(rest) = s.strip_prefix('-') {
            negative = true;
            s = rest;
        }
    }
    s = strip_affix(s, false).ok_or_else(err)?.trim();
    if s.is_empty()
        || !s.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',' || is_group_separator(c))
        || !s.chars().last().is_some_and(|c| c.is_ascii_digit())
    {
        return Err(err());
    }
    // Group separators must sit between digits.
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if is_group_separator(c)
            && !(i > 0 && chars[i - 1].is_ascii_digit() && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()))
        {
            return Err(err());
        }
    }
    let compact: String = chars.into_iter().filter(|c| !is_group_separator(*c)).collect();

    let last_dot = compact.rfind('.');
    let last_comma = compact.rfind(',');
    let decimal_mark = match (last_dot, last_comma) {
        (Some(d), Some(c)) => Some(if d > c { '.' } else { ',' }),
        (Some(_), None) => (compact.matches('.').count() == 1).then_some('.'),
        (None, Some(c)) => {
            let single = compact.matches(',').count() == 1;
            let trailing = compact.len() - c - 1;
            (single && trailing != 3).then_some(',')
        }
        (None, None) => None,
    };
    let (int_part, frac_part) = match decimal_mark {
        Some(mark) => {
            let pos = compact.rfind(mark).unwrap();
            (&compact[..pos], Some(&compact[pos + 1..]))
        }
        None => (compact.as_str(), None),
    };
    if let Some(f) = frac_part {
        if f.is_empty() || !f.chars().all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
    }
    let digits = check_groups(int_part).ok_or_else(err)?;
    let int_digits = digits.trim_start_matches('0');
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    out.push_str(if int_digits.is_empty() { "0" } else { int_digits });
    if let Some(f) = frac_part {
        out.push('.');
        out.push_str(f);
    }
    Ok(out)
}

/// Validates thousands grouping in an integer part and returns its digits.
fn check_groups(int_part: &str) -> Option<String> {
    if int_part.is_empty() {
        return Some(String::new());
    }
    let groups: Vec<&str> = int_part.split(['.', ',']).collect();
    if groups.len() > 1 {
        let sep_kinds = int_part.chars().filter(|c| *c == '.' || *c == ',').collect::<std::collections::HashSet<_>>();
        if sep_kinds.len() > 1 {
            return None;
        }
        let first_ok = (1..=3).contains(&groups[0].len());
        if !first_ok || groups[1..].iter().any(|g| g.len() != 3) {
            return None;
        }
    }
    if groups.iter().any(|g| g.is_empty() || !g.chars().all(|c| c.is_ascii_digit())) {
        return None;
    }
    Some(groups.concat())
}

/// ISO-4217 code for a currency marker in an amount answer, if recognisable.
pub fn detect_currency(raw: &str) -> Option<String> {
    let symbols = [
        ('€', "EUR"),
        ('£', "GBP"),
        ('¥', "JPY"),
        ('₹', "INR"),
        ('₩', "KRW"),
        ('₽', "RUB"),
        ('₺', "TRY"),
        ('₫', "VND"),
        ('₪', "ILS"),
        ('฿', "THB"),
        ('₱', "PHP"),
    ];
    for (sym, code) in symbols {
        if raw.contains(sym) {
            return Some(code.to_string());
        }
    }
    let words: Vec<&str> = raw
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .collect();
    for w in words {
        if w == "Rp" {
            return Some("IDR".into());
        }
        if w.len() == 3 && w.chars().all(|c| c.is_ascii_uppercase()) {
            return Some(w.to_string());
        }
    }
    None
}

fn is_leap(year: u32) -> bool {
    (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400)
}

fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap(year) => 29,
        2 => 28,
        _ => 0,
    }
}

/// Accepts exactly eight digits naming a real Gregorian date (year ≥ 1).
pub fn validate_date(raw: &str) -> Result<String, ParseError> {
    let err = || ParseError::NotADate(raw.to_string());
    if raw.len() != 8 || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    let year: u32 = raw[..4].parse().map_err(|_| err())?;
    let month: u32 = raw[4..6].parse().map_err(|_| err())?;
    let day: u32 = raw[6..].parse().map_err(|_| err())?;
    if year == 0 || day == 0 || day > days_in_month(year, month) {
        return Err(err());
    }
    Ok(raw.to_string())
}
