//! Teacher-model endpoint driver with retries, usage accounting and cost estimates.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Document, ImageRef};
use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum EndpointError {
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("rate limited")]
    RateLimited,
    #[error("payload too large")]
    PayloadTooLarge,
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("image unavailable: {0}")]
    Image(String),
}

impl EndpointError {
    /// Errors worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::EndpointUnreachable(_) | Self::RateLimited)
    }
}

/// One request to the teacher: prompt text plus the document image.
#[derive(Debug, Clone, Copy)]
pub struct EndpointRequest<'a> {
    pub doc_id: &'a str,
    pub task_key: &'a str,
    pub prompt: &'a str,
    pub image: &'a ImageRef,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EndpointReply {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
    /// Endpoint-reported latency; wall clock is used when absent.
    pub latency: Option<Duration>,
}

/// Anything that maps (text, image) to text.
pub trait TeacherEndpoint: Send + Sync {
    fn complete(&self, request: &EndpointRequest<'_>) -> Result<EndpointReply, EndpointError>;
}

impl<E: TeacherEndpoint + ?Sized> TeacherEndpoint for Box<E> {
    fn complete(&self, request: &EndpointRequest<'_>) -> Result<EndpointReply, EndpointError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the first retry; doubles each retry.
    pub base_delay: Duration,
    /// Relative jitter, e.g. 0.2 for ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            jitter: 0.0,
        }
    }

    /// Sleep before retry number `retry` (0-based): base·2^retry, jittered.
    pub fn backoff<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * f64::from(1u32 << retry.min(16));
        let factor = if self.jitter > 0.0 {
            1.0 + rng.random_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * factor).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub doc_id: String,
    pub task_key: String,
    /// Model output exactly as returned.
    pub raw_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_s: f64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{doc_id}/{task_key}: {error} after {attempt_count} attempt(s)")]
pub struct AnnotationFailure {
    pub doc_id: String,
    pub task_key: String,
    pub error: EndpointError,
    pub attempt_count: u32,
}

pub type AnnotationOutcome = Result<AnnotationResponse, AnnotationFailure>;

/// Rough token count for text when the endpoint reports none.
pub fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub requests: u64,
    pub successes: u64,
    pub failures: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Default)]
pub struct UsageLedger {
    inner: Mutex<UsageTotals>,
}

impl UsageLedger {
    fn record_attempt(&self) {
        self.inner.lock().unwrap().requests += 1;
    }

    fn record(&self, outcome: &AnnotationOutcome) {
        let mut t = self.inner.lock().unwrap();
        match outcome {
            Ok(r) => {
                t.successes += 1;
                t.input_tokens += r.input_tokens;
                t.output_tokens += r.output_tokens;
            }
            Err(_) => t.failures += 1,
        }
    }

    pub fn totals(&self) -> UsageTotals {
        *self.inner.lock().unwrap()
    }
}

/// Drives a [`TeacherEndpoint`] under a retry policy.
pub struct Annotator<E> {
    endpoint: E,
    policy: RetryPolicy,
    ledger: UsageLedger,
}

impl<E: TeacherEndpoint> Annotator<E> {
    pub fn new(endpoint: E, policy: RetryPolicy) -> Self {
        Self {
            endpoint,
            policy,
            ledger: UsageLedger::default(),
        }
    }

    pub fn endpoint(&self) -> &E {
        &self.endpoint
    }

    pub fn usage(&self) -> UsageTotals {
        self.ledger.totals()
    }

    pub fn annotate(&self, doc: &Document, prompt: &RenderedPrompt) -> AnnotationOutcome {
        let outcome = self.annotate_inner(doc, prompt);
        self.ledger.record(&outcome);
        outcome
    }

    fn annotate_inner(&self, doc: &Document, prompt: &RenderedPrompt) -> AnnotationOutcome {
        let request = EndpointRequest {
            doc_id: &doc.doc_id,
            task_key: &prompt.task_key,
            prompt: &prompt.text,
            image: &doc.image,
        };
        let max_attempts = self.policy.max_attempts.max(1);
        let mut rng = rand::rng();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.ledger.record_attempt();
            let started = Instant::now();
            match self.endpoint.complete(&request) {
                Ok(reply) => {
                    let latency = reply.latency.unwrap_or_else(|| started.elapsed());
                    return Ok(AnnotationResponse {
                        doc_id: doc.doc_id.clone(),
                        task_key: prompt.task_key.clone(),
                        input_tokens: reply
                            .input_tokens
                            .unwrap_or_else(|| approx_tokens(&prompt.text)),
                        output_tokens: reply
                            .output_tokens
                            .unwrap_or_else(|| approx_tokens(&reply.text)),
                        raw_text: reply.text,
                        latency_s: latency.as_secs_f64(),
                        attempt_count: attempt,
                    });
                }
                Err(e) if e.is_transient() && attempt < max_attempts => {
                    tracing::debug!(doc_id = %doc.doc_id, attempt, error = %e, "retrying");
                    let wait = self.policy.backoff(attempt - 1, &mut rng);
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                }
                Err(error) => {
                    return Err(AnnotationFailure {
                        doc_id: doc.doc_id.clone(),
                        task_key: prompt.task_key.clone(),
                        error,
                        attempt_count: attempt,
                    })
                }
            }
        }
    }

    /// Annotates every job with at most `parallelism` requests in flight.
    /// Results come back in job order; failures are embedded per item.
    pub fn batch_annotate(
        &self,
        jobs: &[(&Document, &RenderedPrompt)],
        parallelism: usize,
    ) -> Vec<AnnotationOutcome> {
        let workers = parallelism.max(1).min(jobs.len());
        if workers <= 1 {
            return jobs.iter().map(|(d, p)| self.annotate(d, p)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<AnnotationOutcome>>> = Mutex::new(vec![None; jobs.len()]);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some((doc, prompt)) = jobs.get(i) else { break };
                    let outcome = self.annotate(doc, prompt);
                    slots.lock().unwrap()[i] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|o| o.expect("every job visited"))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Mock endpoint

/// One canned reply. `task` narrows the match to a single task key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixture {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    /// Reported latency; keeps outputs reproducible.
    #[serde(default)]
    pub latency_ms: u64,
    /// Real time the mock blocks before replying.
    #[serde(default)]
    pub sleep_ms: u64,
    /// Transient failures before the first success.
    #[serde(default)]
    pub fail_first: u32,
    /// Error kind used for failures: `unreachable`, `rate_limited`, `payload_too_large`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_with: Option<String>,
    #[serde(default)]
    pub always_fail: bool,
}

/// Deterministic endpoint backed by a fixture table.
#[derive(Debug, Default)]
pub struct MockEndpoint {
    fixtures: HashMap<(String, Option<String>), MockFixture>,
    calls: Mutex<HashMap<(String, String), u32>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockEndpoint {
    pub fn new(fixtures: impl IntoIterator<Item = MockFixture>) -> Self {
        Self {
            fixtures: fixtures
                .into_iter()
                .map(|f| ((f.doc_id.clone(), f.task.clone()), f))
                .collect(),
            ..Default::default()
        }
    }

    pub fn from_jsonl(path: &Path) -> io::Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut fixtures = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: MockFixture = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("fixture line {}: {e}", i + 1))
            })?;
            fixtures.push(f);
        }
        Ok(Self::new(fixtures))
    }

    /// Highest number of concurrent calls observed so far.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn lookup(&self, doc_id: &str, task_key: &str) -> Option<&MockFixture> {
        self.fixtures
            .get(&(doc_id.to_string(), Some(task_key.to_string())))
            .or_else(|| self.fixtures.get(&(doc_id.to_string(), None)))
    }

    fn failure(kind: Option<&str>) -> EndpointError {
        match kind {
            Some("rate_limited") => EndpointError::RateLimited,
            Some("payload_too_large") => EndpointError::PayloadTooLarge,
            Some(other) if other != "unreachable" => EndpointError::Rejected(other.to_string()),
            _ => EndpointError::EndpointUnreachable("mock failure".into()),
        }
    }
}

impl TeacherEndpoint for MockEndpoint {
    fn complete(&self, req: &EndpointRequest<'_>) -> Result<EndpointReply, EndpointError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = (|| {
            let fixture = self.lookup(req.doc_id, req.task_key).ok_or_else(|| {
                EndpointError::Rejected(format!("no fixture for {}/{}", req.doc_id, req.task_key))
            })?;
            let call_no = {
                let mut calls = self.calls.lock().unwrap();
                let n = calls
                    .entry((req.doc_id.to_string(), req.task_key.to_string()))
                    .or_insert(0);
                *n += 1;
                *n
            };
            if fixture.sleep_ms > 0 {
                thread::sleep(Duration::from_millis(fixture.sleep_ms));
            }
            if fixture.always_fail || call_no <= fixture.fail_first {
                return Err(Self::failure(fixture.fail_with.as_deref()));
            }
            Ok(EndpointReply {
                text: fixture.response.clone(),
                input_tokens: fixture.input_tokens,
                output_tokens: fixture.output_tokens,
                latency: Some(Duration::from_millis(fixture.latency_ms)),
            })
        })();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

// ---------------------------------------------------------------------------
// HTTP endpoint

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// `mock://<fixtures.jsonl>` or an `http(s)://` URL.
    pub url: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default)]
    pub max_payload_bytes: Option<usize>,
}

fn default_timeout() -> f64 {
    60.0
}

/// Request body posted to an HTTP teacher.
#[derive(Debug, Serialize, Deserialize)]
pub struct HttpRequestBody<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub image: HttpImage,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HttpImage {
    pub media_type: String,
    /// Base64 payload.
    pub data: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HttpReplyBody {
    pub text: String,
    #[serde(default)]
    pub usage: Option<HttpUsage>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HttpUsage {
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

/// JSON-over-HTTP teacher. Posts [`HttpRequestBody`], expects [`HttpReplyBody`].
pub struct HttpEndpoint {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    model: String,
    max_payload_bytes: Option<usize>,
}

impl HttpEndpoint {
    pub fn new(cfg: &EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s.max(0.001))))
            .build()
            .into();
        Self {
            agent,
            url: cfg.url.clone(),
            token: cfg.token_env.as_ref().and_then(|v| std::env::var(v).ok()),
            model: cfg.model.clone(),
            max_payload_bytes: cfg.max_payload_bytes,
        }
    }
}

fn map_ureq_error(e: ureq::Error) -> EndpointError {
    match e {
        ureq::Error::StatusCode(429) => EndpointError::RateLimited,
        ureq::Error::StatusCode(413) => EndpointError::PayloadTooLarge,
        ureq::Error::StatusCode(s) if s >= 500 => {
            EndpointError::EndpointUnreachable(format!("server error {s}"))
        }
        ureq::Error::StatusCode(s) => EndpointError::Rejected(format!("status {s}")),
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed => EndpointError::EndpointUnreachable(e.to_string()),
        other => EndpointError::Rejected(other.to_string()),
    }
}

impl TeacherEndpoint for HttpEndpoint {
    fn complete(&self, req: &EndpointRequest<'_>) -> Result<EndpointReply, EndpointError> {
        let bytes = req
            .image
            .read_bytes()
            .map_err(|e| EndpointError::Image(e.to_string()))?;
        if self.max_payload_bytes.is_some_and(|max| bytes.len() > max) {
            return Err(EndpointError::PayloadTooLarge);
        }
        let body = HttpRequestBody {
            model: &self.model,
            prompt: req.prompt,
            image: HttpImage {
                media_type: req.image.media_type(),
                data: BASE64.encode(&bytes),
            },
        };
        let mut call = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let started = Instant::now();
        let mut resp = call.send_json(&body).map_err(map_ureq_error)?;
        let reply: HttpReplyBody = resp
            .body_mut()
            .read_json()
            .map_err(|e| EndpointError::Rejected(format!("bad reply body: {e}")))?;
        let usage = reply.usage.unwrap_or(HttpUsage {
            input_tokens: None,
            output_tokens: None,
        });
        Ok(EndpointReply {
            text: reply.text,
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            latency: Some(started.elapsed()),
        })
    }
}

/// Builds the endpoint named by `cfg.url`.
pub fn connect(cfg: &EndpointConfig) -> io::Result<Box<dyn TeacherEndpoint>> {
    if let Some(path) = cfg.url.strip_prefix("mock://") {
        Ok(Box::new(MockEndpoint::from_jsonl(Path::new(path))?))
    } else if cfg.url.starts_with("http://") || cfg.url.starts_with("https://") {
        Ok(Box::new(HttpEndpoint::new(cfg)))
    } else {
        Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("unsupported endpoint url `{}`", cfg.url),
        ))
    }
}

// ---------------------------------------------------------------------------
// Cost accounting

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingModel {
    pub input_price_per_1k_tokens: Decimal,
    pub output_price_per_1k_tokens: Decimal,
    /// One-off costs such as labelling the training set.
    #[serde(default)]
    pub fixed_labeling_cost: Decimal,
    pub docs_per_second: Decimal,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("pricing field `{0}` is negative")]
pub struct NegativePrice(pub &'static str);

impl PricingModel {
    pub fn validate(&self) -> Result<(), NegativePrice> {
        for (name, v) in [
            ("input_price_per_1k_tokens", self.input_price_per_1k_tokens),
            ("output_price_per_1k_tokens", self.output_price_per_1k_tokens),
            ("fixed_labeling_cost", self.fixed_labeling_cost),
            ("docs_per_second", self.docs_per_second),
        ] {
            if v.is_sign_negative() && !v.is_zero() {
                return Err(NegativePrice(name));
            }
        }
        Ok(())
    }

    pub fn per_document_cost(&self, avg_tokens: (Decimal, Decimal)) -> Decimal {
        let thousand = Decimal::from(1000);
        avg_tokens.0 / thousand * self.input_price_per_1k_tokens
            + avg_tokens.1 / thousand * self.output_price_per_1k_tokens
    }
}

/// docs × per-document token cost + fixed labelling cost.
pub fn estimate_annual_cost(pricing: &PricingModel, annual_docs: u64, avg_tokens: (Decimal, Decimal)) -> Decimal {
    (Decimal::from(annual_docs) * pricing.per_document_cost(avg_tokens) + pricing.fixed_labeling_cost).normalize()
}

/// How a candidate deployment compares with a baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostComparison {
    pub baseline_cost: Decimal,
    pub candidate_cost: Decimal,
    /// candidate / baseline.
    pub cost_ratio: Decimal,
    /// (1 − cost_ratio) × 100.
    pub savings_percent: Decimal,
    /// candidate throughput / baseline throughput.
    pub speed_ratio: Decimal,
}

pub fn compare_costs(
    baseline: &PricingModel,
    baseline_cost: Decimal,
    candidate: &PricingModel,
    candidate_cost: Decimal,
) -> Option<CostComparison> {
    if baseline_cost.is_zero() || baseline.docs_per_second.is_zero() {
        return None;
    }
    let cost_ratio = (candidate_cost / baseline_cost).normalize();
    Some(CostComparison {
        baseline_cost,
        candidate_cost,
        cost_ratio,
        savings_percent: ((Decimal::ONE - cost_ratio) * Decimal::from(100)).normalize(),
        speed_ratio: (candidate.docs_per_second / baseline.docs_per_second).normalize(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::path::PathBuf;
    use std::str::FromStr;

    fn doc(id: &str) -> Document {
        Document {
            doc_id: id.into(),
            image: ImageRef::Inline {
                media_type: "image/png".into(),
                bytes: vec![1, 2, 3],
            },
            claimed: BTreeMap::new(),
            vendor: None,
            currency: None,
        }
    }

    fn prompt(task: &str) -> RenderedPrompt {
        RenderedPrompt {
            text: "Return the merchant name for this invoice.".into(),
            image_marker: "<image>".into(),
            task_key: task.into(),
        }
    }

    fn fixture(id: &str, response: &str) -> MockFixture {
        MockFixture {
            doc_id: id.into(),
            response: response.into(),
            ..Default::default()
        }
    }

    #[test]
    fn returns_raw_text_verbatim() {
        let a = Annotator::new(
            MockEndpoint::new([fixture("r1", "Heathrow Airport"), fixture("r2", "")]),
            RetryPolicy::immediate(3),
        );
        let r = a.annotate(&doc("r1"), &prompt("merchant_name")).unwrap();
        assert_eq!(r.raw_text, "Heathrow Airport");
        assert_eq!(r.attempt_count, 1);
        let empty = a.annotate(&doc("r2"), &prompt("merchant_name")).unwrap();
        assert_eq!(empty.raw_text, "");
        let padded = Annotator::new(MockEndpoint::new([fixture("r3", "  45\n")]), RetryPolicy::immediate(1));
        assert_eq!(padded.annotate(&doc("r3"), &prompt("amount")).unwrap().raw_text, "  45\n");
    }

    #[test]
    fn retries_until_success() {
        let mut f = fixture("d", "45");
        f.fail_first = 2;
        let a = Annotator::new(MockEndpoint::new([f]), RetryPolicy::immediate(3));
        let r = a.annotate(&doc("d"), &prompt("amount")).unwrap();
        assert_eq!(r.attempt_count, 3);
        assert_eq!(a.usage().requests, 3);
    }

    #[test]
    fn rate_limit_exhausts_retries() {
        let mut f = fixture("d", "45");
        f.always_fail = true;
        f.fail_with = Some("rate_limited".into());
        let a = Annotator::new(MockEndpoint::new([f]), RetryPolicy::immediate(3));
        let err = a.annotate(&doc("d"), &prompt("amount")).unwrap_err();
        assert_eq!(err.error, EndpointError::RateLimited);
        assert_eq!(err.attempt_count, 3);
    }

    #[test]
    fn payload_too_large_is_not_retried() {
        let mut f = fixture("d", "45");
        f.always_fail = true;
        f.fail_with = Some("payload_too_large".into());
        let a = Annotator::new(MockEndpoint::new([f]), RetryPolicy::immediate(3));
        let err = a.annotate(&doc("d"), &prompt("amount")).unwrap_err();
        assert_eq!(err.error, EndpointError::PayloadTooLarge);
        assert_eq!(err.attempt_count, 1);
    }

    #[test]
    fn task_specific_fixture_wins() {
        let mut specific = fixture("d", "20191112");
        specific.task = Some("transaction_date".into());
        let a = Annotator::new(
            MockEndpoint::new([fixture("d", "generic"), specific]),
            RetryPolicy::immediate(1),
        );
        assert_eq!(a.annotate(&doc("d"), &prompt("transaction_date")).unwrap().raw_text, "20191112");
        assert_eq!(a.annotate(&doc("d"), &prompt("amount")).unwrap().raw_text, "generic");
    }

    #[test]
    fn backoff_schedule_within_jitter() {
        let p = RetryPolicy::default();
        let mut rng = rand::rng();
        for (retry, nominal) in [(0u32, 1.0f64), (1, 2.0), (2, 4.0)] {
            for _ in 0..50 {
                let d = p.backoff(retry, &mut rng).as_secs_f64();
                assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9, "{d}");
            }
        }
    }

    #[test]
    fn token_fallback_and_ledger() {
        let mut with_usage = fixture("a", "Heathrow Airport");
        with_usage.input_tokens = Some(1500);
        with_usage.output_tokens = Some(4);
        let a = Annotator::new(MockEndpoint::new([with_usage, fixture("b", "abcde")]), RetryPolicy::immediate(1));
        let p = prompt("merchant_name");
        let d1 = doc("a");
        let d2 = doc("b");
        let out = a.batch_annotate(&[(&d1, &p), (&d2, &p)], 2);
        let r1 = out[0].as_ref().unwrap();
        let r2 = out[1].as_ref().unwrap();
        assert_eq!((r1.input_tokens, r1.output_tokens), (1500, 4));
        assert_eq!(r2.output_tokens, 2); // ceil(5 / 4)
        assert_eq!(r2.input_tokens, approx_tokens(&p.text));
        let t = a.usage();
        assert_eq!(t.input_tokens, r1.input_tokens + r2.input_tokens);
        assert_eq!(t.output_tokens, r1.output_tokens + r2.output_tokens);
    }

    #[test]
    fn batch_sequential_matches_single_calls() {
        let fixtures: Vec<_> = (0..3).map(|i| fixture(&format!("d{i}"), &format!("v{i}"))).collect();
        let docs: Vec<_> = (0..3).map(|i| doc(&format!("d{i}"))).collect();
        let p = prompt("merchant_name");
        let jobs: Vec<_> = docs.iter().map(|d| (d, &p)).collect();
        let batch = Annotator::new(MockEndpoint::new(fixtures.clone()), RetryPolicy::immediate(1))
            .batch_annotate(&jobs, 1);
        let single = Annotator::new(MockEndpoint::new(fixtures), RetryPolicy::immediate(1));
        let seq: Vec<_> = docs.iter().map(|d| single.annotate(d, &p)).collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn batch_preserves_order_and_bounds_concurrency() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let fixtures: Vec<_> = (0..100)
            .map(|i| {
                let mut f = fixture(&format!("d{i:03}"), &format!("v{i}"));
                f.sleep_ms = rng.random_range(0..4);
                f
            })
            .collect();
        let docs: Vec<_> = (0..100).map(|i| doc(&format!("d{i:03}"))).collect();
        let p = prompt("merchant_name");
        let jobs: Vec<_> = docs.iter().map(|d| (d, &p)).collect();
        let a = Annotator::new(MockEndpoint::new(fixtures), RetryPolicy::immediate(1));
        let out = a.batch_annotate(&jobs, 8);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().raw_text, format!("v{i}"));
        }
        assert!(a.endpoint().max_in_flight() <= 8);
        assert!(a.endpoint().max_in_flight() >= 2);
    }

    #[test]
    fn batch_embeds_failures() {
        let mut fixtures: Vec<_> = (0..10).map(|i| fixture(&format!("d{i}"), "ok")).collect();
        fixtures[4].always_fail = true;
        let docs: Vec<_> = (0..10).map(|i| doc(&format!("d{i}"))).collect();
        let p = prompt("amount");
        let jobs: Vec<_> = docs.iter().map(|d| (d, &p)).collect();
        let a = Annotator::new(MockEndpoint::new(fixtures), RetryPolicy::immediate(2));
        let out = a.batch_annotate(&jobs, 3);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 9);
        let failure = out[4].as_ref().unwrap_err();
        assert_eq!(failure.doc_id, "d4");
        assert_eq!(failure.attempt_count, 2);
        assert_eq!(a.usage().failures, 1);
    }

    fn dec(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    #[test]
    fn annual_cost_zero_docs_is_fixed_cost() {
        let p = PricingModel {
            input_price_per_1k_tokens: dec("0.003"),
            output_price_per_1k_tokens: dec("0.015"),
            fixed_labeling_cost: dec("48"),
            docs_per_second: dec("0.3"),
        };
        assert_eq!(estimate_annual_cost(&p, 0, (dec("1500"), dec("20"))), dec("48"));
        assert_eq!(estimate_annual_cost(&p, 1000, (dec("1500"), dec("20"))), dec("52.8"));
    }

    #[test]
    fn negative_price_rejected() {
        let p = PricingModel {
            input_price_per_1k_tokens: dec("-1"),
            output_price_per_1k_tokens: dec("0"),
            fixed_labeling_cost: dec("0"),
            docs_per_second: dec("1"),
        };
        assert_eq!(p.validate(), Err(NegativePrice("input_price_per_1k_tokens")));
    }

    proptest::proptest! {
        #[test]
        fn cost_linear_in_docs(n in 0u64..1_000_000, m in 0u64..1_000_000) {
            let p = PricingModel {
                input_price_per_1k_tokens: dec("0.003"),
                output_price_per_1k_tokens: dec("0.015"),
                fixed_labeling_cost: dec("12.5"),
                docs_per_second: dec("1"),
            };
            let t = (dec("812.25"), dec("17"));
            let f = |k| estimate_annual_cost(&p, k, t) - p.fixed_labeling_cost;
            proptest::prop_assert_eq!(f(n + m), f(n) + f(m));
        }
    }

    /// Serves each canned (status, body) pair to one connection in turn.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/complete", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body_start = loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break p + 4;
                    }
                };
                let head = String::from_utf8_lossy(&buf[..body_start]).to_ascii_lowercase();
                let len: usize = head
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .map(|v| v.trim().parse().unwrap())
                    .unwrap_or(0);
                while buf.len() < body_start + len {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                }
                bodies.push(String::from_utf8_lossy(&buf[body_start..]).to_string());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn http_endpoint_retries_429_and_reads_usage() {
        let ok = r#"{"text":"Heathrow Airport","usage":{"input_tokens":812,"output_tokens":3}}"#;
        let (url, server) = serve(vec![(429, "{}".into()), (200, ok.into())]);
        let cfg = EndpointConfig {
            url,
            token_env: None,
            model: "teacher-x".into(),
            timeout_s: 5.0,
            max_payload_bytes: None,
        };
        let a = Annotator::new(HttpEndpoint::new(&cfg), RetryPolicy::immediate(3));
        let r = a.annotate(&doc("r1"), &prompt("merchant_name")).unwrap();
        assert_eq!(r.raw_text, "Heathrow Airport");
        assert_eq!((r.input_tokens, r.output_tokens, r.attempt_count), (812, 3, 2));
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["model"], "teacher-x");
        assert_eq!(sent["image"]["data"], BASE64.encode([1u8, 2, 3]));
        assert_eq!(sent["image"]["media_type"], "image/png");
    }

    #[test]
    fn http_endpoint_maps_413_and_local_limit() {
        let (url, server) = serve(vec![(413, "{}".into())]);
        let mut cfg = EndpointConfig {
            url,
            token_env: None,
            model: String::new(),
            timeout_s: 5.0,
            max_payload_bytes: None,
        };
        let a = Annotator::new(HttpEndpoint::new(&cfg), RetryPolicy::immediate(3));
        assert_eq!(
            a.annotate(&doc("d"), &prompt("amount")).unwrap_err().error,
            EndpointError::PayloadTooLarge
        );
        server.join().unwrap();
        cfg.max_payload_bytes = Some(2);
        let local = Annotator::new(HttpEndpoint::new(&cfg), RetryPolicy::immediate(3));
        assert_eq!(
            local.annotate(&doc("d"), &prompt("amount")).unwrap_err().error,
            EndpointError::PayloadTooLarge
        );
    }

    #[test]
    fn unreachable_host() {
        let cfg = EndpointConfig {
            url: "http://127.0.0.1:9/none".into(),
            token_env: None,
            model: String::new(),
            timeout_s: 2.0,
            max_payload_bytes: None,
        };
        let a = Annotator::new(HttpEndpoint::new(&cfg), RetryPolicy::immediate(2));
        let err = a.annotate(&doc("d"), &prompt("amount")).unwrap_err();
        assert!(matches!(err.error, EndpointError::EndpointUnreachable(_)), "{err:?}");
        assert_eq!(err.attempt_count, 2);
    }

    #[test]
    fn connect_dispatches_on_scheme() {
        let dir = tempfile::tempdir().unwrap();
        let path: PathBuf = dir.path().join("fx.jsonl");
        fs::write(&path, "{\"doc_id\":\"a\",\"response\":\"x\"}\n").unwrap();
        let cfg = EndpointConfig {
            url: format!("mock://{}", path.display()),
            token_env: None,
            model: String::new(),
            timeout_s: 1.0,
            max_payload_bytes: None,
        };
        let e = connect(&cfg).unwrap();
        let d = doc("a");
        let reply = e
            .complete(&EndpointRequest { doc_id: "a", task_key: "t", prompt: "", image: &d.image })
            .unwrap();
        assert_eq!(reply.text, "x");
        assert!(connect(&EndpointConfig { url: "ftp://x".into(), ..cfg }).is_err());
    }
}
