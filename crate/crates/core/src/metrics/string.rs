//! Levenshtein distance and average normalised Levenshtein similarity.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no items to score")]
    EmptyInput,
    #[error("threshold must lie in (0, 1]")]
    BadThreshold,
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(a, b) / max(|a|, |b|)`; two empty strings are identical.
pub fn nls<T: Real>(a: &str, b: &str) -> T {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return T::one();
    }
    T::one() - T::from_count(levenshtein(a, b)) / T::from_count(longest)
}

/// Lowercase, trim and collapse runs of whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnlsOptions<T> {
    /// Pairs with normalised distance at or above `tau` score zero.
    pub tau: T,
    /// Apply [`normalize_text`] to both sides first.
    pub normalize: bool,
}

impl<T: Real> Default for AnlsOptions<T> {
    fn default() -> Self {
        Self {
            tau: T::lit(0.5),
            normalize: true,
        }
    }
}

impl<T: Real> AnlsOptions<T> {
    pub fn strict(tau: T) -> Self {
        Self { tau, normalize: false }
    }

    fn check(&self) -> Result<(), MetricError> {
        if self.tau > T::zero() && self.tau <= T::one() {
            Ok(())
        } else {
            Err(MetricError::BadThreshold)
        }
    }
}

/// Thresholded similarity of one pair. `None` is an explicit missing answer:
/// two missing answers agree, a missing answer scores zero against anything
/// non-empty.
pub fn pair_score<T: Real>(candidate: Option<&str>, reference: Option<&str>, opts: &AnlsOptions<T>) -> T {
    let prep = |s: &str| if opts.normalize { normalize_text(s) } else { s.to_string() };
    match (candidate.map(prep), reference.map(prep)) {
        (None, None) => T::one(),
        (None, Some(s)) | (Some(s), None) => {
            if s.is_empty() {
                T::one()
            } else {
                T::zero()
            }
        }
        (Some(c), Some(r)) => {
            let sim: T = nls(&c, &r);
            if T::one() - sim < opts.tau {
                sim
            } else {
                T::zero()
            }
        }
    }
}

/// Mean thresholded similarity over (candidate, reference) pairs.
pub fn anls<T: Real>(pairs: &[(Option<&str>, Option<&str>)], opts: &AnlsOptions<T>) -> Result<T, MetricError> {
    opts.check()?;
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let total: T = pairs.iter().map(|(c, r)| pair_score(*c, *r, opts)).sum();
    Ok(total / T::from_count(pairs.len()))
}
