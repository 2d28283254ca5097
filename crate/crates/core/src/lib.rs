//! Synthetic labelling of receipts and invoices with a teacher model: prompt
//! rendering, annotation, answer parsing, scoring, dataset export and
//! overpayment checks.
//!
//! Scoring and raster code is generic over [`scalar::Real`]; the aliases below
//! fix the common choices.

pub mod dataset;
pub mod eval;
pub mod image_quality;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod prompt;
pub mod risk;
pub mod scalar;
pub mod teacher;

pub use scalar::Real;

/// Default scoring precision.
pub type Score = f64;
pub type MetricReport64 = metrics::MetricReport<f64>;
pub type MetricReport32 = metrics::MetricReport<f32>;
pub type AnlsOptions64 = metrics::AnlsOptions<f64>;
pub type GrayRaster64 = image_quality::GrayRaster<f64>;
pub type GrayRaster32 = image_quality::GrayRaster<f32>;
pub type Evaluation64 = eval::Evaluation<f64>;
/// Exact money.
pub type Money = rust_decimal::Decimal;
/// Exact proportion of a finite count.
pub type Rate = eval::Rate;
