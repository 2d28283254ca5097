//! Similarity scoring for extracted labels.

mod string;
mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use string::{anls, levenshtein, nls, normalize_text, pair_score, AnlsOptions, MetricError};
pub use tree::{
    json_to_tree, ted_similarity, tree_edit_distance, OrderedLabeledTree, TreeError, TreeNode, ARRAY_LABEL,
    OBJECT_LABEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "ANLS")]
    Anls,
    #[serde(rename = "TEDSim")]
    TedSim,
}

impl std::fmt::Display for MetricName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricName::Anls => "ANLS",
            MetricName::TedSim => "TEDSim",
        })
    }
}

/// Mean score of one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: crate::scalar::Real")]
pub struct StratumScore<T> {
    pub score: T,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: crate::scalar::Real")]
pub struct MetricReport<T> {
    /// Task key for JSON tasks, attribute key for single-value tasks.
    pub task_key: String,
    pub metric_name: MetricName,
    pub score: T,
    pub n_items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<BTreeMap<String, StratumScore<T>>>,
}
