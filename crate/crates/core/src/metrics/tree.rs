//! Ordered labelled trees, JSON conversion and Zhang–Shasha tree edit distance.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use crate::scalar::Real;

/// Label of a JSON object node.
pub const OBJECT_LABEL: &str = "obj";
/// Label of a JSON array node.
pub const ARRAY_LABEL: &str = "arr";

/// Nested form used to build trees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaf(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn with_children(label: impl Into<String>, children: Vec<TreeNode>) -> Self {
        Self {
            label: label.into(),
            children,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("label and parent tables differ in length")]
    LengthMismatch,
    #[error("node {0} is not in postorder position")]
    NotPostorder(usize),
    #[error("tree must have exactly one root, the last node")]
    BadRoot,
}

/// Postorder-indexed tree with the tables Zhang–Shasha needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedLabeledTree {
    labels: Vec<String>,
    parents: Vec<Option<usize>>,
    /// Postorder index of the leftmost leaf below each node.
    leftmost: Vec<usize>,
    /// Highest node for each distinct leftmost leaf, ascending.
    keyroots: Vec<usize>,
}

impl OrderedLabeledTree {
    pub fn empty() -> Self {
        Self {
            labels: Vec::new(),
            parents: Vec::new(),
            leftmost: Vec::new(),
            keyroots: Vec::new(),
        }
    }

    pub fn from_node(root: &TreeNode) -> Self {
        fn walk(
            node: &TreeNode,
            labels: &mut Vec<String>,
            parents: &mut Vec<Option<usize>>,
            leftmost: &mut Vec<usize>,
        ) -> usize {
            let mut child_ids = Vec::with_capacity(node.children.len());
            let mut first_leaf = None;
            for c in &node.children {
                let id = walk(c, labels, parents, leftmost);
                first_leaf.get_or_insert(leftmost[id]);
                child_ids.push(id);
            }
            let me = labels.len();
            labels.push(node.label.clone());
            parents.push(None);
            leftmost.push(first_leaf.unwrap_or(me));
            for id in child_ids {
                parents[id] = Some(me);
            }
            me
        }
        let mut labels = Vec::new();
        let mut parents = Vec::new();
        let mut leftmost = Vec::new();
        walk(root, &mut labels, &mut parents, &mut leftmost);
        let keyroots = keyroots(&leftmost);
        Self {
            labels,
            parents,
            leftmost,
            keyroots,
        }
    }

    /// Builds from flat postorder tables, checking they describe one tree.
    pub fn from_postorder(labels: Vec<String>, parents: Vec<Option<usize>>) -> Result<Self, TreeError> {
        if labels.len() != parents.len() {
            return Err(TreeError::LengthMismatch);
        }
        let n = labels.len();
        if n == 0 {
            return Ok(Self::empty());
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || parents[n - 1].is_some() {
            return Err(TreeError::BadRoot);
        }
        let mut children = vec![Vec::new(); n];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p <= i || p >= n {
                    return Err(TreeError::NotPostorder(i));
                }
                children[p].push(i);
            }
        }
        fn build(i: usize, labels: &[String], children: &[Vec<usize>]) -> TreeNode {
            TreeNode::with_children(
                labels[i].clone(),
                children[i].iter().map(|&c| build(c, labels, children)).collect(),
            )
        }
        let tree = Self::from_node(&build(n - 1, &labels, &children));
        if tree.parents != parents {
            let bad = (0..n).find(|&i| tree.parents[i] != parents[i]).unwrap_or(0);
            return Err(TreeError::NotPostorder(bad));
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn leftmost(&self) -> &[usize] {
        &self.leftmost
    }

    pub fn keyroots(&self) -> &[usize] {
        &self.keyroots
    }
}

fn keyroots(leftmost: &[usize]) -> Vec<usize> {
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &l) in leftmost.iter().enumerate() {
        last.insert(l, i);
    }
    let mut roots: Vec<usize> = last.into_values().collect();
    roots.sort_unstable();
    roots
}

/// Canonical leaf label for a JSON scalar.
fn scalar_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "null".into(),
        other => other.to_string(),
    }
}

fn json_node(value: &Value) -> TreeNode {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            TreeNode::with_children(
                OBJECT_LABEL,
                entries
                    .into_iter()
                    .map(|(k, v)| TreeNode::with_children(k.clone(), vec![json_node(v)]))
                    .collect(),
            )
        }
        Value::Array(items) => TreeNode::with_children(ARRAY_LABEL, items.iter().map(json_node).collect()),
        scalar => TreeNode::leaf(scalar_label(scalar)),
    }
}

/// Objects become `obj` nodes whose children are key nodes sorted by key, each
/// holding its value subtree; arrays become `arr` nodes; scalars become leaves.
pub fn json_to_tree(value: &Value) -> OrderedLabeledTree {
    OrderedLabeledTree::from_node(&json_node(value))
}

/// Zhang–Shasha ordered tree edit distance with unit insert, delete and relabel costs.
pub fn tree_edit_distance(t1: &OrderedLabeledTree, t2: &OrderedLabeledTree) -> usize {
    let (n, m) = (t1.len(), t2.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &k1 in &t1.keyroots {
        for &k2 in &t2.keyroots {
            forest_distance(t1, t2, k1, k2, &mut td, &mut fd);
        }
    }
    td[n - 1][m - 1]
}

fn forest_distance(
    t1: &OrderedLabeledTree,
    t2: &OrderedLabeledTree,
    k1: usize,
    k2: usize,
    td: &mut [Vec<usize>],
    fd: &mut [Vec<usize>],
) {
    let l1 = t1.leftmost[k1];
    let l2 = t2.leftmost[k2];
    let rows = k1 - l1 + 1;
    let cols = k2 - l2 + 1;
    // fd[i][j]: distance between forests t1[l1..l1+i) and t2[l2..l2+j).
    fd[0][0] = 0;
    for i in 1..=rows {
        fd[i][0] = fd[i - 1][0] + 1;
    }
    for j in 1..=cols {
        fd[0][j] = fd[0][j - 1] + 1;
    }
    for i in 1..=rows {
        let x = l1 + i - 1;
        for j in 1..=cols {
            let y = l2 + j - 1;
            let del = fd[i - 1][j] + 1;
            let ins = fd[i][j - 1] + 1;
            if t1.leftmost[x] == l1 && t2.leftmost[y] == l2 {
                let relabel = fd[i - 1][j - 1] + usize::from(t1.labels[x] != t2.labels[y]);
                fd[i][j] = del.min(ins).min(relabel);
                td[x][y] = fd[i][j];
            } else {
                let pi = t1.leftmost[x] - l1;
                let pj = t2.leftmost[y] - l2;
                fd[i][j] = del.min(ins).min(fd[pi][pj] + td[x][y]);
            }
        }
    }
}

/// `1 − TED / max(|t1|, |t2|)`, floored at zero; two empty trees are identical.
///
/// The floor matters: ancestry constraints can push the distance past the
/// larger tree's size, e.g. a deep chain against a flat array.
pub fn ted_similarity<T: Real>(t1: &OrderedLabeledTree, t2: &OrderedLabeledTree) -> T {
    let largest = t1.len().max(t2.len());
    if largest == 0 {
        return T::one();
    }
    let d = tree_edit_distance(t1, t2).min(largest);
    T::one() - T::from_count(d) / T::from_count(largest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn t(v: Value) -> OrderedLabeledTree {
        json_to_tree(&v)
    }

    #[test]
    fn json_shapes() {
        let e = t(json!({}));
        assert_eq!(e.labels(), ["obj"]);
        let one = t(json!({"total": "10"}));
        assert_eq!(one.labels(), ["10", "total", "obj"]);
        assert_eq!(one.parents(), [Some(1), Some(2), None]);
        assert_eq!(t(json!({"b": 1, "a": 2})), t(json!({"a": 2, "b": 1})));
        let arr = t(json!([true, null, 1.5]));
        assert_eq!(arr.labels(), ["true", "null", "1.5", "arr"]);
    }

    #[test]
    fn textbook_tables() {
        // A(B, C(E, F), D)
        let root = TreeNode::with_children(
            "A",
            vec![
                TreeNode::leaf("B"),
                TreeNode::with_children("C", vec![TreeNode::leaf("E"), TreeNode::leaf("F")]),
                TreeNode::leaf("D"),
            ],
        );
        let tree = OrderedLabeledTree::from_node(&root);
        assert_eq!(tree.labels(), ["B", "E", "F", "C", "D", "A"]);
        assert_eq!(tree.leftmost(), [0, 1, 2, 1, 4, 0]);
        assert_eq!(tree.keyroots(), [2, 3, 4, 5]);
    }

    #[test]
    fn postorder_validation() {
        let labels = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        assert!(OrderedLabeledTree::from_postorder(labels(3), vec![Some(2), Some(2), None]).is_ok());
        assert_eq!(
            OrderedLabeledTree::from_postorder(labels(3), vec![None, Some(2), None]),
            Err(TreeError::BadRoot)
        );
        assert_eq!(
            OrderedLabeledTree::from_postorder(labels(2), vec![Some(0), None]),
            Err(TreeError::NotPostorder(0))
        );
        // 0 -> 2, 1 -> 3, 2 -> 3 is not a postorder numbering: 1 would precede 0's parent.
        assert!(OrderedLabeledTree::from_postorder(labels(4), vec![Some(2), Some(3), Some(3), None]).is_err());
        assert_eq!(OrderedLabeledTree::from_postorder(vec![], vec![]), Ok(OrderedLabeledTree::empty()));
    }

    #[test]
    fn ted_examples() {
        let a = t(json!({"total": "10"}));
        let b = t(json!({"total": "12"}));
        let single = OrderedLabeledTree::from_node(&TreeNode::leaf("x"));
        assert_eq!(tree_edit_distance(&a, &a), 0);
        assert_eq!(tree_edit_distance(&OrderedLabeledTree::empty(), &single), 1);
        assert_eq!(tree_edit_distance(&a, &b), 1);
        assert!((ted_similarity::<f64>(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ted_similarity::<f64>(&a, &a), 1.0);
        assert_eq!(ted_similarity::<f64>(&a, &OrderedLabeledTree::empty()), 0.0);
        assert_eq!(
            ted_similarity::<f32>(&OrderedLabeledTree::empty(), &OrderedLabeledTree::empty()),
            1.0
        );
    }

    #[test]
    fn distance_can_exceed_larger_tree() {
        let chain = t(json!({"a": {"a": {"a": null}}}));
        let flat = t(json!([[false, false]]));
        assert!(tree_edit_distance(&chain, &flat) > chain.len().max(flat.len()));
        assert_eq!(ted_similarity::<f64>(&chain, &flat), 0.0);
    }

    #[test]
    fn classic_zhang_shasha_pair() {
        // f(d(a, c(b)), e) vs f(c(d(a, b)), e): distance 2.
        let t1 = TreeNode::with_children(
            "f",
            vec![
                TreeNode::with_children("d", vec![TreeNode::leaf("a"), TreeNode::with_children("c", vec![TreeNode::leaf("b")])]),
                TreeNode::leaf("e"),
            ],
        );
        let t2 = TreeNode::with_children(
            "f",
            vec![
                TreeNode::with_children("c", vec![TreeNode::with_children("d", vec![TreeNode::leaf("a"), TreeNode::leaf("b")])]),
                TreeNode::leaf("e"),
            ],
        );
        let (a, b) = (OrderedLabeledTree::from_node(&t1), OrderedLabeledTree::from_node(&t2));
        assert_eq!(tree_edit_distance(&a, &b), 2);
        assert_eq!(tree_edit_distance(&b, &a), 2);
    }

    fn arb_json() -> impl proptest::strategy::Strategy<Value = Value> {
        use proptest::prelude::*;
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            (0i64..100).prop_map(|n| json!(n)),
            "[a-c]{0,3}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 16, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                proptest::collection::btree_map("[a-d]{1,2}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest::proptest! {
        #[test]
        fn ted_bounds_and_symmetry(a in arb_json(), b in arb_json()) {
            let (ta, tb) = (json_to_tree(&a), json_to_tree(&b));
            let d = tree_edit_distance(&ta, &tb);
            proptest::prop_assert!(d <= ta.len() + tb.len());
            proptest::prop_assert_eq!(d, tree_edit_distance(&tb, &ta));
            proptest::prop_assert_eq!(tree_edit_distance(&ta, &OrderedLabeledTree::empty()), ta.len());
            let s = ted_similarity::<f64>(&ta, &tb);
            proptest::prop_assert!((0.0..=1.0).contains(&s));
            proptest::prop_assert_eq!(s, ted_similarity::<f64>(&tb, &ta));
        }
    }
}
