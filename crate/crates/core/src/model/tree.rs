//! Binary decision tree over 15 binary features with 6 class labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_COUNT: usize = 15;
pub const CLASS_COUNT: u8 = 6;
pub const MAX_DEPTH: usize = 15;

const REFERENCE_TREE: &str = include_str!("../../assets/reference_tree.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum TreeNode {
    /// Feature value 0 descends `left`, 1 descends `right`.
    Split { feature: usize, left: usize, right: usize },
    Leaf { label: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,
    #[error("node {node}: child index {child} out of range")]
    DanglingChild { node: usize, child: usize },
    #[error("node {node}: feature index {feature} must be below {FEATURE_COUNT}")]
    BadFeature { node: usize, feature: usize },
    #[error("node {node}: label {label} must lie in 1..={CLASS_COUNT}")]
    BadLabel { node: usize, label: u8 },
    #[error("path through node {node} exceeds depth {MAX_DEPTH} (cycle or overly deep tree)")]
    TooDeep { node: usize },
    #[error("tree JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("expected {FEATURE_COUNT} features, got {0}")]
    BadArity(usize),
    #[error("feature {index} has value {value}; expected 0 or 1")]
    BadValue { index: usize, value: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

impl DecisionTree {
    pub fn new(nodes: Vec<TreeNode>, root: usize) -> Result<Self, TreeError> {
        if nodes.is_empty() {
            return Err(TreeError::Empty);
        }
        if root >= nodes.len() {
            return Err(TreeError::DanglingChild { node: root, child: root });
        }
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                TreeNode::Split { feature, left, right } => {
                    if feature >= FEATURE_COUNT {
                        return Err(TreeError::BadFeature { node: i, feature });
                    }
                    for child in [left, right] {
                        if child >= nodes.len() {
                            return Err(TreeError::DanglingChild { node: i, child });
                        }
                    }
                }
                TreeNode::Leaf { label } => {
                    if !(1..=CLASS_COUNT).contains(&label) {
                        return Err(TreeError::BadLabel { node: i, label });
                    }
                }
            }
        }
        // Bounded depth-first walk: any cycle shows up as an over-deep path.
        let mut stack = vec![(root, 0usize)];
        while let Some((i, depth)) = stack.pop() {
            if depth > MAX_DEPTH {
                return Err(TreeError::TooDeep { node: i });
            }
            if let TreeNode::Split { left, right, .. } = nodes[i] {
                stack.push((left, depth + 1));
                stack.push((right, depth + 1));
            }
        }
        Ok(DecisionTree { nodes, root })
    }

    /// Nodes as a JSON array; the first node is the root.
    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let nodes: Vec<TreeNode> = serde_json::from_str(text).map_err(|e| TreeError::Json(e.to_string()))?;
        Self::new(nodes, 0)
    }

    /// The checked-in reference tree. Its labels carry no clinical meaning.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_TREE).expect("bundled reference tree is valid")
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, self.root)
    }

    pub fn classify(&self, features: &[u8]) -> Result<u8, ClassifyError> {
        if features.len() != FEATURE_COUNT {
            return Err(ClassifyError::BadArity(features.len()));
        }
        if let Some((index, &value)) = features.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(ClassifyError::BadValue { index, value });
        }
        let mut i = self.root;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { label } => return Ok(label),
                TreeNode::Split { feature, left, right } => {
                    i = if features[feature] == 0 { left } else { right };
                }
            }
        }
    }
}
