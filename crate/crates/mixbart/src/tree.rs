//! Soft decision trees with logistic gating.
//!
//! A tree routes an exposure vector to every leaf at once: each internal node
//! passes weight `psi((z_v − c)/bandwidth)` to its right child and the
//! complement to its left child, with `psi` the standard logistic. The
//! prediction is the weight-averaged leaf value, so the surface is smooth in
//! the exposures and degenerates to a hard decision tree as the bandwidth
//! shrinks to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        var: usize,
        cut: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn leaf_count(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

/// Path step from a parent to one of its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTree {
    pub root: Node,
    /// Shared gate bandwidth for every internal node of this tree.
    pub bandwidth: f64,
}

impl SoftTree {
    pub fn root_only(bandwidth: f64) -> Self {
        Self {
            root: Node::Leaf { value: 0.0 },
            bandwidth,
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaf_count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Leaf membership weights for `z`, in left-to-right leaf order.
    /// The weights form a simplex by construction.
    pub fn leaf_weights(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        self.accumulate_weights(&self.root, z, 1.0, out);
    }

    fn accumulate_weights(&self, node: &Node, z: &[f64], weight: f64, out: &mut Vec<f64>) {
        match node {
            Node::Leaf { .. } => out.push(weight),
            Node::Split {
                var,
                cut,
                left,
                right,
            } => {
                let gate = logistic((z[*var] - cut) / self.bandwidth);
                self.accumulate_weights(left, z, weight * (1.0 - gate), out);
                self.accumulate_weights(right, z, weight * gate, out);
            }
        }
    }

    /// Weight-averaged leaf value at `z`.
    pub fn predict(&self, z: &[f64]) -> f64 {
        predict_node(&self.root, z, 1.0, self.bandwidth)
    }

    /// Leaf values in left-to-right order.
    pub fn leaf_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.leaf_count());
        collect_leaves(&self.root, &mut out);
        out
    }

    /// Overwrites leaf values in left-to-right order.
    pub fn set_leaf_values(&mut self, values: &[f64]) {
        let mut idx = 0;
        assign_leaves(&mut self.root, values, &mut idx);
        assert_eq!(idx, values.len(), "leaf count mismatch");
    }

    /// Paths to all leaves, left-to-right.
    pub fn leaf_paths(&self) -> Vec<Vec<Side>> {
        let mut out = Vec::new();
        collect_paths(&self.root, &mut Vec::new(), &mut out, |n| {
            matches!(n, Node::Leaf { .. })
        });
        out
    }

    /// Paths to internal nodes whose children are both leaves.
    pub fn prunable_paths(&self) -> Vec<Vec<Side>> {
        let mut out = Vec::new();
        collect_paths(&self.root, &mut Vec::new(), &mut out, |n| {
            matches!(
                n,
                Node::Split { left, right, .. }
                    if matches!(**left, Node::Leaf { .. }) && matches!(**right, Node::Leaf { .. })
            )
        });
        out
    }

    /// Paths to all internal nodes.
    pub fn internal_paths(&self) -> Vec<Vec<Side>> {
        let mut out = Vec::new();
        collect_paths(&self.root, &mut Vec::new(), &mut out, |n| {
            matches!(n, Node::Split { .. })
        });
        out
    }

    pub fn node_at_path_mut(&mut self, path: &[Side]) -> &mut Node {
        let mut node = &mut self.root;
        for side in path {
            node = match node {
                Node::Split { left, right, .. } => match side {
                    Side::Left => left,
                    Side::Right => right,
                },
                Node::Leaf { .. } => panic!("path descends through a leaf"),
            };
        }
        node
    }

    /// Split-variable indices of all internal nodes.
    pub fn split_variables(&self) -> Vec<usize> {
        let mut out = Vec::new();
        collect_split_vars(&self.root, &mut out);
        out
    }

    /// Serializes to the flat pre-order node list used by the draw archive.
    pub fn to_flat(&self) -> FlatTree {
        let mut nodes = Vec::with_capacity(2 * self.leaf_count() - 1);
        flatten(&self.root, &mut nodes);
        FlatTree {
            bandwidth: self.bandwidth,
            nodes,
        }
    }

    pub fn from_flat(flat: &FlatTree) -> Result<Self> {
        let mut cursor = 0usize;
        let root = unflatten(&flat.nodes, &mut cursor)?;
        if cursor != flat.nodes.len() {
            return Err(Error::Data(format!(
                "tree archive has {} trailing nodes",
                flat.nodes.len() - cursor
            )));
        }
        Ok(Self {
            root,
            bandwidth: flat.bandwidth,
        })
    }
}

fn predict_node(node: &Node, z: &[f64], weight: f64, bandwidth: f64) -> f64 {
    match node {
        Node::Leaf { value } => weight * value,
        Node::Split {
            var,
            cut,
            left,
            right,
        } => {
            let gate = logistic((z[*var] - cut) / bandwidth);
            predict_node(left, z, weight * (1.0 - gate), bandwidth)
                + predict_node(right, z, weight * gate, bandwidth)
        }
    }
}

fn collect_leaves(node: &Node, out: &mut Vec<f64>) {
    match node {
        Node::Leaf { value } => out.push(*value),
        Node::Split { left, right, .. } => {
            collect_leaves(left, out);
            collect_leaves(right, out);
        }
    }
}

fn assign_leaves(node: &mut Node, values: &[f64], idx: &mut usize) {
    match node {
        Node::Leaf { value } => {
            *value = values[*idx];
            *idx += 1;
        }
        Node::Split { left, right, .. } => {
            assign_leaves(left, values, idx);
            assign_leaves(right, values, idx);
        }
    }
}

fn collect_paths(
    node: &Node,
    prefix: &mut Vec<Side>,
    out: &mut Vec<Vec<Side>>,
    pred: impl Fn(&Node) -> bool + Copy,
) {
    if pred(node) {
        out.push(prefix.clone());
    }
    if let Node::Split { left, right, .. } = node {
        prefix.push(Side::Left);
        collect_paths(left, prefix, out, pred);
        prefix.pop();
        prefix.push(Side::Right);
        collect_paths(right, prefix, out, pred);
        prefix.pop();
    }
}

fn collect_split_vars(node: &Node, out: &mut Vec<usize>) {
    if let Node::Split {
        var, left, right, ..
    } = node
    {
        out.push(*var);
        collect_split_vars(left, out);
        collect_split_vars(right, out);
    }
}

/// Flat node: `(node_type, split_var, cutpoint, leaf_value)` with type 0 for
/// internal nodes and 1 for leaves, pre-order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlatNode(pub u8, pub usize, pub f64, pub f64);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlatTree {
    #[serde(rename = "b")]
    pub bandwidth: f64,
    #[serde(rename = "n")]
    pub nodes: Vec<FlatNode>,
}

fn flatten(node: &Node, out: &mut Vec<FlatNode>) {
    match node {
        Node::Leaf { value } => out.push(FlatNode(1, 0, 0.0, *value)),
        Node::Split {
            var,
            cut,
            left,
            right,
        } => {
            out.push(FlatNode(0, *var, *cut, 0.0));
            flatten(left, out);
            flatten(right, out);
        }
    }
}

fn unflatten(nodes: &[FlatNode], cursor: &mut usize) -> Result<Node> {
    let Some(node) = nodes.get(*cursor) else {
        return Err(Error::Data("tree archive truncated".to_string()));
    };
    *cursor += 1;
    match node.0 {
        1 => Ok(Node::Leaf { value: node.3 }),
        0 => {
            let left = unflatten(nodes, cursor)?;
            let right = unflatten(nodes, cursor)?;
            Ok(Node::Split {
                var: node.1,
                cut: node.2,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        t => Err(Error::Data(format!("unknown tree node type {t}"))),
    }
}

/// Sum of tree predictions at `z`.
pub fn predict_ensemble(trees: &[SoftTree], z: &[f64]) -> f64 {
    trees.iter().map(|t| t.predict(z)).sum()
}
