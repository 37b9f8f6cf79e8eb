//! Binary gate trees over the experts of one layer.
//!
//! Leaves are experts. Every internal node owns a 2-way softmax gate; the
//! weight of an expert is the product of gate probabilities on its
//! root-to-leaf path, so leaf weights always sum to one.

use crate::error::{input_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateNode {
    Leaf { expert: usize },
    Internal { gate: usize, left: usize, right: usize },
}

/// One node in preorder, the checkpoint representation of a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreorderRecord {
    Leaf { expert: usize },
    Internal { gate: usize },
}

/// Arena-backed tree. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateTree {
    nodes: Vec<GateNode>,
    num_leaves: usize,
}

impl Default for GateTree {
    fn default() -> Self {
        Self::single()
    }
}

impl GateTree {
    /// A lone expert with no gates.
    pub fn single() -> Self {
        Self {
            nodes: vec![GateNode::Leaf { expert: 0 }],
            num_leaves: 1,
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn num_gates(&self) -> usize {
        self.num_leaves - 1
    }

    pub fn nodes(&self) -> &[GateNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> GateNode {
        self.nodes[id]
    }

    pub fn leaf_node(&self, expert: usize) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| matches!(n, GateNode::Leaf { expert: e } if *e == expert))
    }

    /// Longest root-to-leaf path, in gates.
    pub fn depth(&self) -> usize {
        fn go(t: &GateTree, id: usize) -> usize {
            match t.nodes[id] {
                GateNode::Leaf { .. } => 0,
                GateNode::Internal { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Turns the leaf of `expert` into a gate whose left child keeps
    /// `expert` and whose right child is the new expert `num_leaves`.
    /// Returns `(gate_id, new_expert)`.
    pub fn split(&mut self, expert: usize) -> Result<(usize, usize)> {
        let id = self
            .leaf_node(expert)
            .ok_or_else(|| input_err!("no expert {expert} in a tree of {} leaves", self.num_leaves))?;
        let gate = self.num_gates();
        let new_expert = self.num_leaves;
        let left = self.nodes.len();
        self.nodes.push(GateNode::Leaf { expert });
        self.nodes.push(GateNode::Leaf { expert: new_expert });
        self.nodes[id] = GateNode::Internal {
            gate,
            left,
            right: left + 1,
        };
        self.num_leaves += 1;
        Ok((gate, new_expert))
    }

    /// Node ids in preorder (node, left subtree, right subtree).
    pub fn preorder_ids(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let GateNode::Internal { left, right, .. } = self.nodes[id] {
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }

    pub fn preorder(&self) -> Vec<PreorderRecord> {
        self.preorder_ids()
            .into_iter()
            .map(|id| match self.nodes[id] {
                GateNode::Leaf { expert } => PreorderRecord::Leaf { expert },
                GateNode::Internal { gate, .. } => PreorderRecord::Internal { gate },
            })
            .collect()
    }

    /// Rebuilds a tree from its preorder list, checking that experts are
    /// exactly `0..k` and gates exactly `0..k-1`.
    pub fn from_preorder(records: &[PreorderRecord]) -> Result<Self> {
        fn build(
            records: &[PreorderRecord],
            pos: &mut usize,
            nodes: &mut Vec<GateNode>,
        ) -> Result<usize> {
            let rec = *records
                .get(*pos)
                .ok_or_else(|| Error::State("truncated gate tree".into()))?;
            *pos += 1;
            let id = nodes.len();
            match rec {
                PreorderRecord::Leaf { expert } => nodes.push(GateNode::Leaf { expert }),
                PreorderRecord::Internal { gate } => {
                    nodes.push(GateNode::Leaf { expert: usize::MAX });
                    let left = build(records, pos, nodes)?;
                    let right = build(records, pos, nodes)?;
                    nodes[id] = GateNode::Internal { gate, left, right };
                }
            }
            Ok(id)
        }
        let mut nodes = Vec::with_capacity(records.len());
        let mut pos = 0;
        build(records, &mut pos, &mut nodes)?;
        if pos != records.len() {
            return Err(Error::State("trailing gate tree records".into()));
        }
        let mut experts: Vec<usize> = Vec::new();
        let mut gates: Vec<usize> = Vec::new();
        for n in &nodes {
            match *n {
                GateNode::Leaf { expert } => experts.push(expert),
                GateNode::Internal { gate, .. } => gates.push(gate),
            }
        }
        experts.sort_unstable();
        gates.sort_unstable();
        if experts.iter().enumerate().any(|(i, &e)| i != e) || gates.iter().enumerate().any(|(i, &g)| i != g) {
            return Err(Error::State("gate tree ids are not contiguous".into()));
        }
        Ok(Self {
            num_leaves: experts.len(),
            nodes,
        })
    }
}
