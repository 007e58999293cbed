use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Circuit, GaussianLeaf, Node, NodeId, ProductNode, SpnGraph, SumNode};
use crate::{Error, Result};

pub const CIRCUIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CircuitDocument {
    version: u32,
    dimension: usize,
    class_priors: Vec<f64>,
    nodes: Vec<NodeRecord>,
    root: NodeId,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum NodeKind {
    Sum { children: Vec<NodeId>, weights: Vec<f64> },
    Product { children: Vec<NodeId> },
    Leaf { variable: usize, mean: f64, stddev: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    #[serde(flatten)]
    kind: NodeKind,
}

impl Circuit {
    pub fn to_json(&self) -> Result<String> {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                id: NodeId(i),
                kind: match n.clone() {
                    Node::Sum(SumNode { children, weights }) => NodeKind::Sum { children, weights },
                    Node::Product(ProductNode { children }) => NodeKind::Product { children },
                    Node::Leaf(GaussianLeaf { variable, mean, stddev }) => {
                        NodeKind::Leaf { variable, mean, stddev }
                    }
                },
            })
            .collect();
        let doc = CircuitDocument {
            version: CIRCUIT_FORMAT_VERSION,
            dimension: self.dimension,
            class_priors: self.class_priors().to_vec(),
            nodes,
            root: self.root,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CircuitDocument = serde_json::from_str(text)?;
        if doc.version != CIRCUIT_FORMAT_VERSION {
            return Err(Error::Version { found: doc.version, expected: CIRCUIT_FORMAT_VERSION });
        }
        let n = doc.nodes.len();
        let mut slots: Vec<Option<Node>> = vec![None; n];
        for rec in doc.nodes {
            let slot = slots.get_mut(rec.id.0).ok_or_else(|| Error::Structural {
                node: rec.id.0,
                message: format!("node id out of range for {n} nodes"),
            })?;
            if slot.is_some() {
                return Err(Error::Structural { node: rec.id.0, message: "duplicate node id".into() });
            }
            *slot = Some(match rec.kind {
                NodeKind::Sum { children, weights } => Node::Sum(SumNode { children, weights }),
                NodeKind::Product { children } => Node::Product(ProductNode { children }),
                NodeKind::Leaf { variable, mean, stddev } => {
                    Node::Leaf(GaussianLeaf { variable, mean, stddev })
                }
            });
        }
        let nodes = slots.into_iter().map(|s| s.expect("ids are a permutation")).collect();
        let circuit = Circuit::new(SpnGraph { nodes, root: doc.root, dimension: doc.dimension })?;
        if circuit.class_priors() != doc.class_priors.as_slice() {
            return Err(Error::InvalidCircuit(
                "class_priors disagree with the root sum weights".into(),
            ));
        }
        Ok(circuit)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Circuit::from_json(&std::fs::read_to_string(path)?)
    }
}
