//! Gaussian-leaf sum-product networks.
//!
//! A circuit is built as an unchecked [`SpnGraph`], checked with
//! [`SpnGraph::validate`], and finalised into an immutable [`Circuit`] whose
//! root is a class-partitioned sum node: one child sub-network per class,
//! weighted by the class priors.  All inference runs in natural-log space.

mod eval;
mod io;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use eval::{argmax, log_sum_exp, ClassPosterior, Evidence, GradTarget};
pub use io::CIRCUIT_FORMAT_VERSION;

/// Lower bound for leaf standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Tolerance on `|Σ w − 1|` for sum-node weights.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLeaf {
    pub variable: usize,
    pub mean: f64,
    pub stddev: f64,
}

impl GaussianLeaf {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let u = (x - self.mean) / self.stddev;
        -0.5 * u * u - self.stddev.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    /// d/dx of `log_pdf`.
    pub fn score(&self, x: f64) -> f64 {
        (self.mean - x) / (self.stddev * self.stddev)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumNode {
    pub children: Vec<NodeId>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductNode {
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Sum(SumNode),
    Product(ProductNode),
    Leaf(GaussianLeaf),
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        match self {
            Node::Sum(s) => &s.children,
            Node::Product(p) => &p.children,
            Node::Leaf(_) => &[],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Node::Sum(_) => "sum",
            Node::Product(_) => "product",
            Node::Leaf(_) => "leaf",
        }
    }
}

/// Appends nodes in construction order; children must already exist, so
/// graphs built this way are acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct SpnBuilder {
    nodes: Vec<Node>,
}

impl SpnBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, variable: usize, mean: f64, stddev: f64) -> NodeId {
        self.push(Node::Leaf(GaussianLeaf { variable, mean, stddev }))
    }

    pub fn sum(&mut self, children: Vec<NodeId>, weights: Vec<f64>) -> NodeId {
        self.push(Node::Sum(SumNode { children, weights }))
    }

    pub fn product(&mut self, children: Vec<NodeId>) -> NodeId {
        self.push(Node::Product(ProductNode { children }))
    }

    pub fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    pub fn finish(self, root: NodeId, dimension: usize) -> SpnGraph {
        SpnGraph { nodes: self.nodes, root, dimension }
    }
}

/// An unchecked sum-product graph.  Nothing about it is guaranteed until
/// [`SpnGraph::validate`] passes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpnGraph {
    pub nodes: Vec<Node>,
    pub root: NodeId,
    pub dimension: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Acyclic,
    Complete,
    Decomposable,
    WeightsNormalized,
    ScopeCoversAllVariables,
    LeavesWellFormed,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::Acyclic,
        Check::Complete,
        Check::Decomposable,
        Check::WeightsNormalized,
        Check::ScopeCoversAllVariables,
        Check::LeavesWellFormed,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: Check,
    pub passed: bool,
    pub offending: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, check: Check) -> &CheckResult {
        self.checks
            .iter()
            .find(|c| c.check == check)
            .expect("every check is always reported")
    }

    pub fn passed(&self, check: Check) -> bool {
        self.get(check).passed
    }

    pub fn offending(&self, check: Check) -> &[NodeId] {
        &self.get(check).offending
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn summary(&self) -> String {
        self.failures()
            .map(|c| {
                let ids: Vec<String> = c.offending.iter().map(|n| n.to_string()).collect();
                format!("{:?} fails at [{}]", c.check, ids.join(", "))
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Structural analysis of a graph: DFS post-order (children first) over all
/// nodes, back edges found on the way, and per-node scopes.
struct Analysis {
    order: Vec<usize>,
    back_edges: Vec<usize>,
    scopes: Vec<Vec<usize>>,
}

impl SpnGraph {
    fn check_references(&self) -> Result<()> {
        let n = self.nodes.len();
        if self.root.0 >= n {
            return Err(Error::Structural {
                node: self.root.0,
                message: format!("root refers to a node that does not exist ({n} nodes)"),
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(c) = node.children().iter().find(|c| c.0 >= n) {
                return Err(Error::Structural {
                    node: i,
                    message: format!("child {c} does not exist"),
                });
            }
        }
        Ok(())
    }

    fn analyse(&self) -> Analysis {
        let n = self.nodes.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        let mut back_edges = Vec::new();
        let starts = std::iter::once(self.root.0).chain(0..n);
        for start in starts {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state[start] = 1;
            while let Some((node, next)) = stack.pop() {
                let children = self.nodes[node].children();
                if next < children.len() {
                    stack.push((node, next + 1));
                    let c = children[next].0;
                    match state[c] {
                        0 => {
                            state[c] = 1;
                            stack.push((c, 0));
                        }
                        1 => back_edges.push(node),
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    order.push(node);
                }
            }
        }
        back_edges.sort_unstable();
        back_edges.dedup();

        let mut scopes: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &i in &order {
            scopes[i] = match &self.nodes[i] {
                Node::Leaf(l) => vec![l.variable],
                other => {
                    // children on a back edge have no scope yet; they are
                    // already reported as cycles
                    let set: BTreeSet<usize> = other
                        .children()
                        .iter()
                        .flat_map(|c| scopes[c.0].iter().copied())
                        .collect();
                    set.into_iter().collect()
                }
            };
        }
        Analysis { order, back_edges, scopes }
    }

    /// Runs every structural check.  Fails only when a child or the root
    /// refers to a node that does not exist.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.check_references()?;
        let a = self.analyse();
        let mut complete = Vec::new();
        let mut decomposable = Vec::new();
        let mut normalized = Vec::new();
        let mut leaves = Vec::new();

        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Sum(s) => {
                    let first = s.children.first().map(|c| &a.scopes[c.0]);
                    if s.children.is_empty()
                        || s.children.iter().any(|c| Some(&a.scopes[c.0]) != first)
                    {
                        complete.push(NodeId(i));
                    }
                    let total: f64 = s.weights.iter().sum();
                    if s.weights.len() != s.children.len()
                        || s.weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                        || (total - 1.0).abs() > WEIGHT_TOLERANCE
                    {
                        normalized.push(NodeId(i));
                    }
                }
                Node::Product(p) => {
                    let mut seen = BTreeSet::new();
                    let overlapping = p
                        .children
                        .iter()
                        .flat_map(|c| a.scopes[c.0].iter())
                        .any(|v| !seen.insert(*v));
                    if p.children.is_empty() || overlapping {
                        decomposable.push(NodeId(i));
                    }
                }
                Node::Leaf(l) => {
                    if l.variable >= self.dimension
                        || !l.mean.is_finite()
                        || !l.stddev.is_finite()
                        || l.stddev < SIGMA_FLOOR
                    {
                        leaves.push(NodeId(i));
                    }
                }
            }
        }

        let root_scope = &a.scopes[self.root.0];
        let covers = self.dimension > 0 && *root_scope == (0..self.dimension).collect::<Vec<_>>();
        let result = |check, offending: Vec<NodeId>| CheckResult {
            check,
            passed: offending.is_empty(),
            offending,
        };
        Ok(ValidationReport {
            checks: vec![
                result(Check::Acyclic, a.back_edges.into_iter().map(NodeId).collect()),
                result(Check::Complete, complete),
                result(Check::Decomposable, decomposable),
                result(Check::WeightsNormalized, normalized),
                result(
                    Check::ScopeCoversAllVariables,
                    if covers { vec![] } else { vec![self.root] },
                ),
                result(Check::LeavesWellFormed, leaves),
            ],
        })
    }

    /// Scope of `node`, computed on demand.
    pub fn scope(&self, node: NodeId) -> Result<Vec<usize>> {
        self.check_references()?;
        if node.0 >= self.nodes.len() {
            return Err(Error::Structural { node: node.0, message: "unknown node".into() });
        }
        Ok(self.analyse().scopes.swap_remove(node.0))
    }
}

/// A validated, immutable sum-product network with a class-partitioned root.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    nodes: Vec<Node>,
    root: NodeId,
    dimension: usize,
    /// nodes reachable from the root, children before parents
    order: Vec<usize>,
    scopes: Vec<Vec<usize>>,
}

impl Circuit {
    /// Finalises a graph.  The root must be a sum node; its children are the
    /// per-class sub-networks and its weights the class priors.
    pub fn new(graph: SpnGraph) -> Result<Self> {
        let report = graph.validate()?;
        if !report.is_valid() {
            return Err(Error::InvalidCircuit(report.summary()));
        }
        if !matches!(graph.nodes[graph.root.0], Node::Sum(_)) {
            return Err(Error::InvalidCircuit(format!(
                "root {} must be a class-partitioned sum node",
                graph.root
            )));
        }
        let analysis = graph.analyse();
        let mut reachable = vec![false; graph.nodes.len()];
        reachable[graph.root.0] = true;
        // reverse post-order visits parents before children
        for &i in analysis.order.iter().rev() {
            if reachable[i] {
                for c in graph.nodes[i].children() {
                    reachable[c.0] = true;
                }
            }
        }
        let order = analysis.order.iter().copied().filter(|&i| reachable[i]).collect();
        Ok(Circuit {
            nodes: graph.nodes,
            root: graph.root,
            dimension: graph.dimension,
            order,
            scopes: analysis.scopes,
        })
    }

    /// Builds the standard layout: a root sum node over one sub-network per class.
    pub fn from_class_subnetworks(
        mut builder: SpnBuilder,
        class_children: Vec<NodeId>,
        class_priors: Vec<f64>,
        dimension: usize,
    ) -> Result<Self> {
        let root = builder.sum(class_children, class_priors);
        Circuit::new(builder.finish(root, dimension))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn num_classes(&self) -> usize {
        self.root_sum().children.len()
    }

    pub fn class_children(&self) -> &[NodeId] {
        &self.root_sum().children
    }

    pub fn class_priors(&self) -> &[f64] {
        &self.root_sum().weights
    }

    fn root_sum(&self) -> &SumNode {
        match &self.nodes[self.root.0] {
            Node::Sum(s) => s,
            _ => unreachable!("root is checked to be a sum node"),
        }
    }

    /// Memoised scope of a node.
    pub fn scope(&self, node: NodeId) -> Result<&[usize]> {
        self.scopes
            .get(node.0)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Structural { node: node.0, message: "unknown node".into() })
    }

    pub fn leaf_count(&self) -> usize {
        self.order.iter().filter(|&&i| matches!(self.nodes[i], Node::Leaf(_))).count()
    }

    pub fn graph(&self) -> SpnGraph {
        SpnGraph { nodes: self.nodes.clone(), root: self.root, dimension: self.dimension }
    }
}
