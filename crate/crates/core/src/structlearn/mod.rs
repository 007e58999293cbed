//! Top-down structure learning of Gaussian-leaf sum-product networks over
//! latent codes.
//!
//! The root is split by class exactly once.  Each class sub-network is then
//! grown recursively: a single column (or too few rows) becomes leaves,
//! otherwise columns are split into correlation components, and when they do
//! not separate the rows are clustered with seeded k-means.

mod independence;
mod kmeans;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, Node, NodeId, SpnBuilder};
use crate::par::{self, Execution};
use crate::{Error, Result};

pub use independence::{independence_components, pearson};
pub use kmeans::{cluster_rows, Clustering};

/// Latent codes with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub group_ids: Vec<u64>,
    pub column_ids: Vec<usize>,
    pub num_classes: usize,
}

impl LatentTable {
    /// Columns are numbered `0..d`, group ids default to the row index, and
    /// the class count is taken from the largest label.
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let group_ids = (0..rows.len() as u64).collect();
        let d = rows.first().map_or(0, Vec::len);
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let t = LatentTable { rows, labels, group_ids, column_ids: (0..d).collect(), num_classes };
        t.check()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.column_ids.len()
    }

    fn check(&self) -> Result<()> {
        let d = self.column_ids.len();
        if self.labels.len() != self.rows.len() || self.group_ids.len() != self.rows.len() {
            return Err(Error::input("latent table columns have inconsistent lengths"));
        }
        if let Some(i) = self.rows.iter().position(|r| r.len() != d) {
            return Err(Error::input(format!("latent row {i} does not have {d} entries")));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::input(format!("label {l} out of range for {} classes", self.num_classes)));
        }
        let mut ids = self.column_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != d {
            return Err(Error::input("latent column ids are not unique"));
        }
        Ok(())
    }

    /// Writes the `z0..z{d-1},label,group_id` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.column_ids.iter().map(|c| format!("z{c}")).collect();
        header.push("label".into());
        header.push("group_id".into());
        w.write_record(&header)?;
        for ((row, label), group) in self.rows.iter().zip(&self.labels).zip(&self.group_ids) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            rec.push(group.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::pipeline::write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let n_fields = header.len();
        if n_fields < 3 || &header[n_fields - 2] != "label" || &header[n_fields - 1] != "group_id" {
            return Err(Error::input("latent CSV header must end with label,group_id"));
        }
        let column_ids = header
            .iter()
            .take(n_fields - 2)
            .map(|h| {
                h.strip_prefix('z')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::input(format!("bad latent column name `{h}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let parse_err = |line: usize, what: &str| Error::input(format!("latent CSV row {line}: bad {what}"));
        let (mut rows, mut labels, mut group_ids) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .take(n_fields - 2)
                .map(|v| v.parse::<f64>().map_err(|_| parse_err(line, "value")))
                .collect::<Result<Vec<f64>>>()?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(line, "non-finite value"));
            }
            rows.push(row);
            labels.push(rec[n_fields - 2].parse().map_err(|_| parse_err(line, "label"))?);
            group_ids.push(rec[n_fields - 1].parse().map_err(|_| parse_err(line, "group id"))?);
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let t = LatentTable { rows, labels, group_ids, column_ids, num_classes };
        t.check()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    /// Columns with `|pearson| >= threshold` are kept together.
    pub independence_threshold: f64,
    /// Below this many rows a node becomes a fully factorised product of leaves.
    pub min_instances: usize,
    pub num_row_clusters: usize,
    pub seed: u64,
    pub sigma_floor: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            independence_threshold: 0.3,
            min_instances: 30,
            num_row_clusters: 2,
            seed: 0,
            sigma_floor: crate::circuit::SIGMA_FLOOR,
            execution: Execution::default(),
        }
    }
}

impl LearnConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.independence_threshold > 0.0 && self.independence_threshold < 1.0) {
            return Err(Error::Config("independence_threshold must lie in (0, 1)".into()));
        }
        if self.min_instances == 0 {
            return Err(Error::Config("min_instances must be positive".into()));
        }
        if self.num_row_clusters < 2 {
            return Err(Error::Config("num_row_clusters must be at least 2".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Learns a class-partitioned circuit: root priors are the empirical class
/// frequencies and each class gets its own recursively learned sub-network.
pub fn learn_spn(table: &LatentTable, config: &LearnConfig) -> Result<Circuit> {
    config.check()?;
    table.check()?;
    let d = table.dimension();
    if table.is_empty() || d == 0 {
        return Err(Error::input("latent table must have at least one row and one column"));
    }
    if table.rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("latent table contains non-finite entries"));
    }
    let n = table.len() as f64;
    let mut members = vec![Vec::new(); table.num_classes];
    for (i, &l) in table.labels.iter().enumerate() {
        members[l].push(i);
    }
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::Learning(format!("class {k} has no rows")));
    }

    let subnets = par::map_range(config.execution, table.num_classes, |k| {
        let columns: Vec<Vec<f64>> =
            (0..d).map(|j| members[k].iter().map(|&i| table.rows[i][j]).collect()).collect();
        let mut learner = Learner {
            columns: &columns,
            config,
            builder: SpnBuilder::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        };
        let rows: Vec<usize> = (0..members[k].len()).collect();
        let cols: Vec<usize> = (0..d).collect();
        let root = learner.learn(&rows, &cols)?;
        Ok::<_, Error>((learner.builder, root))
    });

    // merge the per-class graphs, shifting node ids
    let mut builder = SpnBuilder::new();
    let mut class_children = Vec::with_capacity(subnets.len());
    for sub in subnets {
        let (sub_builder, sub_root) = sub?;
        let offset = builder.len();
        let sub_graph = sub_builder.finish(sub_root, d);
        for node in sub_graph.nodes {
            builder.push(shift(node, offset));
        }
        class_children.push(NodeId(sub_root.0 + offset));
    }
    let priors = members.iter().map(|m| m.len() as f64 / n).collect();
    Circuit::from_class_subnetworks(builder, class_children, priors, d)
}

fn shift(node: Node, offset: usize) -> Node {
    let mv = |c: Vec<NodeId>| c.into_iter().map(|c| NodeId(c.0 + offset)).collect();
    match node {
        Node::Sum(mut s) => {
            s.children = mv(s.children);
            Node::Sum(s)
        }
        Node::Product(mut p) => {
            p.children = mv(p.children);
            Node::Product(p)
        }
        leaf => leaf,
    }
}

struct Learner<'a> {
    /// column-major data of one class
    columns: &'a [Vec<f64>],
    config: &'a LearnConfig,
    builder: SpnBuilder,
    rng: ChaCha8Rng,
}

impl Learner<'_> {
    fn leaf(&mut self, rows: &[usize], col: usize) -> NodeId {
        let values = &self.columns[col];
        let n = rows.len() as f64;
        let mean = rows.iter().map(|&r| values[r]).sum::<f64>() / n;
        let var = rows.iter().map(|&r| (values[r] - mean).powi(2)).sum::<f64>() / n;
        self.builder.leaf(col, mean, var.sqrt().max(self.config.sigma_floor))
    }

    fn factorized(&mut self, rows: &[usize], cols: &[usize]) -> NodeId {
        if cols.len() == 1 {
            return self.leaf(rows, cols[0]);
        }
        let leaves = cols.iter().map(|&c| self.leaf(rows, c)).collect();
        self.builder.product(leaves)
    }

    fn learn(&mut self, rows: &[usize], cols: &[usize]) -> Result<NodeId> {
        if cols.len() == 1
            || rows.len() < self.config.min_instances
            || rows.len() < 2
            || rows.len() < self.config.num_row_clusters
        {
            return Ok(self.factorized(rows, cols));
        }
        let sub: Vec<Vec<f64>> =
            cols.iter().map(|&c| rows.iter().map(|&r| self.columns[c][r]).collect()).collect();
        if sub.iter().all(|c| c.iter().all(|v| *v == c[0])) {
            return Ok(self.factorized(rows, cols));
        }

        let components = independence_components(&sub, self.config.independence_threshold)?;
        if components.len() > 1 {
            let mut children = Vec::with_capacity(components.len());
            for comp in components {
                let comp_cols: Vec<usize> = comp.iter().map(|&i| cols[i]).collect();
                children.push(self.learn(rows, &comp_cols)?);
            }
            return Ok(self.builder.product(children));
        }

        let points: Vec<Vec<f64>> =
            (0..rows.len()).map(|i| sub.iter().map(|c| c[i]).collect()).collect();
        let seed = self.rng.random::<u64>();
        let clustering = cluster_rows(&points, self.config.num_row_clusters, seed)?;
        let groups: Vec<Vec<usize>> = (0..self.config.num_row_clusters)
            .map(|k| clustering.members(k).into_iter().map(|i| rows[i]).collect())
            .collect();
        if groups.iter().filter(|g| !g.is_empty()).count() < 2 {
            return Ok(self.factorized(rows, cols));
        }
        let mut children = Vec::new();
        let mut weights = Vec::new();
        for g in groups.iter().filter(|g| !g.is_empty()) {
            children.push(self.learn(g, cols)?);
            weights.push(g.len() as f64 / rows.len() as f64);
        }
        Ok(self.builder.sum(children, weights))
    }
}
