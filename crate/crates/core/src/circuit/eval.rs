use super::{Circuit, Node};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Per-variable evidence; `None` marks a marginalised variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub values: Vec<Option<f64>>,
}

impl Evidence {
    pub fn full(z: &[f64]) -> Self {
        Evidence { values: z.iter().copied().map(Some).collect() }
    }

    pub fn marginalized(dimension: usize) -> Self {
        Evidence { values: vec![None; dimension] }
    }

    pub fn with(mut self, variable: usize, value: Option<f64>) -> Self {
        self.values[variable] = value;
        self
    }
}

/// Scalar whose gradient with respect to the latent input is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// `log p(z)`
    LogMarginal,
    /// `log p(y = class | z)`
    LogPosterior(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probabilities: Vec<f64>,
    /// `log p(y = k) + log p(z | y = k)` per class.
    pub log_joint: Vec<f64>,
    pub log_marginal: f64,
}

impl ClassPosterior {
    /// Index of the most probable class; ties go to the smaller index.
    pub fn argmax(&self) -> usize {
        argmax(&self.log_joint)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Circuit {
    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dimension {
            return Err(Error::input(format!(
                "latent vector has length {}, circuit dimension is {}",
                z.len(),
                self.dimension
            )));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("latent coordinate {i} is not finite")));
        }
        Ok(())
    }

    /// Log value of every reachable node; unreachable entries stay NaN.
    fn forward(&self, evidence: &[Option<f64>]) -> Vec<f64> {
        let mut values = vec![f64::NAN; self.nodes.len()];
        for &i in &self.order {
            values[i] = match &self.nodes[i] {
                Node::Leaf(l) => evidence[l.variable].map_or(0.0, |x| l.log_pdf(x)),
                Node::Product(p) => p.children.iter().map(|c| values[c.0]).sum(),
                Node::Sum(s) => log_sum_exp(
                    s.children.iter().zip(&s.weights).map(|(c, w)| w.ln() + values[c.0]),
                ),
            };
        }
        values
    }

    /// Natural-log density of the assigned variables with the rest marginalised.
    pub fn log_density(&self, evidence: &Evidence) -> Result<f64> {
        if evidence.values.len() != self.dimension {
            return Err(Error::input(format!(
                "evidence has length {}, circuit dimension is {}",
                evidence.values.len(),
                self.dimension
            )));
        }
        if let Some(i) = evidence.values.iter().position(|v| v.is_some_and(|x| !x.is_finite())) {
            return Err(Error::input(format!("evidence for variable {i} is not finite")));
        }
        Ok(self.forward(&evidence.values)[self.root.0])
    }

    fn full_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let ev: Vec<Option<f64>> = z.iter().copied().map(Some).collect();
        Ok(self.forward(&ev))
    }

    /// `log p(z)`, the prior-weighted mixture of the class sub-networks.
    pub fn log_marginal(&self, z: &[f64]) -> Result<f64> {
        Ok(self.full_forward(z)?[self.root.0])
    }

    /// Bayes posterior over classes from the class sub-networks.
    pub fn class_posterior(&self, z: &[f64]) -> Result<ClassPosterior> {
        let values = self.full_forward(z)?;
        Ok(self.posterior_from_values(&values))
    }

    fn posterior_from_values(&self, values: &[f64]) -> ClassPosterior {
        let log_joint: Vec<f64> = self
            .class_children()
            .iter()
            .zip(self.class_priors())
            .map(|(c, p)| p.ln() + values[c.0])
            .collect();
        let log_marginal = log_sum_exp(log_joint.iter().copied());
        let mut probabilities: Vec<f64> =
            log_joint.iter().map(|lj| (lj - log_marginal).exp()).collect();
        let total: f64 = probabilities.iter().sum();
        probabilities.iter_mut().for_each(|p| *p /= total);
        ClassPosterior { probabilities, log_joint, log_marginal }
    }

    /// Most probable class at `z`.
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(self.class_posterior(z)?.argmax())
    }

    /// Value and exact gradient of the selected scalar with respect to `z`,
    /// from one forward and one backward sweep.
    pub fn grad_z(&self, z: &[f64], target: GradTarget) -> Result<(f64, Vec<f64>)> {
        let values = self.full_forward(z)?;
        let n = self.nodes.len();
        // adjoint[i] = d target / d log value of node i
        let mut adjoint = vec![0.0; n];
        let value = match target {
            GradTarget::LogMarginal => {
                adjoint[self.root.0] = 1.0;
                values[self.root.0]
            }
            GradTarget::LogPosterior(k) => {
                let k_node = *self.class_children().get(k).ok_or_else(|| {
                    Error::input(format!(
                        "class {k} out of range for {} classes",
                        self.num_classes()
                    ))
                })?;
                adjoint[self.root.0] -= 1.0;
                adjoint[k_node.0] += 1.0;
                self.class_priors()[k].ln() + values[k_node.0] - values[self.root.0]
            }
        };

        let mut grad = vec![0.0; self.dimension];
        for &i in self.order.iter().rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            match &self.nodes[i] {
                Node::Leaf(l) => grad[l.variable] += a * l.score(z[l.variable]),
                Node::Product(p) => {
                    for c in &p.children {
                        adjoint[c.0] += a;
                    }
                }
                Node::Sum(s) => {
                    let parent = values[i];
                    if parent == f64::NEG_INFINITY {
                        continue;
                    }
                    for (c, w) in s.children.iter().zip(&s.weights) {
                        if *w > 0.0 {
                            adjoint[c.0] += a * w * (values[c.0] - parent).exp();
                        }
                    }
                }
            }
        }
        Ok((value, grad))
    }

    /// `log p(z)` for many latent vectors.
    pub fn log_marginal_batch(&self, exec: Execution, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
        par::map_slice(exec, zs, |z| self.log_marginal(z)).into_iter().collect()
    }

    /// Class posteriors for many latent vectors.
    pub fn class_posterior_batch(
        &self,
        exec: Execution,
        zs: &[Vec<f64>],
    ) -> Result<Vec<ClassPosterior>> {
        par::map_slice(exec, zs, |z| self.class_posterior(z)).into_iter().collect()
    }
}
