//! Latent-space counterfactual search against the circuit or the classifier
//! head, with decoded aggregates and signed difference maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::circuit::{argmax, Circuit, GradTarget};
use crate::neural::{DenseNet, Mode};
use crate::par::{self, Execution};
use crate::vae::{log_softmax, VaeModel};
use crate::{Error, Result};

pub const CF_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Spn,
    Mlp,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Spn => "SPN",
            BackendKind::Mlp => "MLP",
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spn" => Ok(BackendKind::Spn),
            "mlp" => Ok(BackendKind::Mlp),
            other => Err(Error::Config(format!("unknown backend '{other}'"))),
        }
    }
}

/// Classifier (and, for the circuit, density) driving the search.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Spn(&'a Circuit),
    Mlp(&'a DenseNet),
}

impl<'a> Backend<'a> {
    /// Resolves `kind` against the available models.
    pub fn resolve(kind: BackendKind, model: &'a VaeModel, circuit: Option<&'a Circuit>) -> Result<Self> {
        match kind {
            BackendKind::Spn => circuit
                .map(Backend::Spn)
                .ok_or_else(|| Error::Config("the SPN backend needs a circuit".into())),
            BackendKind::Mlp => Ok(Backend::Mlp(&model.classifier)),
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Spn(_) => BackendKind::Spn,
            Backend::Mlp(_) => BackendKind::Mlp,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Backend::Spn(c) => c.num_classes(),
            Backend::Mlp(n) => n.output_width(),
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Backend::Spn(c) => c.dimension(),
            Backend::Mlp(n) => n.input_width(),
        }
    }

    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        match self {
            Backend::Spn(c) => c.predict(z),
            Backend::Mlp(n) => Ok(argmax(&n.eval(z)?)),
        }
    }

    /// `log p(class | z)` and its gradient with respect to `z`.
    pub fn log_posterior_grad(&self, z: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
        match self {
            Backend::Spn(c) => c.grad_z(z, GradTarget::LogPosterior(class)),
            Backend::Mlp(n) => {
                let trace = n.forward(z, Mode::Eval)?;
                let logp = log_softmax(trace.output());
                if class >= logp.len() {
                    return Err(Error::input(format!("class {class} out of range for {} classes", logp.len())));
                }
                let out_grad: Vec<f64> = logp
                    .iter()
                    .enumerate()
                    .map(|(k, lp)| if k == class { 1.0 } else { 0.0 } - lp.exp())
                    .collect();
                let (_, grad) = n.backward(&trace, &out_grad);
                Ok((logp[class], grad))
            }
        }
    }

    /// `log p(z)`; only the circuit carries a density.
    pub fn log_density_grad(&self, z: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        match self {
            Backend::Spn(c) => c.grad_z(z, GradTarget::LogMarginal).map(Some),
            Backend::Mlp(_) => Ok(None),
        }
    }

    pub fn log_density(&self, z: &[f64]) -> Result<Option<f64>> {
        match self {
            Backend::Spn(c) => c.log_marginal(z).map(Some),
            Backend::Mlp(_) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfConfig {
    pub target_class: usize,
    /// proximity weight
    pub beta: f64,
    /// likelihood-preservation weight
    pub gamma: f64,
    pub replicates: usize,
    pub step_size: f64,
    pub max_steps: usize,
    pub backend: BackendKind,
    pub seed: u64,
    /// Norm bound on the classifier and likelihood part of each step.
    pub max_grad_norm: Option<f64>,
    /// Stop a replicate as soon as it reaches the target class.
    pub early_stop: bool,
    /// Record the objective every `trace_stride` steps (and after the last).
    pub trace_stride: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            target_class: 1,
            beta: 0.0,
            gamma: 0.0,
            replicates: 5,
            step_size: 0.05,
            max_steps: 1000,
            backend: BackendKind::Spn,
            seed: 0,
            max_grad_norm: Some(10.0),
            early_stop: false,
            trace_stride: 1,
            execution: Execution::default(),
        }
    }
}

impl CfConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and non-negative");
        }
        if self.backend == BackendKind::Mlp && self.gamma != 0.0 {
            return bad("gamma must be 0 for the MLP backend, which has no density");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.trace_stride == 0 {
            return bad("trace_stride must be at least 1");
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return bad("max_grad_norm must be positive");
            }
        }
        Ok(())
    }
}

/// Objective value and gradient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub log_posterior: f64,
    /// `log p(z′)` when the backend has a density
    pub log_density: Option<f64>,
}

/// `log p(y_cf|z′) − β‖z′−z‖² − γ·|log p(z′) − log p(z)|` and its gradient
/// in `z′`; the absolute value has subgradient 0 at equality.
///
/// `origin_log_density` may carry a cached `log p(z)`.
pub fn cf_objective(
    z_prime: &[f64],
    z_origin: &[f64],
    config: &CfConfig,
    backend: &Backend<'_>,
    origin_log_density: Option<f64>,
) -> Result<Objective> {
    let parts = objective_parts(z_prime, z_origin, config, backend, origin_log_density)?;
    let mut gradient = parts.ascent;
    let mut proximity = 0.0;
    for (g, (a, b)) in gradient.iter_mut().zip(z_prime.iter().zip(z_origin)) {
        proximity += (a - b) * (a - b);
        *g -= 2.0 * config.beta * (a - b);
    }
    let value = parts.log_posterior - config.beta * proximity - config.gamma * parts.likelihood_gap;
    Ok(Objective { value, gradient, log_posterior: parts.log_posterior, log_density: parts.log_density })
}

struct Parts {
    log_posterior: f64,
    log_density: Option<f64>,
    /// |log p(z′) − log p(z)|, 0 without density
    likelihood_gap: f64,
    /// gradient of everything except the proximity term
    ascent: Vec<f64>,
}

fn objective_parts(
    z_prime: &[f64],
    z_origin: &[f64],
    config: &CfConfig,
    backend: &Backend<'_>,
    origin_log_density: Option<f64>,
) -> Result<Parts> {
    let d = backend.dimension();
    if z_prime.len() != d || z_origin.len() != d {
        return Err(Error::input(format!("latent vectors must have dimension {d}")));
    }
    if backend.kind() == BackendKind::Mlp && config.gamma != 0.0 {
        return Err(Error::Config("gamma must be 0 for the MLP backend".into()));
    }
    let (log_posterior, mut ascent) = backend.log_posterior_grad(z_prime, config.target_class)?;
    let mut log_density = None;
    let mut likelihood_gap = 0.0;
    if let Some((lp, grad)) = backend.log_density_grad(z_prime)? {
        log_density = Some(lp);
        if config.gamma > 0.0 {
            let origin = match origin_log_density {
                Some(v) => v,
                None => backend.log_density(z_origin)?.expect("backend has a density"),
            };
            let diff = lp - origin;
            likelihood_gap = diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            for (a, g) in ascent.iter_mut().zip(&grad) {
                *a -= config.gamma * sign * g;
            }
        }
    }
    Ok(Parts { log_posterior, log_density, likelihood_gap, ascent })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub z: Vec<f64>,
    pub z_cf: Vec<f64>,
    /// First step index at which the backend predicts the target class.
    pub switch_epoch: Option<usize>,
    /// Objective value every `trace_stride` steps and after the last one.
    pub objective: Vec<f64>,
    pub prediction_origin: usize,
    pub prediction_cf: usize,
    pub log_density_origin: Option<f64>,
    pub log_density_cf: Option<f64>,
}

impl ReplicateRecord {
    pub fn displacement(&self) -> f64 {
        self.z.iter().zip(&self.z_cf).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResult {
    pub version: u32,
    pub config: CfConfig,
    pub instance: Option<usize>,
    pub label: Option<usize>,
    /// (height, width)
    pub shape: (usize, usize),
    pub replicates: Vec<ReplicateRecord>,
    /// mean decoded original
    pub x_tilde: Vec<f64>,
    /// mean decoded counterfactual
    pub x_cf: Vec<f64>,
    pub difference: DifferenceMap,
    /// Euclidean distance between the input and `x_cf`.
    pub proximity_l2: f64,
    /// encoder means of the input and of `x_cf`
    pub embedding_origin: Vec<f64>,
    pub embedding_cf: Vec<f64>,
    /// backend predictions after encoding the input and `x_cf`
    pub pipeline_prediction_origin: usize,
    pub pipeline_prediction_cf: usize,
}

impl CfResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let r: CfResult = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.version != CF_FORMAT_VERSION {
            return Err(Error::Version { found: r.version, expected: CF_FORMAT_VERSION });
        }
        Ok(r)
    }

    /// Whether any replicate reached the target class.
    pub fn any_switched(&self) -> bool {
        self.replicates.iter().any(|r| r.switch_epoch.is_some())
    }
}

fn clip(g: &mut [f64], bound: Option<f64>) {
    if let Some(m) = bound {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > m {
            g.iter_mut().for_each(|v| *v *= m / norm);
        }
    }
}

/// Runs the search from `z` for one replicate.
pub fn optimize_replicate(z: &[f64], config: &CfConfig, backend: &Backend<'_>, replicate: usize) -> Result<ReplicateRecord> {
    let origin_density = backend.log_density(z)?;
    let prediction_origin = backend.predict(z)?;
    let mut current = z.to_vec();
    let mut trace = Vec::with_capacity(config.max_steps / config.trace_stride + 2);
    let mut switch_epoch = None;
    let eta = config.step_size;
    let shrink = 1.0 + 2.0 * eta * config.beta;
    let mut step = 0;
    loop {
        let parts = objective_parts(&current, z, config, backend, origin_density)?;
        let proximity: f64 = current.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = parts.log_posterior - config.beta * proximity - config.gamma * parts.likelihood_gap;
        if !value.is_finite() || parts.ascent.iter().any(|g| !g.is_finite()) {
            return Err(Error::Optimization { step, message: "objective or gradient is not finite".into() });
        }
        if switch_epoch.is_none() && backend.predict(&current)? == config.target_class {
            switch_epoch = Some(step);
        }
        let last = step == config.max_steps || (config.early_stop && switch_epoch.is_some());
        if last || step % config.trace_stride == 0 {
            trace.push(value);
        }
        if last {
            break;
        }
        let mut g = parts.ascent;
        clip(&mut g, config.max_grad_norm);
        // explicit step on the classifier and likelihood terms, implicit
        // (proximal) step on the quadratic penalty
        for ((c, gi), zi) in current.iter_mut().zip(&g).zip(z) {
            *c = (*c + eta * gi + 2.0 * eta * config.beta * zi) / shrink;
        }
        step += 1;
    }
    Ok(ReplicateRecord {
        replicate,
        z: z.to_vec(),
        prediction_cf: backend.predict(&current)?,
        log_density_cf: backend.log_density(&current)?,
        z_cf: current,
        switch_epoch,
        objective: trace,
        prediction_origin,
        log_density_origin: origin_density,
    })
}

/// Draws `R` posterior samples for `x`, optimizes each towards the target
/// class and decodes the means of the originals and counterfactuals.
pub fn generate(x: &[f64], shape: (usize, usize), model: &VaeModel, config: &CfConfig, circuit: Option<&Circuit>) -> Result<CfResult> {
    config.check()?;
    if x.len() != model.input_width() || shape.0 * shape.1 != x.len() {
        return Err(Error::input("instance does not match the model input shape"));
    }
    let backend = Backend::resolve(config.backend, model, circuit)?;
    if backend.dimension() != model.latent_dim {
        return Err(Error::Config("backend dimension does not match the latent dimension".into()));
    }
    if config.target_class >= backend.num_classes() {
        return Err(Error::Config(format!("target class {} out of range", config.target_class)));
    }
    let (mu, logvar) = model.encode(x)?;
    let records: Vec<ReplicateRecord> = par::map_range(config.execution, config.replicates, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ r as u64);
        let z: Vec<f64> = mu
            .iter()
            .zip(&logvar)
            .map(|(m, lv)| m + (0.5 * lv).exp() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        optimize_replicate(&z, config, &backend, r)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let decoded: Vec<(Vec<f64>, Vec<f64>)> = records
        .iter()
        .map(|r| Ok((model.decode(&r.z)?, model.decode(&r.z_cf)?)))
        .collect::<Result<_>>()?;
    let n = records.len() as f64;
    let mut x_tilde = vec![0.0; x.len()];
    let mut x_cf = vec![0.0; x.len()];
    for (orig, cf) in &decoded {
        x_tilde.iter_mut().zip(orig).for_each(|(a, v)| *a += v);
        x_cf.iter_mut().zip(cf).for_each(|(a, v)| *a += v);
    }
    x_tilde.iter_mut().for_each(|v| *v /= n);
    x_cf.iter_mut().for_each(|v| *v /= n);

    let difference = difference_map(&x_cf, &x_tilde, shape)?;
    let proximity_l2 = crate::metrics::proximity_l2(x, &x_cf)?;
    let embedding_cf = model.encode(&x_cf)?.0;
    Ok(CfResult {
        version: CF_FORMAT_VERSION,
        config: config.clone(),
        instance: None,
        label: None,
        shape,
        pipeline_prediction_origin: backend.predict(&mu)?,
        pipeline_prediction_cf: backend.predict(&embedding_cf)?,
        replicates: records,
        x_tilde,
        x_cf,
        difference,
        proximity_l2,
        embedding_origin: mu,
        embedding_cf,
    })
}

/// Signed image `x_cf − x̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub fn difference_map(x_cf: &[f64], x_tilde: &[f64], shape: (usize, usize)) -> Result<DifferenceMap> {
    if x_cf.len() != x_tilde.len() || x_cf.len() != shape.0 * shape.1 {
        return Err(Error::input(format!(
            "difference map needs two {}x{} images, got {} and {} values",
            shape.0,
            shape.1,
            x_cf.len(),
            x_tilde.len()
        )));
    }
    Ok(DifferenceMap {
        height: shape.0,
        width: shape.1,
        values: x_cf.iter().zip(x_tilde).map(|(a, b)| a - b).collect(),
    })
}

impl DifferenceMap {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Diverging colours on a scale symmetric about zero: red for positive,
    /// blue for negative, white for zero.
    pub fn to_rgb(&self) -> image::RgbImage {
        let scale = self.max_abs();
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |c, r| {
            let v = self.values[r as usize * self.width + c as usize];
            let t = if scale > 0.0 { (v.abs() / scale).min(1.0) } else { 0.0 };
            let fade = (255.0 * (1.0 - t)).round() as u8;
            if v > 0.0 {
                image::Rgb([255, fade, fade])
            } else if v < 0.0 {
                image::Rgb([fade, fade, 255])
            } else {
                image::Rgb([255, 255, 255])
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.to_rgb().write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        crate::pipeline::write_atomic(path, &bytes)
    }

    /// Mean absolute value inside and outside the mask.
    pub fn mass_inside_outside(&self, inside: impl Fn(usize, usize) -> bool) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.values[r * self.width + c].abs();
                if inside(r, c) {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        (mean(si, ni), mean(so, no))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::SpnBuilder;
    use crate::neural::rng_from_seed;
    use crate::vae::TrainConfig;
    use approx::assert_abs_diff_eq;

    /// Classes N(−1, 0.5²) and N(1, 0.5²) with equal priors.
    fn mirror() -> Circuit {
        let mut b = SpnBuilder::new();
        let a = b.leaf(0, -1.0, 0.5);
        let c = b.leaf(0, 1.0, 0.5);
        Circuit::from_class_subnetworks(b, vec![a, c], vec![0.5, 0.5], 1).unwrap()
    }

    fn cfg(beta: f64, gamma: f64) -> CfConfig {
        CfConfig { beta, gamma, max_grad_norm: None, ..Default::default() }
    }

    #[test]
    fn objective_at_origin_is_log_posterior() {
        let c = mirror();
        let b = Backend::Spn(&c);
        let z = [0.3];
        let o = cf_objective(&z, &z, &cfg(2.0, 5.0), &b, None).unwrap();
        let (lp, _) = c.grad_z(&z, GradTarget::LogPosterior(1)).unwrap();
        assert_eq!(o.value, lp);
    }

    #[test]
    fn unit_displacement_costs_beta() {
        let c = mirror();
        let b = Backend::Spn(&c);
        let base = cf_objective(&[1.0], &[1.0], &cfg(0.0, 0.0), &b, None).unwrap();
        let moved0 = cf_objective(&[1.0], &[0.0], &cfg(0.0, 0.0), &b, None).unwrap();
        let moved1 = cf_objective(&[1.0], &[0.0], &cfg(1.0, 0.0), &b, None).unwrap();
        assert_eq!(base.value, moved0.value);
        assert_abs_diff_eq!(moved1.value - moved0.value, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(moved1.gradient[0] - moved0.gradient[0], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn stationary_point_of_mirror_objective() {
        // oracle: fine grid search of the closed-form objective
        // log σ(8z) − (z + 1)² on [−1, 1]
        let f = |z: f64| -(1.0 + (-8.0 * z).exp()).ln() - (z + 1.0) * (z + 1.0);
        let grid_best = (0..=200_000)
            .map(|i| -1.0 + 2.0 * i as f64 / 200_000.0)
            .max_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert!((grid_best - 0.12).abs() < 0.01, "grid optimum {grid_best}");

        let c = mirror();
        let b = Backend::Spn(&c);
        let config = CfConfig { beta: 1.0, step_size: 0.01, max_steps: 5000, ..cfg(1.0, 0.0) };
        let o = cf_objective(&[grid_best], &[-1.0], &config, &b, None).unwrap();
        assert!(o.gradient[0].abs() < 1e-3);
        assert_abs_diff_eq!(o.value, f(grid_best), epsilon = 1e-12);
        let rec = optimize_replicate(&[-1.0], &config, &b, 0).unwrap();
        assert!((rec.z_cf[0] - grid_best).abs() < 1e-4, "{}", rec.z_cf[0]);
        assert_eq!(rec.switch_epoch.map(|s| s > 0), Some(true));
    }

    #[test]
    fn likelihood_term_uses_zero_subgradient_at_equality() {
        let c = mirror();
        let b = Backend::Spn(&c);
        let z = [0.2];
        let with = cf_objective(&z, &z, &cfg(0.0, 3.0), &b, None).unwrap();
        let without = cf_objective(&z, &z, &cfg(0.0, 0.0), &b, None).unwrap();
        assert_eq!(with.gradient, without.gradient);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let c = mirror();
        let b = Backend::Spn(&c);
        let config = cfg(0.7, 1.3);
        let z = [-0.8];
        for zp in [-0.3, 0.4, 1.7] {
            let o = cf_objective(&[zp], &z, &config, &b, None).unwrap();
            let h = 1e-5;
            let fd = (cf_objective(&[zp + h], &z, &config, &b, None).unwrap().value
                - cf_objective(&[zp - h], &z, &config, &b, None).unwrap().value)
                / (2.0 * h);
            let rel = (fd - o.gradient[0]).abs() / fd.abs().max(o.gradient[0].abs()).max(1e-6);
            assert!(rel < 1e-4, "z′={zp}: {fd} vs {}", o.gradient[0]);
        }
    }

    fn tiny_model() -> VaeModel {
        let config = TrainConfig { latent_dim: 1, hidden: vec![4], classifier_hidden: vec![3], ..Default::default() };
        VaeModel::new(4, 2, &config, &mut rng_from_seed(2)).unwrap()
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let model = tiny_model();
        let b = Backend::Mlp(&model.classifier);
        let config = CfConfig { backend: BackendKind::Mlp, ..cfg(0.5, 0.0) };
        for zp in [-1.1, 0.35, 2.0] {
            let o = cf_objective(&[zp], &[0.1], &config, &b, None).unwrap();
            let h = 1e-5;
            let fd = (cf_objective(&[zp + h], &[0.1], &config, &b, None).unwrap().value
                - cf_objective(&[zp - h], &[0.1], &config, &b, None).unwrap().value)
                / (2.0 * h);
            let rel = (fd - o.gradient[0]).abs() / fd.abs().max(o.gradient[0].abs()).max(1e-6);
            assert!(rel < 1e-4);
        }
    }

    #[test]
    fn configuration_errors() {
        let model = tiny_model();
        let x = [0.1, 0.2, 0.3, 0.4];
        let missing = generate(&x, (2, 2), &model, &CfConfig::default(), None);
        assert!(matches!(missing, Err(Error::Config(_))));
        let mlp_gamma = CfConfig { backend: BackendKind::Mlp, gamma: 1.0, ..Default::default() };
        assert!(matches!(generate(&x, (2, 2), &model, &mlp_gamma, None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let model = tiny_model();
        let c = mirror();
        let x = [0.1, 0.2, 0.3, 0.4];
        let config = CfConfig { max_steps: 0, replicates: 3, ..Default::default() };
        let r = generate(&x, (2, 2), &model, &config, Some(&c)).unwrap();
        assert_eq!(r.x_cf, r.x_tilde);
        assert!(r.difference.values.iter().all(|v| *v == 0.0));
        for rec in &r.replicates {
            assert_eq!(rec.z, rec.z_cf);
            assert_eq!(rec.objective.len(), 1);
            assert_eq!(rec.prediction_origin, rec.prediction_cf);
        }
    }

    #[test]
    fn already_target_switches_at_zero() {
        let model = tiny_model();
        let c = mirror();
        let x = [0.1, 0.2, 0.3, 0.4];
        let z0 = model.encode(&x).unwrap().0;
        // pick the class the circuit already assigns to the encoding
        let target = c.predict(&z0).unwrap();
        let config = CfConfig { target_class: target, max_steps: 20, replicates: 4, step_size: 0.0001, ..Default::default() };
        let r = generate(&x, (2, 2), &model, &config, Some(&c)).unwrap();
        for rec in &r.replicates {
            if rec.prediction_origin == target {
                assert_eq!(rec.switch_epoch, Some(0));
            }
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let model = tiny_model();
        let c = mirror();
        let x = [0.9, 0.2, 0.5, 0.4];
        let config = CfConfig { max_steps: 50, replicates: 4, target_class: 0, ..Default::default() };
        let a = generate(&x, (2, 2), &model, &config, Some(&c)).unwrap();
        let seq = CfConfig { execution: Execution::Sequential, ..config.clone() };
        let mut s = generate(&x, (2, 2), &model, &seq, Some(&c)).unwrap();
        s.config.execution = a.config.execution;
        assert_eq!(a, s);
        let fewer = CfConfig { replicates: 2, ..config };
        let b = generate(&x, (2, 2), &model, &fewer, Some(&c)).unwrap();
        assert_eq!(a.replicates[..2], b.replicates[..]);
    }

    #[test]
    fn large_beta_stays_close() {
        let c = mirror();
        let b = Backend::Spn(&c);
        let disp = |beta: f64| {
            let config = CfConfig { max_steps: 300, ..cfg(beta, 0.0) };
            optimize_replicate(&[-1.0], &config, &b, 0).unwrap().displacement()
        };
        let (d0, d1, d3) = (disp(0.0), disp(1.0), disp(1000.0));
        assert!(d0 >= d1 && d1 >= d3, "{d0} {d1} {d3}");
        assert!(d3 < 0.01);
    }

    #[test]
    fn difference_map_examples() {
        let same = difference_map(&[0.2, 0.4], &[0.2, 0.4], (1, 2)).unwrap();
        assert!(same.values.iter().all(|v| *v == 0.0));
        let one = difference_map(&[0.2, 1.5, 0.1], &[0.2, 0.5, 0.1], (1, 3)).unwrap();
        assert_eq!(one.values.iter().filter(|v| **v > 0.0).count(), 1);
        assert_eq!(one.values[1], 1.0);
        assert!(matches!(difference_map(&[0.0], &[0.0, 1.0], (1, 2)), Err(Error::Input(_))));
    }

    #[test]
    fn rendering_is_diverging() {
        let m = DifferenceMap { height: 1, width: 3, values: vec![0.5, 0.0, -0.25] };
        let img = m.to_rgb();
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(2, 0).0, [128, 128, 255]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        m.save_png(&p).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!(back, img);
    }

    #[test]
    fn result_json_round_trip() {
        let model = tiny_model();
        let c = mirror();
        let config = CfConfig { max_steps: 5, replicates: 2, ..Default::default() };
        let r = generate(&[0.1, 0.2, 0.3, 0.4], (2, 2), &model, &config, Some(&c)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cf.json");
        r.save(&p).unwrap();
        assert_eq!(CfResult::load(&p).unwrap(), r);
    }
}
