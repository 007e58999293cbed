//! Semi-supervised VAE: encoder (latent mean and log-variance), Bernoulli
//! decoder and an MLP classifier head on the latent code, trained on the
//! weighted sum of reconstruction, KL and cross-entropy terms.

mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::neural::{sigmoid, Activation, DenseNet, DenseNetSpec, Mode, Params};
use crate::par::{self, Execution};
use crate::structlearn::LatentTable;
use crate::{Error, Result};

pub use train::{train, EpochRecord, TrainHistory};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Instances per gradient work unit; fixed so the reduction order does not
/// depend on the execution mode.
const GRAD_CHUNK: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// reconstruction weight
    pub beta0: f64,
    /// KL weight
    pub beta1: f64,
    /// classification weight
    pub beta2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub noise_sigma: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta0: 1.0,
            beta1: 0.1,
            beta2: 1.0,
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 50,
            seed: 0,
            latent_dim: 62,
            hidden: vec![128],
            classifier_hidden: vec![32],
            noise_sigma: 0.2,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let betas = [self.beta0, self.beta1, self.beta2];
        if betas.iter().any(|b| !(*b >= 0.0)) || betas.iter().all(|b| *b == 0.0) {
            return Err(Error::Config("betas must be non-negative with at least one positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::Config("learning rate, batch size and latent_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    /// outputs `[μ; log σ²]`, width `2 · latent_dim`
    pub encoder: DenseNet,
    /// outputs Bernoulli logits per pixel
    pub decoder: DenseNet,
    /// outputs class logits
    pub classifier: DenseNet,
    pub latent_dim: usize,
}

/// Gradients of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: Params,
    pub decoder: Params,
    pub classifier: Params,
}

impl VaeGrads {
    fn zeros(model: &VaeModel) -> Self {
        VaeGrads {
            encoder: Params::zeros_like(&model.encoder.params),
            decoder: Params::zeros_like(&model.decoder.params),
            classifier: Params::zeros_like(&model.classifier.params),
        }
    }

    fn add_assign(&mut self, other: &VaeGrads) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
        self.classifier.add_assign(&other.classifier);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// mean per-pixel negative Bernoulli log-likelihood
    pub recon: f64,
    pub kld: f64,
    /// mean cross-entropy
    pub clf: f64,
}

/// `KL(N(μ, diag exp(logvar)) ‖ N(0, I))`.
pub fn kld_diagonal_gaussian(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::input("mu and logvar have different lengths"));
    }
    if mu.iter().chain(logvar).any(|v| !v.is_finite()) {
        return Err(Error::input("mu/logvar must be finite"));
    }
    Ok(0.5 * mu.iter().zip(logvar).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>())
}

/// `softplus(l) − x·l`, the Bernoulli negative log-likelihood of `x` under logit `l`.
fn bce_with_logit(logit: f64, x: f64) -> f64 {
    logit.max(0.0) - x * logit + (-logit.abs()).exp().ln_1p()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl VaeModel {
    pub fn new(input_width: usize, num_classes: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.check()?;
        if num_classes < 2 {
            return Err(Error::Config("the classifier head needs at least two classes".into()));
        }
        let d = config.latent_dim;
        let mut dec_hidden = config.hidden.clone();
        dec_hidden.reverse();
        let encoder = DenseNet::init(
            DenseNetSpec::mlp(input_width, &config.hidden, 2 * d, Activation::Identity).with_noise(config.noise_sigma),
            rng,
        )?;
        let decoder = DenseNet::init(
            DenseNetSpec::mlp(d, &dec_hidden, input_width, Activation::Identity).with_noise(config.noise_sigma),
            rng,
        )?;
        let classifier = DenseNet::init(
            DenseNetSpec::mlp(d, &config.classifier_hidden, num_classes, Activation::Identity),
            rng,
        )?;
        Ok(VaeModel { encoder, decoder, classifier, latent_dim: d })
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_width()
    }

    /// Posterior mean and log-variance (noise-free).
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut out = self.encoder.eval(x)?;
        let logvar = out.split_off(self.latent_dim);
        Ok((out, logvar))
    }

    /// Bernoulli means per pixel.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decoder.eval(z)?.into_iter().map(sigmoid).collect())
    }

    pub fn classifier_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.classifier.eval(z)
    }

    /// Class probabilities of the classifier head.
    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.classifier_logits(z)?).into_iter().map(f64::exp).collect())
    }

    fn check_batch(&self, batch: &[&[f64]], labels: &[usize]) -> Result<()> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::input("batch must be non-empty with one label per instance"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::input(format!("label {l} out of range")));
        }
        for x in batch {
            if x.len() != self.input_width() {
                return Err(Error::input("instance width does not match the model"));
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::input("pixel values must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Terms for one instance; accumulates `scale`-weighted gradients when asked.
    fn instance(
        &self,
        x: &[f64],
        label: usize,
        config: &TrainConfig,
        seed: u64,
        grads: Option<(&mut VaeGrads, f64)>,
    ) -> (f64, f64, f64) {
        let d = self.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = self.encoder.forward(x, Mode::Train(&mut rng)).expect("checked width");
        let (mu, logvar) = enc.output().split_at(d);
        let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let std: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = (0..d).map(|j| mu[j] + std[j] * eps[j]).collect();

        let dec = self.decoder.forward(&z, Mode::Train(&mut rng)).expect("latent width");
        let p = x.len() as f64;
        let recon = dec.output().iter().zip(x).map(|(l, xv)| bce_with_logit(*l, *xv)).sum::<f64>() / p;
        let kld = 0.5 * (0..d).map(|j| logvar[j].exp() + mu[j] * mu[j] - 1.0 - logvar[j]).sum::<f64>();
        let clf = self.classifier.forward(&z, Mode::Train(&mut rng)).expect("latent width");
        let log_probs = log_softmax(clf.output());
        let ce = -log_probs[label];

        if let Some((g, scale)) = grads {
            let w0 = config.beta0 * scale;
            let dec_grad: Vec<f64> = dec.output().iter().zip(x).map(|(l, xv)| w0 * (sigmoid(*l) - xv) / p).collect();
            let mut dz = self.decoder.backward_into(&dec, &dec_grad, &mut g.decoder);
            let w2 = config.beta2 * scale;
            let clf_grad: Vec<f64> = log_probs
                .iter()
                .enumerate()
                .map(|(k, lp)| w2 * (lp.exp() - if k == label { 1.0 } else { 0.0 }))
                .collect();
            let dz_clf = self.classifier.backward_into(&clf, &clf_grad, &mut g.classifier);
            dz.iter_mut().zip(&dz_clf).for_each(|(a, b)| *a += b);
            let w1 = config.beta1 * scale;
            let mut enc_grad = vec![0.0; 2 * d];
            for j in 0..d {
                enc_grad[j] = dz[j] + w1 * mu[j];
                enc_grad[d + j] = dz[j] * eps[j] * 0.5 * std[j] + w1 * 0.5 * (logvar[j].exp() - 1.0);
            }
            self.encoder.backward_into(&enc, &enc_grad, &mut g.encoder);
        }
        (recon, kld, ce)
    }

    /// Loss and gradients for a batch given one noise seed per instance.
    pub fn loss_and_grad_seeded(
        &self,
        batch: &[&[f64]],
        labels: &[usize],
        config: &TrainConfig,
        seeds: &[u64],
    ) -> Result<(LossBreakdown, VaeGrads)> {
        self.check_batch(batch, labels)?;
        let b = batch.len();
        let scale = 1.0 / b as f64;
        let chunks = par::chunk_ranges(b, GRAD_CHUNK);
        let parts = par::map_slice(config.execution, &chunks, |range| {
            let mut g = VaeGrads::zeros(self);
            let mut terms = Vec::with_capacity(range.len());
            for i in range.clone() {
                terms.push(self.instance(batch[i], labels[i], config, seeds[i], Some((&mut g, scale))));
            }
            (terms, g)
        });
        let mut grads = VaeGrads::zeros(self);
        let (mut recon, mut kld, mut clf) = (0.0, 0.0, 0.0);
        for (terms, g) in &parts {
            grads.add_assign(g);
            for (r, k, c) in terms {
                recon += r;
                kld += k;
                clf += c;
            }
        }
        Ok((self.breakdown(recon * scale, kld * scale, clf * scale, config), grads))
    }

    fn breakdown(&self, recon: f64, kld: f64, clf: f64, config: &TrainConfig) -> LossBreakdown {
        LossBreakdown { total: config.beta0 * recon + config.beta1 * kld + config.beta2 * clf, recon, kld, clf }
    }

    /// Loss and gradients; noise seeds are drawn from `rng`.
    pub fn loss_and_grad(
        &self,
        batch: &[&[f64]],
        labels: &[usize],
        config: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossBreakdown, VaeGrads)> {
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
        self.loss_and_grad_seeded(batch, labels, config, &seeds)
    }

    /// Loss value only.
    pub fn loss(&self, batch: &[&[f64]], labels: &[usize], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        self.check_batch(batch, labels)?;
        let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
        let terms = par::map_range(config.execution, batch.len(), |i| self.instance(batch[i], labels[i], config, seeds[i], None));
        let n = batch.len() as f64;
        let (r, k, c) = terms.iter().fold((0.0, 0.0, 0.0), |a, t| (a.0 + t.0, a.1 + t.1, a.2 + t.2));
        Ok(self.breakdown(r / n, k / n, c / n, config))
    }

    /// Latent rows for the selected instances: the posterior mean followed by
    /// `samples_per_instance − 1` reparameterised draws.
    pub fn export_latents(
        &self,
        dataset: &LabeledDataset,
        indices: &[usize],
        samples_per_instance: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<LatentTable> {
        if samples_per_instance == 0 {
            return Err(Error::input("samples_per_instance must be at least 1"));
        }
        let per = par::map_slice(exec, indices, |&i| -> Result<Vec<Vec<f64>>> {
            let (mu, logvar) = self.encode(&dataset.instances[i])?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut rows = vec![mu.clone()];
            for _ in 1..samples_per_instance {
                rows.push(
                    mu.iter()
                        .zip(&logvar)
                        .map(|(m, lv)| m + (0.5 * lv).exp() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect(),
                );
            }
            Ok(rows)
        });
        let mut table = LatentTable {
            rows: Vec::with_capacity(indices.len() * samples_per_instance),
            labels: Vec::new(),
            group_ids: Vec::new(),
            column_ids: (0..self.latent_dim).collect(),
            num_classes: self.num_classes(),
        };
        for (&i, rows) in indices.iter().zip(per) {
            for row in rows? {
                table.rows.push(row);
                table.labels.push(dataset.labels[i]);
                table.group_ids.push(dataset.group_ids[i]);
            }
        }
        Ok(table)
    }
}

/// Persisted model: the three networks plus the information needed to
/// rebuild and audit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub latent_dim: usize,
    /// (height, width)
    pub input_shape: (usize, usize),
    pub num_classes: usize,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub model: VaeModel,
}

impl ModelFile {
    pub fn new(model: VaeModel, input_shape: (usize, usize), config: &TrainConfig) -> Self {
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            latent_dim: model.latent_dim,
            input_shape,
            num_classes: model.num_classes(),
            train_config: config.clone(),
            seed: config.seed,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.version != MODEL_FORMAT_VERSION {
            return Err(Error::Version { found: f.version, expected: MODEL_FORMAT_VERSION });
        }
        let m = &f.model;
        // re-validate network shapes
        for net in [&m.encoder, &m.decoder, &m.classifier] {
            DenseNet::from_params(net.spec.clone(), net.params.clone())?;
        }
        if m.encoder.output_width() != 2 * m.latent_dim
            || m.classifier.input_width() != m.latent_dim
            || m.decoder.output_width() != m.encoder.input_width()
        {
            return Err(Error::input("model networks have inconsistent widths"));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests;
