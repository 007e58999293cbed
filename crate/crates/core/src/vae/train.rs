use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kld_diagonal_gaussian, TrainConfig, VaeModel};
use crate::circuit::argmax;
use crate::data::LabeledDataset;
use crate::neural::AdamState;
use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_recon: f64,
    pub train_kld: f64,
    pub train_clf: f64,
    /// Validation metrics on posterior means with noise-free passes.
    pub val_mae: f64,
    pub val_mse: f64,
    pub val_kld: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Validation statistics of a model on the given instances:
/// (MAE, MSE, mean KLD, classifier accuracy).
pub(crate) fn evaluate(model: &VaeModel, dataset: &LabeledDataset, indices: &[usize], config: &TrainConfig) -> Result<(f64, f64, f64, f64)> {
    if indices.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
    }
    let rows = par::map_slice(config.execution, indices, |&i| -> Result<(f64, f64, f64, bool)> {
        let x = &dataset.instances[i];
        let (mu, logvar) = model.encode(x)?;
        let recon = model.decode(&mu)?;
        let p = x.len() as f64;
        let mae = recon.iter().zip(x).map(|(a, b)| (a - b).abs()).sum::<f64>() / p;
        let mse = recon.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p;
        let kld = kld_diagonal_gaussian(&mu, &logvar)?;
        let pred = argmax(&model.classifier_logits(&mu)?);
        Ok((mae, mse, kld, pred == dataset.labels[i]))
    });
    let n = indices.len() as f64;
    let mut acc = (0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let (a, b, c, ok) = r?;
        acc.0 += a;
        acc.1 += b;
        acc.2 += c;
        acc.3 += if ok { 1.0 } else { 0.0 };
    }
    Ok((acc.0 / n, acc.1 / n, acc.2 / n, acc.3 / n))
}

/// Trains a fresh model on `train_idx` with Adam over shuffled mini-batches,
/// recording validation metrics on `val_idx` after every epoch.
pub fn train(
    dataset: &LabeledDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
) -> Result<(VaeModel, TrainHistory)> {
    config.check()?;
    dataset.check()?;
    if train_idx.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let num_classes = dataset.num_classes();
    if config.beta2 > 0.0 {
        let mut seen = vec![false; num_classes];
        train_idx.iter().for_each(|&i| seen[dataset.labels[i]] = true);
        if seen.iter().filter(|s| **s).count() < 2 {
            return Err(Error::input("classification training needs at least two classes"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VaeModel::new(dataset.input_width(), num_classes.max(2), config, &mut rng)?;
    let mut adam_enc = AdamState::new(&model.encoder.params, config.learning_rate);
    let mut adam_dec = AdamState::new(&model.decoder.params, config.learning_rate);
    let mut adam_clf = AdamState::new(&model.classifier.params, config.learning_rate);

    let mut history = TrainHistory::default();
    let mut order = train_idx.to_vec();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| dataset.instances[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len()).map(|_| rng.random()).collect();
            let (loss, grads) = model.loss_and_grad_seeded(&batch, &labels, config, &seeds)?;
            if !loss.total.is_finite() {
                return Err(Error::Training { epoch, message: "loss is not finite".into() });
            }
            let wrap = |e: Error| Error::Training { epoch, message: e.to_string() };
            adam_enc.step(&mut model.encoder.params, &grads.encoder, "encoder").map_err(wrap)?;
            adam_dec.step(&mut model.decoder.params, &grads.decoder, "decoder").map_err(wrap)?;
            adam_clf.step(&mut model.classifier.params, &grads.classifier, "classifier").map_err(wrap)?;
            sums[0] += loss.total;
            sums[1] += loss.recon;
            sums[2] += loss.kld;
            sums[3] += loss.clf;
            batches += 1.0;
        }
        let (val_mae, val_mse, val_kld, val_accuracy) = evaluate(&model, dataset, val_idx, config)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sums[0] / batches,
            train_recon: sums[1] / batches,
            train_kld: sums[2] / batches,
            train_clf: sums[3] / batches,
            val_mae,
            val_mse,
            val_kld,
            val_accuracy,
        });
    }
    Ok((model, history))
}
