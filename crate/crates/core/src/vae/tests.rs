use super::*;
use crate::data::{gen_ellipse_images, split, EllipseParams, SplitSpec};
use crate::neural::rng_from_seed;
use approx::assert_abs_diff_eq;

fn small_config() -> TrainConfig {
    TrainConfig { latent_dim: 3, hidden: vec![12], classifier_hidden: vec![6], epochs: 0, batch_size: 8, ..Default::default() }
}

fn small_model(input: usize, config: &TrainConfig) -> VaeModel {
    VaeModel::new(input, 2, config, &mut rng_from_seed(4)).unwrap()
}

#[test]
fn kld_closed_form() {
    assert_eq!(kld_diagonal_gaussian(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    assert_abs_diff_eq!(kld_diagonal_gaussian(&[1.0], &[0.0]).unwrap(), 0.5, epsilon = 1e-15);
    assert!(kld_diagonal_gaussian(&[f64::NAN], &[0.0]).is_err());
    assert!(kld_diagonal_gaussian(&[0.0], &[]).is_err());
}

#[test]
fn kld_matches_monte_carlo() {
    let mu = [0.7, -0.4];
    let logvar = [-0.5, 0.3];
    let closed = kld_diagonal_gaussian(&mu, &logvar).unwrap();
    // KL(q‖p) = E_q[log q(z) − log p(z)]
    let mut rng = rng_from_seed(12);
    let n = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut term = 0.0;
        for j in 0..2 {
            let sd = (0.5 * logvar[j]).exp();
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu[j] + sd * e;
            term += -0.5 * e * e - sd.ln() + 0.5 * z * z;
        }
        sum += term;
        sum_sq += term * term;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - closed).abs() < 3.0 * se, "mc {mean} ± {se} vs closed {closed}");
}

#[test]
fn isolated_classification_term() {
    let mut config = small_config();
    config.beta0 = 0.0;
    config.beta1 = 0.0;
    config.beta2 = 2.0;
    let mut model = small_model(4, &config);
    // force near-certain logits for class 1
    let last = model.classifier.params.layers.last_mut().unwrap();
    last.weights.iter_mut().for_each(|w| *w = 0.0);
    last.bias = vec![-30.0, 30.0];
    let x = [0.1, 0.2, 0.3, 0.4];
    let loss = model.loss(&[&x], &[1], &config, &mut rng_from_seed(1)).unwrap();
    assert!(loss.total < 1e-20 && loss.total >= 0.0);
    assert_eq!(loss.total, 2.0 * loss.clf);
}

#[test]
fn uninformative_decoder_costs_ln2_per_pixel() {
    let mut config = small_config();
    config.beta2 = 0.0;
    let mut model = small_model(4, &config);
    let last = model.decoder.params.layers.last_mut().unwrap();
    last.weights.iter_mut().for_each(|w| *w = 0.0);
    last.bias.iter_mut().for_each(|b| *b = 0.0);
    let x = [0.0, 1.0, 1.0, 0.0];
    let loss = model.loss(&[&x], &[0], &config, &mut rng_from_seed(1)).unwrap();
    assert_abs_diff_eq!(loss.recon, std::f64::consts::LN_2, epsilon = 1e-15);
}

#[test]
fn pixels_outside_unit_interval_are_rejected() {
    let config = small_config();
    let model = small_model(2, &config);
    assert!(matches!(model.loss(&[&[0.5, 1.5]], &[0], &config, &mut rng_from_seed(0)), Err(Error::Input(_))));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut config = small_config();
    config.beta1 = 0.3;
    config.beta2 = 0.7;
    let model = small_model(5, &config);
    let xs = [[0.1, 0.9, 0.4, 0.0, 1.0], [0.6, 0.2, 0.8, 0.5, 0.3], [0.0, 0.3, 1.0, 0.7, 0.9]];
    let batch: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let labels = [0, 1, 1];
    let seeds = [11, 22, 33];
    let (_, grads) = model.loss_and_grad_seeded(&batch, &labels, &config, &seeds).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for net in 0..3 {
        let n_params = match net {
            0 => model.encoder.params.len(),
            1 => model.decoder.params.len(),
            _ => model.classifier.params.len(),
        };
        for k in 0..n_params {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let p = match net {
                    0 => &mut m.encoder.params,
                    1 => &mut m.decoder.params,
                    _ => &mut m.classifier.params,
                };
                p.set(k, p.get(k) + delta);
                m.loss_and_grad_seeded(&batch, &labels, &config, &seeds).unwrap().0.total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = match net {
                0 => grads.encoder.get(k),
                1 => grads.decoder.get(k),
                _ => grads.classifier.get(k),
            };
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked > 100);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn reparameterised_samples_have_posterior_moments() {
    // export_latents draws z = μ + exp(½·logvar)·ε; check mean and variance
    let config = TrainConfig { noise_sigma: 0.0, ..small_config() };
    let model = small_model(4, &config);
    let ds = LabeledDataset {
        instances: vec![vec![0.2, 0.4, 0.6, 0.8]],
        shape: (2, 2),
        labels: vec![0],
        group_ids: vec![0],
        metadata: crate::data::DatasetMetadata { generator: "manual".into(), parameters: serde_json::Value::Null, seed: 0, regions: vec![] },
    };
    let n = 10_000;
    let t = model.export_latents(&ds, &[0], n + 1, 5, Execution::Parallel).unwrap();
    let (mu, logvar) = model.encode(&ds.instances[0]).unwrap();
    assert_eq!(t.rows[0], mu);
    for j in 0..3 {
        let draws: Vec<f64> = t.rows[1..].iter().map(|r| r[j]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = (0.5 * logvar[j]).exp();
        assert!((mean - mu[j]).abs() < 4.0 * sd / (n as f64).sqrt(), "mean {mean} vs {}", mu[j]);
        // sd of the sample variance ≈ σ²·sqrt(2/(n−1))
        let tol = 4.0 * sd * sd * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - sd * sd).abs() < tol, "var {var} vs {}", sd * sd);
    }
}

#[test]
fn export_counts_rows() {
    let ds = gen_ellipse_images(&EllipseParams { n: 10, side: 16, class_radii: vec![(3.0, 3.0), (5.0, 5.0)], jitter: 1.0, ..Default::default() }, 0).unwrap();
    let config = small_config();
    let model = small_model(256, &config);
    let idx: Vec<usize> = (0..10).collect();
    let t = model.export_latents(&ds, &idx, 5, 0, Execution::Sequential).unwrap();
    assert_eq!(t.len(), 50);
    assert_eq!(t.labels[5..10], [ds.labels[1]; 5]);
    let t1 = model.export_latents(&ds, &idx, 1, 0, Execution::Parallel).unwrap();
    for (i, row) in t1.rows.iter().enumerate() {
        assert_eq!(row, &model.encode(&ds.instances[i]).unwrap().0);
    }
    assert_eq!(t, model.export_latents(&ds, &idx, 5, 0, Execution::Parallel).unwrap());
}

#[test]
fn zero_epochs_returns_initial_model() {
    let ds = gen_ellipse_images(&EllipseParams { n: 12, side: 16, class_radii: vec![(3.0, 3.0), (5.0, 5.0)], jitter: 1.0, ..Default::default() }, 0).unwrap();
    let config = small_config();
    let (model, history) = train(&ds, &[0, 1, 2, 3], &[4, 5], &config).unwrap();
    assert!(history.epochs.is_empty());
    let again = train(&ds, &[0, 1, 2, 3], &[4, 5], &config).unwrap().0;
    assert_eq!(model, again);
}

fn separable_images(n: usize) -> LabeledDataset {
    gen_ellipse_images(
        &EllipseParams { n, side: 16, class_radii: vec![(3.0, 3.0), (6.0, 6.0)], jitter: 1.0, noise_sigma: 0.05, ..Default::default() },
        3,
    )
    .unwrap()
}

#[test]
fn training_reduces_loss_and_separates_classes() {
    let ds = separable_images(240);
    let s = split(&ds.group_ids, &SplitSpec { train: 0.7, val: 0.15, test: 0.15, seed: 1, group_aware: true }).unwrap();
    let config = TrainConfig {
        latent_dim: 4,
        hidden: vec![32],
        classifier_hidden: vec![8],
        epochs: 25,
        batch_size: 20,
        learning_rate: 0.003,
        seed: 9,
        ..Default::default()
    };
    let (model, history) = train(&ds, &s.train, &s.val, &config).unwrap();
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut first: Vec<f64> = history.epochs[..10].iter().map(|e| e.train_loss).collect();
    let mut last: Vec<f64> = history.epochs[15..].iter().map(|e| e.train_loss).collect();
    assert!(median(&mut last) < median(&mut first));
    assert!(history.last().unwrap().val_accuracy >= 0.95, "{:?}", history.last());

    // exported means reproduce the classifier accuracy
    let t = model.export_latents(&ds, &s.val, 1, 0, Execution::Parallel).unwrap();
    let acc = t
        .rows
        .iter()
        .zip(&t.labels)
        .filter(|(z, &l)| crate::circuit::argmax(&model.classifier_logits(z).unwrap()) == l)
        .count() as f64
        / t.len() as f64;
    assert!((acc - history.last().unwrap().val_accuracy).abs() <= 0.01);

    let (again, h2) = train(&ds, &s.train, &s.val, &config).unwrap();
    assert_eq!(again, model);
    assert_eq!(h2, history);
}

#[test]
fn model_file_round_trip() {
    let config = small_config();
    let model = small_model(4, &config);
    let file = ModelFile::new(model, (2, 2), &config);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    file.save(&path).unwrap();
    let back = ModelFile::load(&path).unwrap();
    assert_eq!(back, file);
    let x = [0.3, 0.1, 0.9, 0.5];
    assert_eq!(back.model.encode(&x).unwrap(), file.model.encode(&x).unwrap());
}
