//! Acceptance suite.  Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero when any fails.

mod support;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use spncf::circuit::{Check, Evidence, GradTarget, NodeId, SpnGraph};
use spncf::counterfactual::{generate, BackendKind};
use spncf::data::gen_latent_mixture;
use spncf::metrics::{auc, frechet, proximity_l2, validity, ConfigKey, FrechetMode, MetricsReport};
use spncf::pipeline::{grid_key, run_all, run_stages, ExperimentConfig, Layout, LocalizationSummary, Pipeline, Stage};
use spncf::structlearn::{learn_spn, LearnConfig};
use spncf::vae::EpochRecord;
use support::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn circuit_correctness() -> Outcome {
    let start = Instant::now();
    let (mut worst_mass, mut worst_marg, mut worst_post, mut worst_grad) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let d = 1 + (seed % 4) as usize;
        let c = random_circuit(seed, d);
        worst_mass = worst_mass.max((quadrature_mass(&c) - 1.0).abs());
        let mut r = rng(seed + 1000);
        for _ in 0..5 {
            let z: Vec<f64> = (0..d).map(|_| r.random_range(-2.5..2.5)).collect();
            for v in 0..d {
                let exact = c.log_density(&Evidence::full(&z).with(v, None)).map_err(|e| e.to_string())?;
                worst_marg = worst_marg.max((exact - quadrature_marginal(&c, &z, v)).abs());
            }
            let p = c.class_posterior(&z).map_err(|e| e.to_string())?;
            worst_post = worst_post.max((p.probabilities.iter().sum::<f64>() - 1.0).abs());
            worst_grad = worst_grad.max(gradient_error(&c, &z, GradTarget::LogMarginal));
            for k in 0..c.num_classes() {
                worst_grad = worst_grad.max(gradient_error(&c, &z, GradTarget::LogPosterior(k)));
            }
        }
        let all = c.log_density(&Evidence::marginalized(d)).map_err(|e| e.to_string())?;
        worst_marg = worst_marg.max(all.abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "100 circuits: mass err {worst_mass:.2e}, marginal err {worst_marg:.2e}, posterior err {worst_post:.2e}, grad rel err {worst_grad:.2e}, {secs:.1}s"
    );
    ensure(worst_mass <= 1e-3 && worst_marg <= 1e-3 && worst_post <= 1e-12 && worst_grad < 1e-4 && secs < 60.0, &detail)?;
    Ok(detail)
}

fn structural_validation() -> Outcome {
    type Mutation = fn(&mut SpnGraph, &mut rand_chacha::ChaCha8Rng) -> NodeId;
    let cases: [(Check, Mutation); 4] = [
        (Check::Complete, break_completeness),
        (Check::Decomposable, break_decomposability),
        (Check::Acyclic, break_acyclicity),
        (Check::WeightsNormalized, break_normalization),
    ];
    let mut parts = Vec::new();
    for (check, mutate) in cases {
        let mut caught = 0;
        for seed in 0..50u64 {
            let mut g = random_circuit(seed, 2 + (seed % 3) as usize).graph();
            let node = mutate(&mut g, &mut rng(seed));
            let report = g.validate().map_err(|e| e.to_string())?;
            if !report.passed(check) && report.offending(check).contains(&node) {
                caught += 1;
            }
        }
        parts.push(format!("{check:?} {caught}/50"));
        ensure(caught == 50, parts.join(", "))?;
    }
    Ok(parts.join(", "))
}

fn learnspn_sanity() -> Outcome {
    let d = 4;
    let means = vec![vec![-2.0; d], vec![2.0; d]];
    let cov0: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.6 }).collect()).collect();
    let cov1: Vec<Vec<f64>> =
        (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else if i / 2 == j / 2 { 0.7 } else { 0.0 }).collect()).collect();
    let covs = vec![cov0, cov1];
    let train = gen_latent_mixture(2000, &means, &covs, 1).map_err(|e| e.to_string())?;
    let test = gen_latent_mixture(1000, &means, &covs, 2).map_err(|e| e.to_string())?;
    let c = learn_spn(&train, &LearnConfig::default()).map_err(|e| e.to_string())?;

    // factorized baseline: one Gaussian per column, maximum likelihood
    let n = train.rows.len() as f64;
    let mut baseline = 0.0;
    let moments: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let m = train.rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = train.rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            (m, v)
        })
        .collect();
    for r in &test.rows {
        for (j, (m, v)) in moments.iter().enumerate() {
            baseline += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (r[j] - m).powi(2) / (2.0 * v);
        }
    }
    baseline /= test.rows.len() as f64;
    let mut ll = 0.0;
    let mut correct = 0;
    for (r, &l) in test.rows.iter().zip(&test.labels) {
        ll += c.log_marginal(r).map_err(|e| e.to_string())?;
        correct += usize::from(c.predict(r).map_err(|e| e.to_string())? == l);
    }
    ll /= test.rows.len() as f64;
    let acc = correct as f64 / test.rows.len() as f64;
    let detail = format!("held-out ll {ll:.4} vs factorized {baseline:.4}, accuracy {acc:.4}, {} nodes", c.nodes().len());
    ensure(ll >= baseline && acc >= 0.95, &detail)?;
    Ok(detail)
}

fn final_epoch(path: &Path) -> Result<EpochRecord, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let rows: Vec<EpochRecord> = reader.deserialize().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    rows.last().cloned().ok_or_else(|| format!("{} is empty", path.display()))
}

fn vae_tradeoff(main: &Fixture, scratch: &Path) -> Outcome {
    let mut secs = main.train_secs;
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let layout = if seed == main.config.seed {
            Layout::new(&main.config, None)
        } else {
            let mut cfg = main.config.clone();
            cfg.seed = seed;
            cfg.output_dir = scratch.join(format!("seed{seed}"));
            run_stages(&cfg, &[Stage::GenData]).map_err(|e| e.to_string())?;
            let start = Instant::now();
            run_stages(&cfg, &[Stage::TrainVae]).map_err(|e| e.to_string())?;
            secs += start.elapsed().as_secs_f64();
            Layout::new(&cfg, None)
        };
        let mut finals = Vec::new();
        for b in [0.1, 0.01, 0.001] {
            finals.push(final_epoch(&layout.history(b))?);
        }
        let kld_up = finals.windows(2).all(|w| w[1].val_kld > w[0].val_kld);
        let mae_down = finals.windows(2).all(|w| w[1].val_mae < w[0].val_mae);
        ok &= kld_up && mae_down;
        let fmt = |f: &dyn Fn(&EpochRecord) -> f64| finals.iter().map(|r| format!("{:.4}", f(r))).collect::<Vec<_>>().join("/");
        parts.push(format!("seed {seed}: KLD {} MAE {}", fmt(&|r| r.val_kld), fmt(&|r| r.val_mae)));
    }
    let detail = format!("{} (training {secs:.0}s)", parts.join("; "));
    ensure(ok, &detail)?;
    Ok(detail)
}

fn load_report(layout: &Layout, beta1: f64, backend: BackendKind, beta: f64, gamma: f64) -> Result<MetricsReport, String> {
    let p = layout.metrics(beta1, &grid_key(backend, beta, gamma));
    let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn validity_trend(main: &Fixture) -> Outcome {
    let layout = Layout::new(&main.config, None);
    let mut parts = Vec::new();
    let mut ok = true;
    for (beta, gamma) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let r = load_report(&layout, 0.1, BackendKind::Spn, beta, gamma)?;
        ok &= r.instances >= 100 && r.validity_latent >= 0.95;
        parts.push(format!("b{beta}g{gamma} {:.3}", r.validity_latent));
    }
    let mut spn = Vec::new();
    let mut mlp = Vec::new();
    for beta in [0.0, 1.0] {
        spn.push(load_report(&layout, 0.001, BackendKind::Spn, beta, 0.0)?.validity_latent);
        mlp.push(load_report(&layout, 0.001, BackendKind::Mlp, beta, 0.0)?.validity_latent);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ok &= mean(&spn) > mean(&mlp);
    let detail = format!(
        "beta1=0.1 SPN {}; beta1=0.001 SPN {:.3} vs MLP {:.3} (mean over beta in {{0,1}}, gamma=0)",
        parts.join(" "),
        mean(&spn),
        mean(&mlp)
    );
    ensure(ok, &detail)?;
    Ok(detail)
}

fn regularizer_effects(main: &Fixture) -> Outcome {
    let p = Pipeline::new(&main.config, None);
    let ds = p.dataset().map_err(|e| e.to_string())?;
    let split = p.split().map_err(|e| e.to_string())?;
    let model = p.model(0.1).map_err(|e| e.to_string())?;
    let circuit = p.circuit(0.1).map_err(|e| e.to_string())?;
    let instances = p.cf_instances(&split);
    ensure(instances.len() >= 100, format!("only {} instances", instances.len()))?;
    let k = ds.num_classes();
    let report = |beta: f64, gamma: f64| -> Result<MetricsReport, String> {
        let mut results = Vec::new();
        for &i in &instances {
            let cfg = main.config.cf_config(BackendKind::Spn, beta, gamma, (ds.labels[i] + 1) % k, i);
            let mut r = generate(&ds.instances[i], ds.shape, &model.model, &cfg, Some(&circuit)).map_err(|e| e.to_string())?;
            r.instance = Some(i);
            results.push(r);
        }
        MetricsReport::from_results(ConfigKey { beta1: 0.1, classifier: BackendKind::Spn, beta, gamma }, &results)
            .map_err(|e| e.to_string())
    };
    let disp: Vec<f64> = [0.0, 1.0, 1000.0]
        .iter()
        .map(|&b| report(b, 0.0).map(|r| r.mean_displacement))
        .collect::<Result<_, _>>()?;
    let mut ok = disp.windows(2).all(|w| w[1] <= w[0]);
    let mut gaps = Vec::new();
    for beta in [0.0, 1.0] {
        let g0 = report(beta, 0.0)?.mean_likelihood_gap.ok_or("missing density gap")?;
        let g1 = report(beta, 1.0)?.mean_likelihood_gap.ok_or("missing density gap")?;
        ok &= g1 <= g0;
        gaps.push(format!("beta {beta}: {g1:.3} (gamma 1) vs {g0:.3} (gamma 0)"));
    }
    let detail = format!(
        "{} instances; displacement {:.3}/{:.3}/{:.3} for beta 0/1/1000; density gap {}",
        instances.len(),
        disp[0],
        disp[1],
        disp[2],
        gaps.join(", ")
    );
    ensure(ok, &detail)?;
    Ok(detail)
}

fn metric_oracles() -> Outcome {
    let a: Vec<Vec<f64>> = [-1.0, 0.0, 1.0, 2.5].iter().map(|v| vec![*v]).collect();
    let shifted: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 1.0]).collect();
    let same = frechet(&a, &a, FrechetMode::Standard).map_err(|e| e.to_string())?;
    let shift = frechet(&a, &shifted, FrechetMode::Standard).map_err(|e| e.to_string())?;
    let multi: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 / 10.0]).collect();
    let same_multi = frechet(&multi, &multi, FrechetMode::Standard).map_err(|e| e.to_string())?;
    // variance 4 on both sides: 0 + 4 + 4 - 2·(4·4) = -24
    let scalar: Vec<Vec<f64>> = [0.0, 2.0, 4.0].iter().map(|v| vec![*v]).collect();
    let literal = frechet(&scalar, &scalar, FrechetMode::PaperLiteral).map_err(|e| e.to_string())?;

    let mut r = rng(7);
    let scores: Vec<f64> = (0..10).map(|_| f64::from(r.random_range(0..4u8)) / 4.0).collect();
    let mut labels: Vec<usize> = (0..10).map(|_| r.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..10 {
        for j in 0..10 {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    let auc_err = (auc(&scores, &labels).map_err(|e| e.to_string())? - wins / pairs).abs();

    let orig: Vec<usize> = (0..50).map(|_| r.random_range(0..3)).collect();
    let cf: Vec<usize> = (0..50).map(|_| r.random_range(0..3)).collect();
    let naive_validity = orig.iter().zip(&cf).filter(|(a, b)| a != b).count() as f64 / 50.0;
    let x: Vec<f64> = (0..30).map(|_| r.random()).collect();
    let y: Vec<f64> = (0..30).map(|_| r.random()).collect();
    let mut sq = 0.0;
    for i in 0..30 {
        sq += (x[i] - y[i]) * (x[i] - y[i]);
    }
    let exact_validity = validity(&orig, &cf).map_err(|e| e.to_string())? == naive_validity;
    let exact_l2 = proximity_l2(&x, &y).map_err(|e| e.to_string())? == sq.sqrt();

    let detail = format!(
        "standard same {same:.1e} / {same_multi:.1e}, unit shift {shift:.9}, literal {literal}, AUC err {auc_err:.1e}, validity exact {exact_validity}, L2 exact {exact_l2}"
    );
    ensure(
        same.abs() <= 1e-6
            && same_multi.abs() <= 1e-6
            && (shift - 1.0).abs() <= 1e-6
            && literal == -24.0
            && auc_err <= 1e-12
            && exact_validity
            && exact_l2,
        &detail,
    )?;
    Ok(detail)
}

fn localization(main: &Fixture) -> Outcome {
    let root = &main.config.output_dir;
    let mut switched = 0;
    let mut localized = 0;
    for b in std::fs::read_dir(root).map_err(|e| e.to_string())? {
        let dir = b.map_err(|e| e.to_string())?.path().join("diffmap");
        if !dir.is_dir() {
            continue;
        }
        for g in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let p = g.map_err(|e| e.to_string())?.path().join("localization.json");
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            let s: LocalizationSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            for r in s.records.iter().filter(|r| r.switched) {
                switched += 1;
                localized += usize::from(r.inside > r.outside);
            }
        }
    }
    let frac = localized as f64 / switched.max(1) as f64;
    let detail = format!("{localized}/{switched} successful counterfactuals localized ({frac:.3})");
    ensure(switched > 0 && frac >= 0.8, &detail)?;
    Ok(detail)
}

fn reproducibility(main: &Fixture, scratch: &Path) -> Outcome {
    let mut again = main.config.clone();
    again.output_dir = scratch.join("again");
    run_all(&again).map_err(|e| e.to_string())?;
    let a = Layout::new(&main.config, None);
    let b = Layout::new(&again, None);
    let mut files: Vec<(PathBuf, PathBuf)> = vec![(a.report_csv(), b.report_csv()), (a.classifier_csv(), b.classifier_csv())];
    for beta1 in main.config.beta1_grid() {
        files.push((a.model(beta1), b.model(beta1)));
        files.push((a.circuit(beta1), b.circuit(beta1)));
    }
    for (x, y) in &files {
        let bx = std::fs::read(x).map_err(|e| format!("{}: {e}", x.display()))?;
        let by = std::fs::read(y).map_err(|e| format!("{}: {e}", y.display()))?;
        ensure(bx == by, format!("{} differs between runs", x.display()))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

struct Fixture {
    config: ExperimentConfig,
    train_secs: f64,
}

fn main_run(scratch: &Path) -> Result<Fixture, String> {
    let config = ExperimentConfig { output_dir: scratch.join("main"), ..ExperimentConfig::default() };
    let mut train_secs = 0.0;
    for stage in Stage::ALL {
        let start = Instant::now();
        run_stages(&config, &[stage]).map_err(|e| e.to_string())?;
        if stage == Stage::TrainVae {
            train_secs = start.elapsed().as_secs_f64();
        }
    }
    Ok(Fixture { config, train_secs })
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("criterion {id} ({name}): PASS [{secs:.1}s] {d}");
            true
        }
        Err(d) => {
            println!("criterion {id} ({name}): FAIL [{secs:.1}s] {d}");
            false
        }
    }
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut ok = true;
    ok &= run(1, "circuit correctness", circuit_correctness);
    ok &= run(2, "structural validation", structural_validation);
    ok &= run(3, "LearnSPN sanity", learnspn_sanity);

    let fixture = main_run(scratch.path());
    let with = |f: &dyn Fn(&Fixture) -> Outcome| -> Outcome {
        match &fixture {
            Ok(fx) => f(fx),
            Err(e) => Err(format!("pipeline run failed: {e}")),
        }
    };
    ok &= run(4, "VAE trade-off trend", || with(&|fx| vae_tradeoff(fx, scratch.path())));
    ok &= run(5, "counterfactual validity trend", || with(&validity_trend));
    ok &= run(6, "regularizer effects", || with(&regularizer_effects));
    ok &= run(7, "metric oracles", metric_oracles);
    ok &= run(8, "localization", || with(&localization));
    ok &= run(9, "reproducibility", || with(&|fx| reproducibility(fx, scratch.path())));
    println!("acceptance: {}", if ok { "all criteria passed" } else { "FAILED" });
    if !ok {
        std::process::exit(1);
    }
}
