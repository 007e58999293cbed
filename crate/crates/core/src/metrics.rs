//! Counterfactual and classifier evaluation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::circuit::argmax;
use crate::counterfactual::{BackendKind, CfResult};
use crate::{Error, Result};

/// Diagonal jitter added to fitted covariances for the standard distance.
pub const COVARIANCE_JITTER: f64 = 1e-6;

/// Flip rate: share of positions where the two predictions differ.
pub fn validity(original: &[usize], counterfactual: &[usize]) -> Result<f64> {
    if original.is_empty() || original.len() != counterfactual.len() {
        return Err(Error::Metric("validity needs two equal-length, non-empty prediction lists".into()));
    }
    let flips = original.iter().zip(counterfactual).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / original.len() as f64)
}

pub fn proximity_l2(x: &[f64], x_cf: &[f64]) -> Result<f64> {
    if x.len() != x_cf.len() {
        return Err(Error::input(format!("shape mismatch: {} vs {} values", x.len(), x_cf.len())));
    }
    Ok(x.iter().zip(x_cf).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrechetMode {
    /// `‖μ₁−μ₂‖² + Tr[Σ₁+Σ₂] − 2·Tr[Σ₁Σ₂]` without a matrix square root;
    /// not a distance and may be negative.
    PaperLiteral,
    /// `‖μ₁−μ₂‖² + Tr[Σ₁+Σ₂ − 2(Σ₁Σ₂)^½]`
    #[default]
    Standard,
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(Error::Metric(format!("need at least 2 samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::Metric("samples must share a non-zero dimension".into()));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("samples must be finite".into()));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits from moments.
pub fn frechet_from_moments(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
    mode: FrechetMode,
) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Metric("moment dimensions differ".into()));
    }
    let mean_term = (mu1 - mu2).norm_squared();
    match mode {
        FrechetMode::PaperLiteral => Ok(mean_term + s1.trace() + s2.trace() - 2.0 * (s1 * s2).trace()),
        FrechetMode::Standard => {
            // Tr (Σ₁Σ₂)^½ = Tr (Σ₁^½ Σ₂ Σ₁^½)^½, the inner matrix being symmetric PSD
            let r1 = sym_sqrt(s1);
            let inner = &r1 * s2 * &r1;
            let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
            let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
            Ok((mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
        }
    }
}

pub fn frechet(embed_org: &[Vec<f64>], embed_cf: &[Vec<f64>], mode: FrechetMode) -> Result<f64> {
    let (mu1, mut s1) = fit_gaussian(embed_org)?;
    let (mu2, mut s2) = fit_gaussian(embed_cf)?;
    if mu1.len() != mu2.len() {
        return Err(Error::Metric("embedding dimensions differ".into()));
    }
    if mode == FrechetMode::Standard {
        for i in 0..s1.nrows() {
            s1[(i, i)] += COVARIANCE_JITTER;
            s2[(i, i)] += COVARIANCE_JITTER;
        }
    }
    frechet_from_moments(&mu1, &s1, &mu2, &s2, mode)
}

/// Area under the ROC curve from the Mann–Whitney rank statistic, with
/// average ranks for ties. `labels` are 0/1.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("scores and labels must be equal-length and non-empty".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::Metric(format!("AUC needs binary labels, found {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC is undefined for a single-class label set".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l == 1).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStats {
    pub accuracy: f64,
    /// mean Shannon entropy in nats
    pub entropy: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Binary classification statistics; class 1 is the positive class.
pub fn classifier_stats(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<ClassifierStats> {
    if posteriors.is_empty() || posteriors.len() != labels.len() {
        return Err(Error::Metric("posteriors and labels must be equal-length and non-empty".into()));
    }
    for p in posteriors {
        let total: f64 = p.iter().sum();
        if p.len() != 2 || (total - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Metric("posterior rows must be binary distributions".into()));
        }
    }
    let n = labels.len() as f64;
    let preds: Vec<usize> = posteriors.iter().map(|p| argmax(p)).collect();
    let correct = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    let entropy = posteriors
        .iter()
        .map(|p| -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n;
    let scores: Vec<f64> = posteriors.iter().map(|p| p[1]).collect();
    let tp = preds.iter().zip(labels).filter(|(p, l)| **p == 1 && **l == 1).count() as f64;
    let predicted_pos = preds.iter().filter(|p| **p == 1).count() as f64;
    let actual_pos = labels.iter().filter(|l| **l == 1).count() as f64;
    Ok(ClassifierStats {
        accuracy: correct as f64 / n,
        entropy,
        auc: auc(&scores, labels)?,
        precision: if predicted_pos > 0.0 { tp / predicted_pos } else { 0.0 },
        recall: if actual_pos > 0.0 { tp / actual_pos } else { 0.0 },
    })
}

/// Grid point identifying one row of the counterfactual table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigKey {
    pub beta1: f64,
    pub classifier: BackendKind,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub key: ConfigKey,
    pub instances: usize,
    pub validity_latent: f64,
    pub validity_pipeline: f64,
    pub mean_l2: f64,
    pub frechet_paper: f64,
    pub frechet_standard: f64,
    /// over replicates that reached the target
    pub mean_switch_epoch: Option<f64>,
    /// mean ‖z_cf − z‖ over all replicates
    pub mean_displacement: f64,
    /// mean |log p(z_cf) − log p(z)| when the backend has a density
    pub mean_likelihood_gap: Option<f64>,
    pub classifier_stats: Option<ClassifierStats>,
}

impl MetricsReport {
    /// Aggregates persisted results of one grid point.
    pub fn from_results(key: ConfigKey, results: &[CfResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Metric("no counterfactual results to aggregate".into()));
        }
        let records = results.iter().flat_map(|r| &r.replicates);
        // f(x) is the backend prediction at the encoder mean of x; the latent
        // variant pools the replicates of every instance
        let (orig, cf): (Vec<usize>, Vec<usize>) = results
            .iter()
            .flat_map(|r| r.replicates.iter().map(|rec| (r.pipeline_prediction_origin, rec.prediction_cf)))
            .unzip();
        let validity_latent = validity(&orig, &cf)?;
        let (porig, pcf): (Vec<usize>, Vec<usize>) =
            results.iter().map(|r| (r.pipeline_prediction_origin, r.pipeline_prediction_cf)).unzip();
        let validity_pipeline = validity(&porig, &pcf)?;
        let mean_l2 = results.iter().map(|r| r.proximity_l2).sum::<f64>() / results.len() as f64;

        let eo: Vec<Vec<f64>> = results.iter().map(|r| r.embedding_origin.clone()).collect();
        let ec: Vec<Vec<f64>> = results.iter().map(|r| r.embedding_cf.clone()).collect();
        let (frechet_paper, frechet_standard) = if results.len() >= 2 {
            (frechet(&eo, &ec, FrechetMode::PaperLiteral)?, frechet(&eo, &ec, FrechetMode::Standard)?)
        } else {
            (f64::NAN, f64::NAN)
        };

        let switches: Vec<f64> = records.clone().filter_map(|r| r.switch_epoch).map(|s| s as f64).collect();
        let mean_switch_epoch = (!switches.is_empty()).then(|| switches.iter().sum::<f64>() / switches.len() as f64);
        let count = orig.len() as f64;
        let mean_displacement = records.clone().map(|r| r.displacement()).sum::<f64>() / count;
        let gaps: Option<Vec<f64>> = records
            .map(|r| Some((r.log_density_cf? - r.log_density_origin?).abs()))
            .collect();
        let mean_likelihood_gap = gaps.map(|g| g.iter().sum::<f64>() / count);
        Ok(MetricsReport {
            key,
            instances: results.len(),
            validity_latent,
            validity_pipeline,
            mean_l2,
            frechet_paper,
            frechet_standard,
            mean_switch_epoch,
            mean_displacement,
            mean_likelihood_gap,
            classifier_stats: None,
        })
    }
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "beta1",
    "classifier",
    "beta",
    "gamma",
    "validity_latent",
    "validity_pipeline",
    "l2",
    "frechet_standard",
    "frechet_paper",
    "switch_epoch",
];

/// Sorts by β1 descending, then classifier, β and γ ascending.
pub fn sort_reports(reports: &mut [MetricsReport]) {
    reports.sort_by(|a, b| {
        b.key
            .beta1
            .total_cmp(&a.key.beta1)
            .then(a.key.classifier.cmp(&b.key.classifier))
            .then(a.key.beta.total_cmp(&b.key.beta))
            .then(a.key.gamma.total_cmp(&b.key.gamma))
    });
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.6e}")
    }
}

fn row(r: &MetricsReport) -> [String; 10] {
    [
        fmt6(r.key.beta1),
        r.key.classifier.name().to_string(),
        fmt6(r.key.beta),
        fmt6(r.key.gamma),
        fmt6(r.validity_latent),
        fmt6(r.validity_pipeline),
        fmt6(r.mean_l2),
        fmt6(r.frechet_standard),
        fmt6(r.frechet_paper),
        r.mean_switch_epoch.map(fmt6).unwrap_or_default(),
    ]
}

/// CSV table with [`REPORT_COLUMNS`], rows sorted by [`sort_reports`].
pub fn report_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    if reports.is_empty() {
        return Err(Error::Report("no metrics reports".into()));
    }
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for r in &sorted {
        w.write_record(row(r))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Space-aligned text version of [`report_csv`].
pub fn report_text(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Report("no metrics reports".into()));
    }
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let short = |v: f64| if v.is_nan() { "NaN".to_string() } else { format!("{v:.4}") };
    let mut rows: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for r in &sorted {
        rows.push(vec![
            format!("{}", r.key.beta1),
            r.key.classifier.name().to_string(),
            format!("{}", r.key.beta),
            format!("{}", r.key.gamma),
            short(r.validity_latent),
            short(r.validity_pipeline),
            short(r.mean_l2),
            short(r.frechet_standard),
            short(r.frechet_paper),
            r.mean_switch_epoch.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
        ]);
    }
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    Ok(out)
}
