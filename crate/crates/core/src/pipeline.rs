//! End-to-end experiment: data generation, VAE training, latent export,
//! structure learning, classifier evaluation, counterfactual generation and
//! reporting, driven by one configuration file.
//!
//! Every stage reads only artifacts written by earlier stages and records the
//! hash of the configuration sections it depends on in `manifest.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::Circuit;
use crate::counterfactual::{generate, BackendKind, CfConfig, CfResult};
use crate::data::{gen_ellipse_images, kfold, split, write_pgm, EllipseParams, GrayImage, LabeledDataset, Split, SplitSpec};
use crate::metrics::{classifier_stats, report_csv, report_text, ClassifierStats, ConfigKey, MetricsReport};
use crate::par::{self, Execution};
use crate::structlearn::{learn_spn, LatentTable, LearnConfig};
use crate::vae::{train, ModelFile, TrainConfig};
use crate::{Error, Result};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_ENV: &str = "SPNCF_OUTPUT_DIR";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetConfig {
    Ellipses(EllipseParams),
    /// A dataset previously written by `gen-data` or [`LabeledDataset::save`].
    Directory { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Ellipses(EllipseParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub group_aware: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        SplitConfig { train: s.train, val: s.val, test: s.test, group_aware: s.group_aware }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpnSection {
    #[serde(flatten)]
    pub learn: LearnConfig,
    /// Latent rows exported per training instance (posterior mean first).
    pub samples_per_instance: usize,
}

impl Default for SpnSection {
    fn default() -> Self {
        SpnSection { learn: LearnConfig::default(), samples_per_instance: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfSection {
    pub backends: Vec<BackendKind>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub replicates: usize,
    pub step_size: f64,
    pub max_steps: usize,
    pub max_grad_norm: Option<f64>,
    pub early_stop: bool,
    pub trace_stride: usize,
    /// Cap on the number of test instances explained per grid point.
    pub max_instances: Option<usize>,
    /// Instances per grid point rendered by `diffmap`.
    pub diffmap_instances: usize,
}

impl Default for CfSection {
    fn default() -> Self {
        let c = CfConfig::default();
        CfSection {
            backends: vec![BackendKind::Spn, BackendKind::Mlp],
            betas: vec![0.0, 1.0],
            gammas: vec![0.0, 1.0],
            replicates: c.replicates,
            step_size: c.step_size,
            max_steps: c.max_steps,
            max_grad_norm: c.max_grad_norm,
            early_stop: c.early_stop,
            trace_stride: 10,
            max_instances: Some(100),
            diffmap_instances: 4,
        }
    }
}

impl CfSection {
    /// Grid points in report order; the MLP backend only takes γ = 0.
    pub fn grid(&self) -> Vec<(BackendKind, f64, f64)> {
        let mut out = Vec::new();
        let mut backends = self.backends.clone();
        backends.sort();
        backends.dedup();
        for b in backends {
            for &beta in &self.betas {
                for &gamma in &self.gammas {
                    if b == BackendKind::Mlp && gamma != 0.0 {
                        continue;
                    }
                    out.push((b, beta, gamma));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// encoder posterior mean
    #[default]
    EncoderMean,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// 1 for a single split, k > 1 for group-aware k-fold runs.
    pub folds: usize,
    /// One VAE per value; empty means `[vae.beta1]`.
    pub beta1_values: Vec<f64>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub vae: TrainConfig,
    pub spn: SpnSection,
    pub cf: CfSection,
    pub metrics: MetricsSection,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            folds: 1,
            beta1_values: vec![0.1, 0.01, 0.001],
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            vae: TrainConfig {
                latent_dim: 4,
                hidden: vec![64],
                classifier_hidden: vec![16],
                epochs: 20,
                ..TrainConfig::default()
            },
            spn: SpnSection::default(),
            cf: CfSection::default(),
            metrics: MetricsSection::default(),
            execution: Execution::default(),
        }
    }
}

/// Overlays `user` on `base` table by table.  A dataset table naming a
/// different generator replaces the default one wholesale.
fn merge(base: &mut serde_json::Value, user: serde_json::Value) {
    use serde_json::Value;
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let switches_generator = |old: &Value| old.get("generator").is_some() && v.get("generator") != old.get("generator");
                match b.get_mut(&k) {
                    Some(old) if !switches_generator(old) => merge(old, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

/// Derived seeds, one per consumer.
mod seeds {
    pub const DATA: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const VAE: u64 = 2;
    pub const EXPORT: u64 = 3;
    pub const SPN: u64 = 4;
    pub const CF: u64 = 5;
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.  Keys the
    /// file leaves out keep their [`ExperimentConfig::default`] values, also
    /// inside partially specified sections.
    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_value(serde_json::from_str(&text)?)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(toml::from_str(text)?)
    }

    fn from_value(user: serde_json::Value) -> Result<Self> {
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = serde_json::from_value(merged)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Replaces the output directory with `$SPNCF_OUTPUT_DIR` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn check(&self) -> Result<()> {
        self.vae.check()?;
        self.spn.learn.check()?;
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if self.spn.samples_per_instance == 0 {
            return Err(Error::Config("spn.samples_per_instance must be at least 1".into()));
        }
        if self.beta1_grid().iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("beta1 values must be finite and non-negative".into()));
        }
        let mut b = self.beta1_grid();
        b.sort_by(f64::total_cmp);
        if b.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("beta1 values must be distinct".into()));
        }
        for (backend, beta, gamma) in self.cf.grid() {
            self.cf_config(backend, beta, gamma, 1, 0).check()?;
        }
        Ok(())
    }

    pub fn beta1_grid(&self) -> Vec<f64> {
        if self.beta1_values.is_empty() {
            vec![self.vae.beta1]
        } else {
            self.beta1_values.clone()
        }
    }

    fn derived_seed(&self, which: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(which)
    }

    pub fn train_config(&self, beta1: f64) -> TrainConfig {
        TrainConfig { beta1, seed: self.derived_seed(seeds::VAE), execution: self.execution, ..self.vae.clone() }
    }

    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig { seed: self.derived_seed(seeds::SPN), execution: self.execution, ..self.spn.learn.clone() }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
            seed: self.derived_seed(seeds::SPLIT),
            group_aware: self.split.group_aware,
        }
    }

    /// Configuration for one instance at one grid point.  The seed depends
    /// only on the instance so grid points are paired.
    pub fn cf_config(&self, backend: BackendKind, beta: f64, gamma: f64, target_class: usize, instance: usize) -> CfConfig {
        CfConfig {
            target_class,
            beta,
            gamma,
            replicates: self.cf.replicates,
            step_size: self.cf.step_size,
            max_steps: self.cf.max_steps,
            backend,
            seed: self.derived_seed(seeds::CF) ^ (instance as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
            max_grad_norm: self.cf.max_grad_norm,
            early_stop: self.cf.early_stop,
            trace_stride: self.cf.trace_stride,
            execution: self.execution,
        }
    }

    /// SHA-256 over the canonical JSON of the configuration, ignoring the
    /// output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hash_json(&c)
    }

    fn section_hash(&self, stage: Stage) -> Result<String> {
        let mut v = serde_json::Map::new();
        let mut put = |k: &str, val: serde_json::Value| {
            v.insert(k.to_string(), val);
        };
        put("seed", serde_json::to_value(self.seed)?);
        put("folds", serde_json::to_value(self.folds)?);
        put("dataset", serde_json::to_value(&self.dataset)?);
        put("split", serde_json::to_value(&self.split)?);
        if stage.depth() >= Stage::TrainVae.depth() {
            put("vae", serde_json::to_value(&self.vae)?);
            put("beta1_values", serde_json::to_value(self.beta1_grid())?);
        }
        if stage.depth() >= Stage::ExportLatents.depth() {
            put("spn", serde_json::to_value(&self.spn)?);
        }
        if stage.depth() >= Stage::GenCf.depth() {
            put("cf", serde_json::to_value(&self.cf)?);
        }
        if stage.depth() >= Stage::EvalCf.depth() {
            put("metrics", serde_json::to_value(&self.metrics)?);
        }
        hash_json(&v)
    }
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    TrainVae,
    ExportLatents,
    LearnSpn,
    EvalClf,
    GenCf,
    EvalCf,
    Diffmap,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainVae,
        Stage::ExportLatents,
        Stage::LearnSpn,
        Stage::EvalClf,
        Stage::GenCf,
        Stage::EvalCf,
        Stage::Diffmap,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainVae => "train-vae",
            Stage::ExportLatents => "export-latents",
            Stage::LearnSpn => "learn-spn",
            Stage::EvalClf => "eval-clf",
            Stage::GenCf => "gen-cf",
            Stage::EvalCf => "eval-cf",
            Stage::Diffmap => "diffmap",
            Stage::Report => "report",
        }
    }

    fn depth(self) -> usize {
        self as usize
    }

    /// Stages whose artifacts this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::TrainVae => &[Stage::GenData],
            Stage::ExportLatents => &[Stage::GenData, Stage::TrainVae],
            Stage::LearnSpn => &[Stage::ExportLatents],
            Stage::EvalClf => &[Stage::GenData, Stage::TrainVae, Stage::LearnSpn],
            Stage::GenCf => &[Stage::GenData, Stage::TrainVae, Stage::LearnSpn],
            Stage::EvalCf => &[Stage::GenCf],
            Stage::Diffmap => &[Stage::GenData, Stage::GenCf],
            Stage::Report => &[Stage::EvalCf],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub section_hash: String,
    pub outputs: Vec<String>,
}

/// Reproduction record of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let p = Manifest::path(root);
        if !p.exists() {
            return Ok(None);
        }
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
        if m.version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Version { found: m.version, expected: MANIFEST_FORMAT_VERSION });
        }
        Ok(Some(m))
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Directory name of one grid point, e.g. `spn_beta0_gamma1`.
pub fn grid_key(backend: BackendKind, beta: f64, gamma: f64) -> String {
    format!("{}_beta{}_gamma{}", backend.name().to_lowercase(), fmt_value(beta), fmt_value(gamma))
}

/// File locations of one run (one fold).
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub run: PathBuf,
}

impl Layout {
    pub fn new(config: &ExperimentConfig, fold: Option<usize>) -> Self {
        let root = config.output_dir.clone();
        let run = match fold {
            Some(k) => root.join(format!("fold_{k}")),
            None => root.clone(),
        };
        Layout { root, run }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn split(&self) -> PathBuf {
        self.run.join("split.json")
    }
    pub fn beta1_dir(&self, beta1: f64) -> PathBuf {
        self.run.join(format!("beta1_{}", fmt_value(beta1)))
    }
    pub fn model(&self, beta1: f64) -> PathBuf {
        self.beta1_dir(beta1).join("model.json")
    }
    pub fn history(&self, beta1: f64) -> PathBuf {
        self.beta1_dir(beta1).join("history.csv")
    }
    pub fn latents(&self, beta1: f64) -> PathBuf {
        self.beta1_dir(beta1).join("latents.csv")
    }
    pub fn circuit(&self, beta1: f64) -> PathBuf {
        self.beta1_dir(beta1).join("circuit.json")
    }
    pub fn classifier(&self, beta1: f64) -> PathBuf {
        self.beta1_dir(beta1).join("classifier.json")
    }
    pub fn cf_dir(&self, beta1: f64, key: &str) -> PathBuf {
        self.beta1_dir(beta1).join("cf").join(key)
    }
    pub fn metrics(&self, beta1: f64, key: &str) -> PathBuf {
        self.beta1_dir(beta1).join("metrics").join(format!("{key}.json"))
    }
    pub fn diffmap_dir(&self, beta1: f64, key: &str) -> PathBuf {
        self.beta1_dir(beta1).join("diffmap").join(key)
    }
    pub fn report_csv(&self) -> PathBuf {
        self.run.join("report.csv")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.run.join("report.txt")
    }
    pub fn classifier_csv(&self) -> PathBuf {
        self.run.join("classifier.csv")
    }
}

fn rel(layout: &Layout, p: &Path) -> String {
    p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Runs the stages of one run directory and keeps its manifest.
pub struct Pipeline<'a> {
    pub config: &'a ExperimentConfig,
    pub layout: Layout,
    fold: Option<usize>,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a ExperimentConfig, fold: Option<usize>) -> Self {
        Pipeline { config, layout: Layout::new(config, fold), fold }
    }

    /// Runs `stage`, wrapping failures with the stage name.
    pub fn run(&self, stage: Stage) -> Result<()> {
        self.run_inner(stage).map_err(|e| e.in_stage(stage.name()))
    }

    fn run_inner(&self, stage: Stage) -> Result<()> {
        self.config.check()?;
        self.check_upstream(stage)?;
        let outputs = match stage {
            Stage::GenData => self.gen_data()?,
            Stage::TrainVae => self.train_vae()?,
            Stage::ExportLatents => self.export_latents()?,
            Stage::LearnSpn => self.learn_spn()?,
            Stage::EvalClf => self.eval_clf()?,
            Stage::GenCf => self.gen_cf()?,
            Stage::EvalCf => self.eval_cf()?,
            Stage::Diffmap => self.diffmap()?,
            Stage::Report => self.report()?,
        };
        self.record(stage, outputs)
    }

    fn manifest_dir(&self) -> &Path {
        &self.layout.run
    }

    fn check_upstream(&self, stage: Stage) -> Result<()> {
        let Some(m) = Manifest::load(self.manifest_dir())? else {
            return Ok(());
        };
        for up in stage.upstream() {
            if let Some(rec) = m.stages.get(up.name()) {
                if rec.section_hash != self.config.section_hash(*up)? {
                    return Err(Error::Config(format!(
                        "artifacts of `{}` were produced with a different configuration; rerun it first",
                        up.name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn record(&self, stage: Stage, outputs: Vec<PathBuf>) -> Result<()> {
        let mut m = Manifest::load(self.manifest_dir())?.unwrap_or(Manifest {
            version: MANIFEST_FORMAT_VERSION,
            seed: self.config.seed,
            config_hash: String::new(),
            config: self.config.clone(),
            stages: BTreeMap::new(),
        });
        m.seed = self.config.seed;
        m.config_hash = self.config.hash()?;
        m.config = self.config.clone();
        m.config.output_dir = PathBuf::new();
        let mut outputs: Vec<String> = outputs.iter().map(|p| rel(&self.layout, p)).collect();
        outputs.sort();
        m.stages.insert(stage.name().to_string(), StageRecord { section_hash: self.config.section_hash(stage)?, outputs });
        write_atomic(&Manifest::path(self.manifest_dir()), serde_json::to_string_pretty(&m)?.as_bytes())
    }

    pub fn dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::load(&self.layout.data_dir())
    }

    pub fn split(&self) -> Result<Split> {
        let p = self.layout.split();
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    pub fn model(&self, beta1: f64) -> Result<ModelFile> {
        ModelFile::load(&self.layout.model(beta1))
    }

    pub fn circuit(&self, beta1: f64) -> Result<Circuit> {
        Circuit::load(&self.layout.circuit(beta1))
    }

    fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let dir = self.layout.data_dir();
        let ds = match &self.config.dataset {
            DatasetConfig::Ellipses(p) => {
                let ds = gen_ellipse_images(p, self.config.derived_seed(seeds::DATA))?;
                // the dataset is shared by all folds
                if self.fold.is_none_or(|f| f == 0) {
                    ds.save(&dir)?;
                }
                ds
            }
            DatasetConfig::Directory { path } => {
                let ds = LabeledDataset::load(path)?;
                if self.fold.is_none_or(|f| f == 0) {
                    ds.save(&dir)?;
                }
                ds
            }
        };
        let s = match self.fold {
            None => split(&ds.group_ids, &self.config.split_spec())?,
            Some(k) => {
                let spec = self.config.split_spec();
                let val_share = spec.val / (spec.train + spec.val);
                kfold(&ds.group_ids, self.config.folds, val_share, spec.seed)?.swap_remove(k)
            }
        };
        write_atomic(&self.layout.split(), serde_json::to_string(&s)?.as_bytes())?;
        Ok(vec![dir.join("dataset.json"), self.layout.split()])
    }

    fn train_vae(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let s = self.split()?;
        let mut out = Vec::new();
        for beta1 in self.config.beta1_grid() {
            let cfg = self.config.train_config(beta1);
            let (model, history) = train(&ds, &s.train, &s.val, &cfg)?;
            ModelFile::new(model, ds.shape, &cfg).save(&self.layout.model(beta1))?;
            write_atomic(&self.layout.history(beta1), &history.to_csv()?)?;
            out.push(self.layout.model(beta1));
            out.push(self.layout.history(beta1));
        }
        Ok(out)
    }

    fn export_latents(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let s = self.split()?;
        let mut out = Vec::new();
        for beta1 in self.config.beta1_grid() {
            let m = self.model(beta1)?;
            let table = m.model.export_latents(
                &ds,
                &s.train,
                self.config.spn.samples_per_instance,
                self.config.derived_seed(seeds::EXPORT),
                self.config.execution,
            )?;
            table.write_csv(&self.layout.latents(beta1))?;
            out.push(self.layout.latents(beta1));
        }
        Ok(out)
    }

    fn learn_spn(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for beta1 in self.config.beta1_grid() {
            let p = self.layout.latents(beta1);
            if !p.exists() {
                return Err(Error::MissingArtifact(p));
            }
            let table = LatentTable::read_csv(&p)?;
            let circuit = learn_spn(&table, &self.config.learn_config())?;
            circuit.save(&self.layout.circuit(beta1))?;
            out.push(self.layout.circuit(beta1));
        }
        Ok(out)
    }

    /// Classifier statistics of both backends on the test-split encodings.
    pub fn classifier_stats(&self, beta1: f64) -> Result<BTreeMap<String, ClassifierStats>> {
        let ds = self.dataset()?;
        let s = self.split()?;
        let m = self.model(beta1)?;
        let c = self.circuit(beta1)?;
        let table = m.model.export_latents(&ds, &s.test, 1, 0, self.config.execution)?;
        let spn: Vec<Vec<f64>> = c
            .class_posterior_batch(self.config.execution, &table.rows)?
            .into_iter()
            .map(|p| p.probabilities)
            .collect();
        let mlp: Vec<Vec<f64>> = table.rows.iter().map(|z| m.model.classify(z)).collect::<Result<_>>()?;
        let mut out = BTreeMap::new();
        out.insert(BackendKind::Spn.name().to_string(), classifier_stats(&spn, &table.labels)?);
        out.insert(BackendKind::Mlp.name().to_string(), classifier_stats(&mlp, &table.labels)?);
        Ok(out)
    }

    fn eval_clf(&self) -> Result<Vec<PathBuf>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["beta1", "classifier", "accuracy", "entropy", "auc", "precision", "recall"])?;
        let mut out = Vec::new();
        let mut grid = self.config.beta1_grid();
        grid.sort_by(|a, b| b.total_cmp(a));
        for beta1 in grid {
            let stats = self.classifier_stats(beta1)?;
            write_atomic(&self.layout.classifier(beta1), serde_json::to_string_pretty(&stats)?.as_bytes())?;
            out.push(self.layout.classifier(beta1));
            for (name, s) in &stats {
                w.write_record([
                    fmt_value(beta1),
                    name.clone(),
                    format!("{:.6e}", s.accuracy),
                    format!("{:.6e}", s.entropy),
                    format!("{:.6e}", s.auc),
                    format!("{:.6e}", s.precision),
                    format!("{:.6e}", s.recall),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&self.layout.classifier_csv(), &bytes)?;
        out.push(self.layout.classifier_csv());
        Ok(out)
    }

    /// Test instances explained at every grid point.
    pub fn cf_instances(&self, s: &Split) -> Vec<usize> {
        let n = self.config.cf.max_instances.unwrap_or(usize::MAX).min(s.test.len());
        s.test[..n].to_vec()
    }

    fn gen_cf(&self) -> Result<Vec<PathBuf>> {
        let grid = self.config.cf.grid();
        if grid.is_empty() {
            return Err(Error::Config("the counterfactual grid is empty".into()));
        }
        let ds = self.dataset()?;
        let s = self.split()?;
        let instances = self.cf_instances(&s);
        let k = ds.num_classes().max(2);
        let mut out = Vec::new();
        for beta1 in self.config.beta1_grid() {
            let m = self.model(beta1)?;
            let circuit = if grid.iter().any(|g| g.0 == BackendKind::Spn) { Some(self.circuit(beta1)?) } else { None };
            for &(backend, beta, gamma) in &grid {
                let key = grid_key(backend, beta, gamma);
                let dir = self.layout.cf_dir(beta1, &key);
                let written = par::map_slice(self.config.execution, &instances, |&i| -> Result<PathBuf> {
                    let cfg = self.config.cf_config(backend, beta, gamma, (ds.labels[i] + 1) % k, i);
                    let mut r = generate(&ds.instances[i], ds.shape, &m.model, &cfg, circuit.as_ref())?;
                    r.instance = Some(i);
                    r.label = Some(ds.labels[i]);
                    let p = dir.join(format!("{i:05}.json"));
                    r.save(&p)?;
                    Ok(p)
                });
                for p in written {
                    out.push(p?);
                }
            }
        }
        Ok(out)
    }

    /// Persisted results of one grid point, ordered by instance.
    pub fn cf_results(&self, beta1: f64, backend: BackendKind, beta: f64, gamma: f64) -> Result<Vec<CfResult>> {
        let dir = self.layout.cf_dir(beta1, &grid_key(backend, beta, gamma));
        if !dir.exists() {
            return Err(Error::MissingArtifact(dir));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        files.iter().map(|p| CfResult::load(p)).collect()
    }

    fn eval_cf(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for beta1 in self.config.beta1_grid() {
            for (backend, beta, gamma) in self.config.cf.grid() {
                let results = self.cf_results(beta1, backend, beta, gamma)?;
                let key = ConfigKey { beta1, classifier: backend, beta, gamma };
                let report = MetricsReport::from_results(key, &results)?;
                let p = self.layout.metrics(beta1, &grid_key(backend, beta, gamma));
                write_atomic(&p, serde_json::to_string_pretty(&report)?.as_bytes())?;
                out.push(p);
            }
        }
        out.extend(self.report()?);
        Ok(out)
    }

    fn diffmap(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let mut out = Vec::new();
        for beta1 in self.config.beta1_grid() {
            for (backend, beta, gamma) in self.config.cf.grid() {
                let key = grid_key(backend, beta, gamma);
                let results = self.cf_results(beta1, backend, beta, gamma)?;
                let dir = self.layout.diffmap_dir(beta1, &key);
                let mut localization = Vec::new();
                for (n, r) in results.iter().enumerate() {
                    let i = r.instance.unwrap_or(n);
                    if let Some(region) = ds.metadata.regions.get(i) {
                        let (inside, outside) = r.difference.mass_inside_outside(|row, col| region.region_bbox.contains(row, col));
                        localization.push(LocalizationRecord { instance: i, switched: r.any_switched(), inside, outside });
                    }
                    if n >= self.config.cf.diffmap_instances {
                        continue;
                    }
                    let (h, w) = r.shape;
                    let img = |px: &[f64]| GrayImage { width: w, height: h, pixels: px.to_vec() };
                    let stem = dir.join(format!("{i:05}"));
                    let paths = [
                        stem.with_extension("x_tilde.pgm"),
                        stem.with_extension("x_cf.pgm"),
                        stem.with_extension("diff.png"),
                    ];
                    write_pgm(&paths[0], &img(&r.x_tilde))?;
                    write_pgm(&paths[1], &img(&r.x_cf))?;
                    r.difference.save_png(&paths[2])?;
                    out.extend(paths);
                }
                let summary = LocalizationSummary::new(localization);
                let p = dir.join("localization.json");
                write_atomic(&p, serde_json::to_string_pretty(&summary)?.as_bytes())?;
                out.push(p);
            }
        }
        Ok(out)
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let (csv, text) = emit_report(&self.layout.run)?;
        write_atomic(&self.layout.report_csv(), &csv)?;
        write_atomic(&self.layout.report_txt(), text.as_bytes())?;
        Ok(vec![self.layout.report_csv(), self.layout.report_txt()])
    }
}

/// Mean absolute difference-map value inside and outside the ground-truth
/// region of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub instance: usize,
    pub switched: bool,
    pub inside: f64,
    pub outside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    /// share of switched counterfactuals with more mass inside than outside
    pub localized_fraction: Option<f64>,
    pub records: Vec<LocalizationRecord>,
}

impl LocalizationSummary {
    pub fn new(records: Vec<LocalizationRecord>) -> Self {
        let switched: Vec<&LocalizationRecord> = records.iter().filter(|r| r.switched).collect();
        let localized_fraction = (!switched.is_empty())
            .then(|| switched.iter().filter(|r| r.inside > r.outside).count() as f64 / switched.len() as f64);
        LocalizationSummary { localized_fraction, records }
    }
}

/// Collects every `beta1_*/metrics/*.json` below `dir` into the CSV and
/// aligned-text tables.
pub fn emit_report(dir: &Path) -> Result<(Vec<u8>, String)> {
    let mut reports = Vec::new();
    if dir.exists() {
        let mut beta_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("beta1_")))
            .collect();
        beta_dirs.sort();
        for b in beta_dirs {
            let mdir = b.join("metrics");
            if !mdir.exists() {
                continue;
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&mdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            files.sort();
            for f in files {
                reports.push(serde_json::from_str::<MetricsReport>(&std::fs::read_to_string(f)?)?);
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Report(format!("no metrics reports under {}", dir.display())));
    }
    Ok((report_csv(&reports)?, report_text(&reports)?))
}

/// Runs the given stages for every fold (or the single split).
pub fn run_stages(config: &ExperimentConfig, stages: &[Stage]) -> Result<()> {
    let folds: Vec<Option<usize>> = if config.folds > 1 { (0..config.folds).map(Some).collect() } else { vec![None] };
    for fold in folds {
        let p = Pipeline::new(config, fold);
        for &s in stages {
            p.run(s)?;
        }
    }
    Ok(())
}

/// Runs every stage in order.
pub fn run_all(config: &ExperimentConfig) -> Result<()> {
    run_stages(config, &Stage::ALL)
}
