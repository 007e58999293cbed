//! Synthetic datasets, grayscale image I/O and group-aware splits.

mod pgm;
mod split;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::structlearn::LatentTable;
use crate::{Error, Result};

pub use pgm::{decode_pgm, encode_pgm, quantize, read_pgm, write_pgm, GrayImage};
pub use split::{kfold, split, Split, SplitSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Half-open pixel box `[row0, row1) × [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// Ground truth for one ellipse image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseRegion {
    /// Centre in pixel coordinates (row, column).
    pub center: (f64, f64),
    /// Semi-axes (vertical, horizontal) of the drawn ellipse.
    pub radii: (f64, f64),
    /// Bounding box of the drawn ellipse.
    pub bbox: BoundingBox,
    /// Bounding box of the union of every class ellipse at this centre, i.e.
    /// the only area where a class change alters the image.
    pub region_bbox: BoundingBox,
}

fn inside(center: (f64, f64), radii: (f64, f64), row: usize, col: usize) -> bool {
    let dy = (row as f64 + 0.5 - center.0) / radii.0;
    let dx = (col as f64 + 0.5 - center.1) / radii.1;
    dy * dy + dx * dx <= 1.0
}

fn ellipse_bbox(center: (f64, f64), radii: (f64, f64), side: usize) -> BoundingBox {
    let mut b = BoundingBox { row0: side, col0: side, row1: 0, col1: 0 };
    for r in 0..side {
        for c in 0..side {
            if inside(center, radii, r, c) {
                b.row0 = b.row0.min(r);
                b.col0 = b.col0.min(c);
                b.row1 = b.row1.max(r + 1);
                b.col1 = b.col1.max(c + 1);
            }
        }
    }
    b
}

impl EllipseRegion {
    pub fn mask(&self, side: usize) -> Vec<bool> {
        (0..side * side).map(|i| inside(self.center, self.radii, i / side, i % side)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub generator: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    /// Per-instance ground truth; empty for generators without one.
    pub regions: Vec<EllipseRegion>,
}

/// Flat grayscale instances with labels and group identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub instances: Vec<Vec<f64>>,
    /// (height, width)
    pub shape: (usize, usize),
    pub labels: Vec<usize>,
    pub group_ids: Vec<u64>,
    pub metadata: DatasetMetadata,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.instances.len();
        if self.labels.len() != n || self.group_ids.len() != n {
            return Err(Error::input("dataset columns have inconsistent lengths"));
        }
        if !self.metadata.regions.is_empty() && self.metadata.regions.len() != n {
            return Err(Error::input("dataset regions do not match the instance count"));
        }
        let w = self.input_width();
        for (i, x) in self.instances.iter().enumerate() {
            if x.len() != w {
                return Err(Error::input(format!("instance {i} has {} values, expected {w}", x.len())));
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::input(format!("instance {i} has values outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn image(&self, i: usize) -> GrayImage {
        GrayImage { width: self.shape.1, height: self.shape.0, pixels: self.instances[i].clone() }
    }

    /// Writes `images/NNNNN.pgm` plus `dataset.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check()?;
        let mut entries = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let file = format!("images/{i:05}.pgm");
            write_pgm(&dir.join(&file), &self.image(i))?;
            let region = self.metadata.regions.get(i);
            entries.push(ManifestEntry {
                index: i,
                file,
                label: self.labels[i],
                group_id: self.group_ids[i],
                center: region.map(|r| r.center),
                radii: region.map(|r| r.radii),
                bbox: region.map(|r| r.bbox),
                region_bbox: region.map(|r| r.region_bbox),
            });
        }
        let manifest = DatasetManifest {
            version: DATASET_FORMAT_VERSION,
            generator: self.metadata.generator.clone(),
            parameters: self.metadata.parameters.clone(),
            seed: self.metadata.seed,
            height: self.shape.0,
            width: self.shape.1,
            instances: entries,
        };
        crate::pipeline::write_atomic(&dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if m.version != DATASET_FORMAT_VERSION {
            return Err(Error::Version { found: m.version, expected: DATASET_FORMAT_VERSION });
        }
        let mut ds = LabeledDataset {
            instances: Vec::with_capacity(m.instances.len()),
            shape: (m.height, m.width),
            labels: Vec::new(),
            group_ids: Vec::new(),
            metadata: DatasetMetadata { generator: m.generator, parameters: m.parameters, seed: m.seed, regions: vec![] },
        };
        for e in m.instances {
            let img = read_pgm(&dir.join(&e.file))?;
            if (img.height, img.width) != ds.shape {
                return Err(Error::input(format!("{} has the wrong size", e.file)));
            }
            ds.instances.push(img.pixels);
            ds.labels.push(e.label);
            ds.group_ids.push(e.group_id);
            if let (Some(center), Some(radii), Some(bbox), Some(region_bbox)) = (e.center, e.radii, e.bbox, e.region_bbox) {
                ds.metadata.regions.push(EllipseRegion { center, radii, bbox, region_bbox });
            }
        }
        ds.check()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    generator: String,
    parameters: serde_json::Value,
    seed: u64,
    height: usize,
    width: usize,
    instances: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    file: String,
    label: usize,
    group_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    center: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radii: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<BoundingBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    region_bbox: Option<BoundingBox>,
}

/// Labelled Gaussian mixture: row `i` belongs to class `i mod K` and is drawn
/// from `N(class_means[k], class_covs[k])`.
pub fn gen_latent_mixture(
    n: usize,
    class_means: &[Vec<f64>],
    class_covs: &[Vec<Vec<f64>>],
    seed: u64,
) -> Result<LatentTable> {
    let k = class_means.len();
    if k == 0 || class_covs.len() != k {
        return Err(Error::input("need one mean and one covariance per class"));
    }
    let d = class_means[0].len();
    let mut factors = Vec::with_capacity(k);
    for (c, (mean, cov)) in class_means.iter().zip(class_covs).enumerate() {
        if mean.len() != d || cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::input(format!("class {c} has inconsistent dimensions")));
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        if (0..d).any(|i| (0..d).any(|j| m[(i, j)] != m[(j, i)])) {
            return Err(Error::input(format!("covariance of class {c} is not symmetric")));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::input(format!("covariance of class {c} is not positive definite")))?;
        factors.push(chol.l());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let z = &factors[c] * eps;
        rows.push((0..d).map(|j| class_means[c][j] + z[j]).collect());
        labels.push(c);
    }
    Ok(LatentTable {
        rows,
        labels,
        group_ids: (0..n as u64).collect(),
        column_ids: (0..d).collect(),
        num_classes: k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EllipseParams {
    pub n: usize,
    pub side: usize,
    /// (vertical, horizontal) semi-axes per class; class 1 is the larger one.
    pub class_radii: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    /// Maximum centre displacement in pixels, drawn once per group.
    pub jitter: f64,
    pub images_per_group: usize,
    pub foreground: f64,
    pub background: f64,
}

impl Default for EllipseParams {
    fn default() -> Self {
        EllipseParams {
            n: 2000,
            side: 32,
            class_radii: vec![(6.0, 5.0), (10.0, 9.0)],
            noise_sigma: 0.05,
            jitter: 3.0,
            images_per_group: 4,
            foreground: 0.85,
            background: 0.15,
        }
    }
}

/// Images of a centred filled ellipse whose size depends on the class, with
/// a per-group position jitter and clipped additive Gaussian noise.  Classes
/// alternate so the set is balanced; pixels are quantised to 8 bits.
pub fn gen_ellipse_images(params: &EllipseParams, seed: u64) -> Result<LabeledDataset> {
    let p = params;
    if p.side < 16 {
        return Err(Error::input("image side must be at least 16"));
    }
    if p.class_radii.len() < 2 {
        return Err(Error::input("need radii for at least two classes"));
    }
    for (i, a) in p.class_radii.iter().enumerate() {
        if !(a.0 > 0.5 && a.1 > 0.5) || a.0.max(a.1) + p.jitter >= p.side as f64 / 2.0 {
            return Err(Error::input(format!("radii of class {i} are degenerate or do not fit the image")));
        }
        if p.class_radii[..i].iter().any(|b| b == a) {
            return Err(Error::input("class radii must be distinct"));
        }
    }
    if !(p.noise_sigma >= 0.0) || !(p.jitter >= 0.0) || p.images_per_group == 0 {
        return Err(Error::input("noise, jitter and group size must be non-negative / positive"));
    }
    let k = p.class_radii.len();
    let side = p.side;
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let union = (
        p.class_radii.iter().map(|r| r.0).fold(0.0, f64::max),
        p.class_radii.iter().map(|r| r.1).fold(0.0, f64::max),
    );

    let mut instances = Vec::with_capacity(p.n);
    let mut labels = Vec::with_capacity(p.n);
    let mut group_ids = Vec::with_capacity(p.n);
    let mut regions = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let label = i % k;
        let group = (i / p.images_per_group) as u64;
        let mut grng = ChaCha8Rng::seed_from_u64(seed ^ group.wrapping_mul(0xA076_1D64_78BD_642F));
        let (dy, dx) = if p.jitter > 0.0 {
            (grng.random_range(-p.jitter..=p.jitter), grng.random_range(-p.jitter..=p.jitter))
        } else {
            (0.0, 0.0)
        };
        let center = (side as f64 / 2.0 + dy, side as f64 / 2.0 + dx);
        let radii = p.class_radii[label];
        let mut irng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1) ^ (i as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB));
        let pixels: Vec<f64> = (0..side * side)
            .map(|j| {
                let base = if inside(center, radii, j / side, j % side) { p.foreground } else { p.background };
                let v = if p.noise_sigma > 0.0 { base + noise.sample(&mut irng) } else { base };
                quantize(v) as f64 / 255.0
            })
            .collect();
        instances.push(pixels);
        labels.push(label);
        group_ids.push(group);
        regions.push(EllipseRegion {
            center,
            radii,
            bbox: ellipse_bbox(center, radii, side),
            region_bbox: ellipse_bbox(center, union, side),
        });
    }
    Ok(LabeledDataset {
        instances,
        shape: (side, side),
        labels,
        group_ids,
        metadata: DatasetMetadata {
            generator: "ellipse".into(),
            parameters: serde_json::to_value(params)?,
            seed,
            regions,
        },
    })
}
