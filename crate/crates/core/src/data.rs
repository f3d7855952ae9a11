//! Seeded synthetic datasets: Gaussian blobs, concentric rings, and small
//! striped grid textures. Labels are assigned round-robin so every class
//! gets `samples / classes` points, ±1.

use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[allow(unused_imports)] // std builds resolve the inherent methods first
use num_traits::Float;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// Class centers evenly spaced on a circle of radius `spread` in the
    /// first two coordinates; isotropic Gaussian noise in all `dim`.
    GaussianBlobs { classes: usize, dim: usize, spread: f64, noise: f64 },
    /// 2-D points; class `k` lies in the radius band `[k + 0.5, k + 1.5)`
    /// with radial jitter `noise`.
    Ring { classes: usize, noise: f64 },
    /// `height × width` row-major images of stripes whose orientation
    /// encodes the class, with random phase and additive noise.
    GridTexture { classes: usize, height: usize, width: usize, noise: f64 },
}

// no deny_unknown_fields: serde rejects it together with `flatten`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub generator: Generator,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `(height, width)` for grid data.
    pub shape: Option<(usize, usize)>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// First `n` samples and the rest (round-robin labels keep both halves
    /// balanced when `n` is a multiple of the class count).
    pub fn split(&self, n: usize) -> (SyntheticDataset, SyntheticDataset) {
        let n = n.min(self.len());
        let part = |r: core::ops::Range<usize>| SyntheticDataset {
            spec: self.spec.clone(),
            inputs: self.inputs[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
            classes: self.classes,
            shape: self.shape,
        };
        (part(0..n), part(n..self.len()))
    }
}

fn normal(r: &mut crate::seed::Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn gen_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    let bad = |m: &str| Err(Error::BadSpec(m.into()));
    if spec.samples == 0 {
        return bad("samples must be positive");
    }
    let classes = match spec.generator {
        Generator::GaussianBlobs { classes, dim, spread, noise } => {
            if dim < 2 || !(spread > 0.0) || !(noise >= 0.0) {
                return bad("blobs need dim >= 2, spread > 0, noise >= 0");
            }
            classes
        }
        Generator::Ring { classes, noise } => {
            if !(noise >= 0.0) || noise >= 0.5 {
                return bad("ring noise must lie in [0, 0.5)");
            }
            classes
        }
        Generator::GridTexture { classes, height, width, noise } => {
            if height < 2 || width < 2 || !(noise >= 0.0) {
                return bad("grid needs at least 2×2 pixels and noise >= 0");
            }
            classes
        }
    };
    if classes < 2 {
        return bad("need at least two classes");
    }
    let mut r = crate::seed::rng(spec.seed);
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % classes;
        let x = match spec.generator {
            Generator::GaussianBlobs { dim, spread, noise, .. } => {
                let a = 2.0 * PI * y as f64 / classes as f64;
                let mut x: Vec<f64> = (0..dim).map(|_| noise * normal(&mut r)).collect();
                x[0] += spread * a.cos();
                x[1] += spread * a.sin();
                x
            }
            Generator::Ring { noise, .. } => {
                let rad = y as f64
                    + 1.0
                    + r.random_range(-0.5 + noise..0.5 - noise)
                    + noise * normal(&mut r).clamp(-1.0, 1.0);
                let a = r.random_range(0.0..2.0 * PI);
                alloc::vec![rad * a.cos(), rad * a.sin()]
            }
            Generator::GridTexture { height, width, noise, .. } => {
                let theta = PI * y as f64 / classes as f64;
                let (c, s) = (theta.cos(), theta.sin());
                let phase = r.random_range(0.0..2.0 * PI);
                let freq = 2.0 * PI / 4.0;
                let mut x = Vec::with_capacity(height * width);
                for row in 0..height {
                    for col in 0..width {
                        let t = freq * (row as f64 * s + col as f64 * c) + phase;
                        x.push(t.sin() + noise * normal(&mut r));
                    }
                }
                x
            }
        };
        inputs.push(x);
        labels.push(y);
    }
    let shape = match spec.generator {
        Generator::GridTexture { height, width, .. } => Some((height, width)),
        _ => None,
    };
    Ok(SyntheticDataset { spec: spec.clone(), inputs, labels, classes, shape })
}
