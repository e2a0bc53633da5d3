//! Dataset container, per-channel standardization, and the synthetic
//! factor-model classification generator used by tests and desk runs.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fmath;
use crate::model::DataBatch;
use crate::rng::{stream, Domain};

/// Dominant eigenvalue of the synthetic input covariance's factor part.
const FACTOR_LAMBDA1: f64 = 320.0;
/// Power-law decay exponent of the factor spectrum.
const FACTOR_DECAY: f64 = 1.5;
/// Isotropic noise floor added on top of the factors.
const NOISE_FLOOR: f64 = 1.0;
/// Number of covariance factors (capped by the ambient dimension).
const MAX_FACTORS: usize = 8;

/// Per-channel mean/std captured when a dataset is standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    /// Channel means in channel order.
    pub mean: Vec<f64>,
    /// Channel standard deviations (population form).
    pub std: Vec<f64>,
}

/// An immutable in-memory dataset: row-major inputs plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    dim: usize,
    channels: usize,
    classes: usize,
    stats: Option<ChannelStats>,
}

impl Dataset {
    /// Builds a dataset, validating shapes, label range, and finiteness.
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        channels: usize,
        classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidConfig {
                what: "dataset",
                why: "no examples",
            });
        }
        if dim == 0 || channels == 0 || dim % channels != 0 {
            return Err(Error::InvalidConfig {
                what: "dataset",
                why: "dim must be a positive multiple of channels",
            });
        }
        if classes < 2 {
            return Err(Error::InvalidConfig {
                what: "dataset",
                why: "need at least two classes",
            });
        }
        if inputs.len() != n * dim {
            return Err(Error::DimMismatch {
                context: "dataset inputs",
                expected: n * dim,
                got: inputs.len(),
            });
        }
        for &y in &labels {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
        }
        if !inputs.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            n,
            dim,
            channels,
            classes,
            stats: None,
        })
    }

    /// Number of examples.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Input dimension per example.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of contiguous channels each row splits into.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of label classes.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// All inputs, row-major.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// All labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row `i` of the inputs.
    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Standardization stats, present once [`normalize`] has run.
    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    /// The first `count` examples, in stored order.
    pub fn subset(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.n {
            return Err(Error::InvalidConfig {
                what: "subset count",
                why: "must be in 1..=n",
            });
        }
        Ok(Self {
            inputs: self.inputs[..count * self.dim].to_vec(),
            labels: self.labels[..count].to_vec(),
            n: count,
            dim: self.dim,
            channels: self.channels,
            classes: self.classes,
            stats: self.stats.clone(),
        })
    }

    /// Copies the dataset into a training batch.
    pub fn to_batch(&self) -> Result<DataBatch> {
        DataBatch::new(self.inputs.clone(), self.labels.clone(), self.dim)
    }
}

/// Standardizes each channel to mean 0, std 1 using the dataset's own
/// statistics, and records them. A dataset that already carries stats is
/// returned unchanged (it is already in standardized form, and the stored
/// stats describe the transformation that produced it), so the operation is
/// idempotent.
pub fn normalize(dataset: Dataset) -> Result<Dataset> {
    if dataset.stats.is_some() {
        return Ok(dataset);
    }
    let mut dataset = dataset;
    let width = dataset.dim / dataset.channels;
    let count = (dataset.n * width) as f64;
    let mut mean = Vec::with_capacity(dataset.channels);
    let mut std = Vec::with_capacity(dataset.channels);
    for c in 0..dataset.channels {
        let lo = c * width;
        let mut sum = 0.0;
        for row in 0..dataset.n {
            let base = row * dataset.dim + lo;
            for &x in &dataset.inputs[base..base + width] {
                sum += x;
            }
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for row in 0..dataset.n {
            let base = row * dataset.dim + lo;
            for &x in &dataset.inputs[base..base + width] {
                sq += (x - mu) * (x - mu);
            }
        }
        let sigma = fmath::sqrt(sq / count);
        if sigma < 1e-12 {
            return Err(Error::DegenerateData(c));
        }
        mean.push(mu);
        std.push(sigma);
    }
    for row in 0..dataset.n {
        for c in 0..dataset.channels {
            let base = row * dataset.dim + c * width;
            for x in &mut dataset.inputs[base..base + width] {
                *x = (*x - mean[c]) / std[c];
            }
        }
    }
    dataset.stats = Some(ChannelStats { mean, std });
    Ok(dataset)
}

/// Parameters of the synthetic classification generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of examples.
    pub n: usize,
    /// Input dimension.
    pub dim: usize,
    /// Number of classes (labels cycle `i % classes`).
    pub classes: usize,
    /// Class-mean separation in units of the per-coordinate RMS std.
    pub separation: f64,
    /// Generator seed.
    pub seed: u64,
}

impl SyntheticSpec {
    /// Validates field ranges.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig {
                what: "synthetic spec",
                why: "n must be positive",
            });
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig {
                what: "synthetic spec",
                why: "dim must be positive",
            });
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig {
                what: "synthetic spec",
                why: "need at least two classes",
            });
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::InvalidConfig {
                what: "synthetic spec",
                why: "separation must be finite and nonnegative",
            });
        }
        Ok(())
    }
}

fn unit_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        loop {
            let start = out.len();
            let mut sq = 0.0;
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                sq += z * z;
                out.push(z);
            }
            let norm = fmath::sqrt(sq);
            if norm > 1e-6 {
                for x in &mut out[start..] {
                    *x /= norm;
                }
                break;
            }
            out.truncate(start);
        }
    }
    out
}

/// Draws class-conditional Gaussian data with a shared low-rank factor
/// covariance: class means are unit directions scaled by
/// `separation * rms`, where `rms` is the per-coordinate RMS std implied by
/// the factor spectrum, and every class shares factors with eigenvalues
/// `FACTOR_LAMBDA1 / k^1.5` plus an isotropic noise floor. Deterministic per
/// seed; labels cycle `i % classes`.
pub fn synthetic_gaussian_classification(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Domain::Data);
    let nfac = MAX_FACTORS.min(spec.dim);
    let dim = spec.dim;

    let mut lams = Vec::with_capacity(nfac);
    for k in 0..nfac {
        lams.push(FACTOR_LAMBDA1 / fmath::pow((k + 1) as f64, FACTOR_DECAY));
    }
    let lam_sum: f64 = lams.iter().sum();
    let rms = fmath::sqrt(NOISE_FLOOR * NOISE_FLOOR + lam_sum / dim as f64);

    let mut means = unit_rows(spec.classes, dim, &mut rng);
    for x in &mut means {
        *x *= spec.separation * rms;
    }
    let factors = unit_rows(nfac, dim, &mut rng);
    let scales: Vec<f64> = lams.iter().map(|&l| fmath::sqrt(l)).collect();

    let mut inputs = Vec::with_capacity(spec.n * dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let y = i % spec.classes;
        labels.push(y);
        let start = inputs.len();
        inputs.extend_from_slice(&means[y * dim..(y + 1) * dim]);
        for k in 0..nfac {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let coef = scales[k] * xi;
            let row = &factors[k * dim..(k + 1) * dim];
            for (x, &g) in inputs[start..].iter_mut().zip(row) {
                *x += coef * g;
            }
        }
        for x in &mut inputs[start..] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += NOISE_FLOOR * z;
        }
    }
    Dataset::new(inputs, labels, dim, 1, spec.classes)
}
