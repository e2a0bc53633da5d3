//! Dense tanh MLP with softmax cross-entropy: exact loss, gradient,
//! per-example gradients, and Hessian-vector products.
//!
//! Everything is batched and f64. The backward pass runs through one shared
//! kernel that scales each example's contribution by a per-example factor
//! and accumulates in example order; the non-private path uses scale 1 for
//! every example and the DP path uses the clipping scale. Multiplying by
//! exactly 1.0 is a bitwise no-op, so a privacy run with clipping slack and
//! sigma = 0 reproduces the non-private gradient bit for bit.
//!
//! The HVP is the exact Pearlmutter forward-over-reverse evaluation, so
//! curvature probes carry no finite-difference noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fmath;
use crate::param::ParamVector;
use crate::rng::{stream, Domain};

// ---------------------------------------------------------------------------
// Specs and batches
// ---------------------------------------------------------------------------

/// Hidden activation; only tanh is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
}

/// Training loss; only mean softmax cross-entropy is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    SoftmaxCrossEntropy,
}

/// Architecture of the MLP: layer sizes from input to output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl ModelSpec {
    /// At least one hidden layer; all sizes positive.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidConfig {
                what: "layer_sizes",
                why: "need input, at least one hidden, and output layer",
            });
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig {
                what: "layer_sizes",
                why: "zero-width layer",
            });
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::Tanh,
            loss: LossKind::SoftmaxCrossEntropy,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum of n_i * n_{i+1} + n_{i+1}.
    pub fn param_len(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (weights, biases) views into a flat parameter slice for layer l.
    /// Weights are row-major (fan_out x fan_in).
    fn layer<'a>(&self, p: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let (rows, cols) = (self.layer_sizes[l + 1], self.layer_sizes[l]);
        let off = self.offset_of(l);
        (&p[off..off + rows * cols], &p[off + rows * cols..off + rows * cols + rows])
    }

    fn offset_of(&self, l: usize) -> usize {
        (0..l)
            .map(|k| self.layer_sizes[k] * self.layer_sizes[k + 1] + self.layer_sizes[k + 1])
            .sum()
    }
}

/// A full-batch dataset view: n inputs of width dim plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    dim: usize,
}

impl DataBatch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidConfig {
                what: "batch",
                why: "empty batch",
            });
        }
        if inputs.len() != n * dim {
            return Err(Error::DimMismatch {
                context: "batch inputs",
                expected: n * dim,
                got: inputs.len(),
            });
        }
        if !inputs.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("batch inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            n,
            dim,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// The batch with every example appearing twice (original order, then
    /// the copy); used by mean-invariance tests.
    pub fn doubled(&self) -> Self {
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&self.inputs);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&self.labels);
        Self {
            inputs,
            labels,
            n: 2 * self.n,
            dim: self.dim,
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, deterministic
/// in the seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = stream(seed, Domain::Init);
    let mut p = ParamVector::zeros(spec.param_len());
    let buf = p.as_mut_slice();
    for l in 0..spec.depth() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let bound = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
        let off = spec.offset_of(l);
        for w in &mut buf[off..off + fan_in * fan_out] {
            *w = rng.random_range(-bound..=bound);
        }
        // Biases stay zero.
    }
    p
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Activations from a full forward pass: hidden layers are post-tanh, the
/// last entry holds raw logits.
struct Forward {
    /// acts[l] is n x layer_sizes[l+1]; the input itself is read from the
    /// batch and not copied here.
    acts: Vec<Vec<f64>>,
}

fn forward(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch) -> Result<Forward> {
    if params.len() != spec.param_len() {
        return Err(Error::DimMismatch {
            context: "params",
            expected: spec.param_len(),
            got: params.len(),
        });
    }
    if batch.dim() != spec.input_dim() {
        return Err(Error::DimMismatch {
            context: "batch width",
            expected: spec.input_dim(),
            got: batch.dim(),
        });
    }
    let classes = spec.classes();
    for &y in batch.labels() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }
    let p = params.as_slice();
    let n = batch.n();
    let depth = spec.depth();
    let mut acts = Vec::with_capacity(depth);
    for l in 0..depth {
        let (w, b) = spec.layer(p, l);
        let (out_w, in_w) = (spec.layer_sizes[l + 1], spec.layer_sizes[l]);
        let mut z = vec![0.0; n * out_w];
        for i in 0..n {
            let a_row: &[f64] = if l == 0 {
                batch.input_row(i)
            } else {
                let prev: &Vec<f64> = &acts[l - 1];
                &prev[i * in_w..(i + 1) * in_w]
            };
            let z_row = &mut z[i * out_w..(i + 1) * out_w];
            for o in 0..out_w {
                let w_row = &w[o * in_w..(o + 1) * in_w];
                let mut acc = b[o];
                for (aj, wj) in a_row.iter().zip(w_row) {
                    acc += aj * wj;
                }
                z_row[o] = acc;
            }
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("forward activations"));
        }
        if l + 1 < depth {
            for v in &mut z {
                *v = fmath::tanh(*v);
            }
        }
        acts.push(z);
    }
    Ok(Forward { acts })
}

/// Softmax probabilities and mean cross-entropy from logits.
fn softmax_loss(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = labels.len();
    let mut probs = vec![0.0; n * classes];
    let mut loss_sum = 0.0;
    for i in 0..n {
        let z = &logits[i * classes..(i + 1) * classes];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let p_row = &mut probs[i * classes..(i + 1) * classes];
        for (pc, zc) in p_row.iter_mut().zip(z) {
            let e = fmath::exp(zc - m);
            *pc = e;
            sum += e;
        }
        let lse = m + fmath::ln(sum);
        for pc in p_row.iter_mut() {
            *pc /= sum;
        }
        loss_sum += lse - z[labels[i]];
    }
    let loss = loss_sum / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((probs, loss))
}

fn accuracy_from_logits(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    let mut correct = 0usize;
    for i in 0..n {
        let z = &logits[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for c in 1..classes {
            // Strict inequality keeps the lowest index on ties.
            if z[c] > z[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Per-example output deltas dl_i/dz (unscaled by 1/n) and the hidden
/// deltas obtained by backpropagating them.
fn backward_deltas(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
    fwd: &Forward,
    probs: &[f64],
) -> Vec<Vec<f64>> {
    let p = params.as_slice();
    let n = batch.n();
    let depth = spec.depth();
    let classes = spec.classes();
    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); depth];

    let mut d_out = probs.to_vec();
    for (i, &y) in batch.labels().iter().enumerate() {
        d_out[i * classes + y] -= 1.0;
    }
    deltas[depth - 1] = d_out;

    for l in (0..depth - 1).rev() {
        let (w_next, _) = spec.layer(p, l + 1);
        let (out_next, width) = (spec.layer_sizes[l + 2], spec.layer_sizes[l + 1]);
        let a = &fwd.acts[l];
        let d_next = &deltas[l + 1];
        let mut d = vec![0.0; n * width];
        for i in 0..n {
            let d_next_row = &d_next[i * out_next..(i + 1) * out_next];
            let a_row = &a[i * width..(i + 1) * width];
            let d_row = &mut d[i * width..(i + 1) * width];
            for (o, &dn) in d_next_row.iter().enumerate() {
                let w_row = &w_next[o * width..(o + 1) * width];
                for j in 0..width {
                    d_row[j] += dn * w_row[j];
                }
            }
            for j in 0..width {
                d_row[j] *= 1.0 - a_row[j] * a_row[j];
            }
        }
        deltas[l] = d;
    }
    deltas
}

/// Accumulates sum_i scale_i * grad_i into `grad` (flat, unnormalized),
/// iterating examples in ascending order. The caller owns the final 1/n.
fn accumulate_scaled_grads(
    spec: &ModelSpec,
    batch: &DataBatch,
    fwd: &Forward,
    deltas: &[Vec<f64>],
    scales: &[f64],
    grad: &mut ParamVector,
) {
    let n = batch.n();
    let depth = spec.depth();
    let buf = grad.as_mut_slice();
    for l in 0..depth {
        let (out_w, in_w) = (spec.layer_sizes[l + 1], spec.layer_sizes[l]);
        let d = &deltas[l];
        let off = spec.offset_of(l);
        for i in 0..n {
            let s = scales[i];
            let a_row: &[f64] = if l == 0 {
                batch.input_row(i)
            } else {
                &fwd.acts[l - 1][i * in_w..(i + 1) * in_w]
            };
            let d_row = &d[i * out_w..(i + 1) * out_w];
            let (gw, gb) = {
                let (w, rest) = buf[off..].split_at_mut(out_w * in_w);
                (w, &mut rest[..out_w])
            };
            for (o, &dv) in d_row.iter().enumerate() {
                let sd = s * dv;
                let g_row = &mut gw[o * in_w..(o + 1) * in_w];
                for (g, aj) in g_row.iter_mut().zip(a_row) {
                    *g += sd * aj;
                }
                gb[o] += sd;
            }
        }
    }
}

/// Per-example gradient norms from the rank-1 layer structure:
/// ||g_i||^2 = sum_l ||delta_l[i]||^2 (||a_{l-1}[i]||^2 + 1).
fn per_example_norms(
    spec: &ModelSpec,
    batch: &DataBatch,
    fwd: &Forward,
    deltas: &[Vec<f64>],
) -> Vec<f64> {
    let n = batch.n();
    let depth = spec.depth();
    let mut norms_sq = vec![0.0; n];
    for l in 0..depth {
        let (out_w, in_w) = (spec.layer_sizes[l + 1], spec.layer_sizes[l]);
        let d = &deltas[l];
        for i in 0..n {
            let a_row: &[f64] = if l == 0 {
                batch.input_row(i)
            } else {
                &fwd.acts[l - 1][i * in_w..(i + 1) * in_w]
            };
            let a_sq: f64 = a_row.iter().map(|x| x * x).sum();
            let d_sq: f64 = d[i * out_w..(i + 1) * out_w].iter().map(|x| x * x).sum();
            norms_sq[i] += d_sq * (a_sq + 1.0);
        }
    }
    for v in &mut norms_sq {
        *v = fmath::sqrt(*v);
    }
    norms_sq
}

// ---------------------------------------------------------------------------
// Public gradient interfaces
// ---------------------------------------------------------------------------

/// Loss, accuracy, mean gradient, and the mean per-example gradient norm.
pub struct GradOutput {
    pub loss: f64,
    pub accuracy: f64,
    pub grad: ParamVector,
    pub grad_norm_mean: f64,
}

/// Additional DP statistics on top of [`GradOutput`].
pub struct DpGradOutput {
    pub base: GradOutput,
    pub clip_fraction: f64,
}

/// Mean loss and gradient over the batch.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
) -> Result<(f64, ParamVector)> {
    let out = grad_full(spec, params, batch)?;
    Ok((out.loss, out.grad))
}

/// Full non-private pass: one forward, one backward, everything the
/// training loop logs.
pub fn grad_full(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch) -> Result<GradOutput> {
    let fwd = forward(spec, params, batch)?;
    let classes = spec.classes();
    let logits = fwd.acts.last().unwrap();
    let (probs, loss) = softmax_loss(logits, batch.labels(), classes)?;
    let accuracy = accuracy_from_logits(logits, batch.labels(), classes);
    let deltas = backward_deltas(spec, params, batch, &fwd, &probs);
    let norms = per_example_norms(spec, batch, &fwd, &deltas);
    let ones = vec![1.0; batch.n()];
    let mut grad = ParamVector::zeros(spec.param_len());
    accumulate_scaled_grads(spec, batch, &fwd, &deltas, &ones, &mut grad);
    grad.scale(1.0 / batch.n() as f64);
    let grad_norm_mean = norms.iter().sum::<f64>() / batch.n() as f64;
    Ok(GradOutput {
        loss,
        accuracy,
        grad,
        grad_norm_mean,
    })
}

/// DP pass per Algorithm 1: clip each per-example gradient to norm `clip`,
/// sum, add N(0, (sigma*clip)^2) per coordinate once, divide by the batch
/// size. With sigma = 0 the noise loop is skipped entirely.
pub fn grad_dp<R: Rng>(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<DpGradOutput> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::InvalidConfig {
            what: "clip",
            why: "must be positive and finite",
        });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig {
            what: "sigma",
            why: "must be nonnegative and finite",
        });
    }
    let fwd = forward(spec, params, batch)?;
    let classes = spec.classes();
    let logits = fwd.acts.last().unwrap();
    let (probs, loss) = softmax_loss(logits, batch.labels(), classes)?;
    let accuracy = accuracy_from_logits(logits, batch.labels(), classes);
    let deltas = backward_deltas(spec, params, batch, &fwd, &probs);
    let norms = per_example_norms(spec, batch, &fwd, &deltas);
    let n = batch.n();
    let mut clipped = 0usize;
    let scales: Vec<f64> = norms
        .iter()
        .map(|&norm| {
            let s = (clip / norm).min(1.0);
            if s < 1.0 {
                clipped += 1;
            }
            s
        })
        .collect();
    let mut grad = ParamVector::zeros(spec.param_len());
    accumulate_scaled_grads(spec, batch, &fwd, &deltas, &scales, &mut grad);
    if sigma > 0.0 {
        let std = sigma * clip;
        for g in grad.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *g += std * z;
        }
    }
    grad.scale(1.0 / n as f64);
    let grad_norm_mean = norms.iter().sum::<f64>() / n as f64;
    Ok(DpGradOutput {
        base: GradOutput {
            loss,
            accuracy,
            grad,
            grad_norm_mean,
        },
        clip_fraction: clipped as f64 / n as f64,
    })
}

/// Materialized per-example gradients g_i = grad of l(theta; x_i, y_i).
/// Their mean equals the full-batch gradient.
pub fn per_example_grads(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
) -> Result<Vec<ParamVector>> {
    let fwd = forward(spec, params, batch)?;
    let classes = spec.classes();
    let logits = fwd.acts.last().unwrap();
    let (probs, _) = softmax_loss(logits, batch.labels(), classes)?;
    let deltas = backward_deltas(spec, params, batch, &fwd, &probs);
    let n = batch.n();
    let depth = spec.depth();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = ParamVector::zeros(spec.param_len());
        let buf = g.as_mut_slice();
        for l in 0..depth {
            let (out_w, in_w) = (spec.layer_sizes[l + 1], spec.layer_sizes[l]);
            let a_row: &[f64] = if l == 0 {
                batch.input_row(i)
            } else {
                &fwd.acts[l - 1][i * in_w..(i + 1) * in_w]
            };
            let d_row = &deltas[l][i * out_w..(i + 1) * out_w];
            let off = spec.offset_of(l);
            let (gw, rest) = buf[off..].split_at_mut(out_w * in_w);
            let gb = &mut rest[..out_w];
            for (o, &dv) in d_row.iter().enumerate() {
                for (g, aj) in gw[o * in_w..(o + 1) * in_w].iter_mut().zip(a_row) {
                    *g = dv * aj;
                }
                gb[o] = dv;
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Loss and accuracy without gradients (forward only).
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch) -> Result<(f64, f64)> {
    let fwd = forward(spec, params, batch)?;
    let logits = fwd.acts.last().unwrap();
    let (_, loss) = softmax_loss(logits, batch.labels(), spec.classes())?;
    Ok((loss, accuracy_from_logits(logits, batch.labels(), spec.classes())))
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, batch: &DataBatch) -> Result<f64> {
    let fwd = forward(spec, params, batch)?;
    Ok(accuracy_from_logits(
        fwd.acts.last().unwrap(),
        batch.labels(),
        spec.classes(),
    ))
}

// ---------------------------------------------------------------------------
// Hessian-vector product
// ---------------------------------------------------------------------------

/// Exact H(theta) v for the mean softmax cross-entropy loss, evaluated
/// forward-over-reverse.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &DataBatch,
    v: &ParamVector,
) -> Result<ParamVector> {
    if v.len() != spec.param_len() {
        return Err(Error::DimMismatch {
            context: "hvp direction",
            expected: spec.param_len(),
            got: v.len(),
        });
    }
    let fwd = forward(spec, params, batch)?;
    let classes = spec.classes();
    let logits = fwd.acts.last().unwrap();
    let (probs, _) = softmax_loss(logits, batch.labels(), classes)?;

    let p = params.as_slice();
    let vbuf = v.as_slice();
    let n = batch.n();
    let depth = spec.depth();
    let inv_n = 1.0 / n as f64;

    // R-forward sweep: directional derivatives of activations.
    // r_acts[l] matches fwd.acts[l]; for hidden layers it is R{a} = phi'(z) R{z},
    // for the output it is R{z}.
    let mut r_acts: Vec<Vec<f64>> = Vec::with_capacity(depth);
    for l in 0..depth {
        let (w, _) = spec.layer(p, l);
        let (vw, vb) = spec.layer(vbuf, l);
        let (out_w, in_w) = (spec.layer_sizes[l + 1], spec.layer_sizes[l]);
        let mut rz = vec![0.0; n * out_w];
        for i in 0..n {
            let a_row: &[f64] = if l == 0 {
                batch.input_row(i)
            } else {
                &fwd.acts[l - 1][i * in_w..(i + 1) * in_w]
            };
            let rz_row = &mut rz[i * out_w..(i + 1) * out_w];
            for o in 0..out_w {
                let vw_row = &vw[o * in_w..(o + 1) * in_w];
                let mut acc = vb[o];
                for (aj, vj) in a_row.iter().zip(vw_row) {
                    acc += aj * vj;
                }
                rz_row[o] = acc;
            }
            if l > 0 {
                let ra_prev = &r_acts[l - 1][i * in_w..(i + 1) * in_w];
                for o in 0..out_w {
                    let w_row = &w[o * in_w..(o + 1) * in_w];
                    let mut acc = 0.0;
                    for (rj, wj) in ra_prev.iter().zip(w_row) {
                        acc += rj * wj;
                    }
                    rz_row[o] += acc;
                }
            }
        }
        if l + 1 < depth {
            let a = &fwd.acts[l];
            for (rv, av) in rz.iter_mut().zip(a) {
                *rv *= 1.0 - av * av;
            }
        }
        r_acts.push(rz);
    }

    // Output deltas at mean-loss scale and their directional derivatives:
    // delta_L = (P - Y)/n, R{delta_L} = (diag(P) - P P')/n R{z_L}.
    let mut delta = vec![0.0; n * classes];
    let mut r_delta = vec![0.0; n * classes];
    let rz_out = &r_acts[depth - 1];
    for i in 0..n {
        let p_row = &probs[i * classes..(i + 1) * classes];
        let rz_row = &rz_out[i * classes..(i + 1) * classes];
        let dot: f64 = p_row.iter().zip(rz_row).map(|(pc, rc)| pc * rc).sum();
        let d_row = &mut delta[i * classes..(i + 1) * classes];
        let rd_row = &mut r_delta[i * classes..(i + 1) * classes];
        for c in 0..classes {
            d_row[c] = p_row[c] * inv_n;
            rd_row[c] = p_row[c] * (rz_row[c] - dot) * inv_n;
        }
        d_row[batch.labels()[i]] -= inv_n;
    }

    // R-backward sweep, accumulating the HVP blocks:
    // R{grad W_l} = sum_i R{delta}_l a_{l-1}' + delta_l R{a}_{l-1}'.
    let mut out = ParamVector::zeros(spec.param_len());
    let obuf = out.as_mut_slice();
    let mut delta_l = delta;
    let mut r_delta_l = r_delta;
    for l in (0..depth).rev() {
        let (out_w, in_w) = (spec.layer_sizes[l + 1], spec.layer_sizes[l]);
        let off = spec.offset_of(l);
        {
            let (gw, rest) = obuf[off..].split_at_mut(out_w * in_w);
            let gb = &mut rest[..out_w];
            for i in 0..n {
                let a_row: &[f64] = if l == 0 {
                    batch.input_row(i)
                } else {
                    &fwd.acts[l - 1][i * in_w..(i + 1) * in_w]
                };
                let ra_row: Option<&[f64]> = if l == 0 {
                    None
                } else {
                    Some(&r_acts[l - 1][i * in_w..(i + 1) * in_w])
                };
                let d_row = &delta_l[i * out_w..(i + 1) * out_w];
                let rd_row = &r_delta_l[i * out_w..(i + 1) * out_w];
                for o in 0..out_w {
                    let g_row = &mut gw[o * in_w..(o + 1) * in_w];
                    let rd = rd_row[o];
                    let dv = d_row[o];
                    match ra_row {
                        Some(ra) => {
                            for j in 0..in_w {
                                g_row[j] += rd * a_row[j] + dv * ra[j];
                            }
                        }
                        None => {
                            for j in 0..in_w {
                                g_row[j] += rd * a_row[j];
                            }
                        }
                    }
                    gb[o] += rd;
                }
            }
        }

        if l == 0 {
            break;
        }

        // Propagate deltas and their derivatives through layer l:
        // u = delta_l W_l, R{u} = R{delta}_l W_l + delta_l V_l, then
        // delta_{l-1} = u phi'(z), R{delta_{l-1}} = R{u} phi'(z) - 2 a R{a} u.
        let (w, _) = spec.layer(p, l);
        let (vw, _) = spec.layer(vbuf, l);
        let width = in_w;
        let a_prev = &fwd.acts[l - 1];
        let ra_prev = &r_acts[l - 1];
        let mut d_new = vec![0.0; n * width];
        let mut rd_new = vec![0.0; n * width];
        for i in 0..n {
            let d_row = &delta_l[i * out_w..(i + 1) * out_w];
            let rd_row = &r_delta_l[i * out_w..(i + 1) * out_w];
            let mut u = vec![0.0; width];
            let mut ru = vec![0.0; width];
            for o in 0..out_w {
                let w_row = &w[o * width..(o + 1) * width];
                let vw_row = &vw[o * width..(o + 1) * width];
                let dv = d_row[o];
                let rdv = rd_row[o];
                for j in 0..width {
                    u[j] += dv * w_row[j];
                    ru[j] += rdv * w_row[j] + dv * vw_row[j];
                }
            }
            let a_row = &a_prev[i * width..(i + 1) * width];
            let ra_row = &ra_prev[i * width..(i + 1) * width];
            let dn = &mut d_new[i * width..(i + 1) * width];
            let rdn = &mut rd_new[i * width..(i + 1) * width];
            for j in 0..width {
                let phi1 = 1.0 - a_row[j] * a_row[j];
                dn[j] = u[j] * phi1;
                rdn[j] = ru[j] * phi1 - 2.0 * a_row[j] * ra_row[j] * u[j];
            }
        }
        delta_l = d_new;
        r_delta_l = rd_new;
    }

    if !out.all_finite() {
        return Err(Error::NonFinite("hvp"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(vec![8, 5, 5, 3]).unwrap()
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> DataBatch {
        let mut rng = stream(seed, Domain::Data);
        let dim = spec.input_dim();
        let inputs: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes())).collect();
        DataBatch::new(inputs, labels, dim).unwrap()
    }

    #[test]
    fn param_count_for_full_scale_architecture() {
        // (3072*200+200) + (200*200+200) + (200*10+10), summed by hand.
        let spec = ModelSpec::new(vec![3072, 200, 200, 10]).unwrap();
        assert_eq!(spec.param_len(), 656_810);
        assert_eq!(init_params(&spec, 0).len(), 656_810);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::new(vec![2, 3, 2]).unwrap();
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        let p = a.as_slice();
        // Bias block of layer 0 sits right after the 2x3 weight block.
        assert_eq!(&p[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(&p[6 + 3 + 3 * 2..], &[0.0, 0.0]);
        // Different seeds give different weights.
        assert_ne!(init_params(&spec, 43), a);
    }

    #[test]
    fn zero_params_give_uniform_softmax_loss() {
        let spec = ModelSpec::new(vec![4, 6, 10]).unwrap();
        let params = ParamVector::zeros(spec.param_len());
        let batch = random_batch(&spec, 20, 7);
        let (loss, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        // 20 sampled coordinates per seed, relative error under 1e-5.
        for seed in 0..3u64 {
            let spec = tiny_spec();
            let params = init_params(&spec, seed);
            let batch = random_batch(&spec, 12, seed + 100);
            let (_, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
            let mut rng = stream(seed + 7, Domain::Probe);
            let eps = 1e-6;
            for _ in 0..20 {
                let k = rng.random_range(0..spec.param_len());
                let mut pp = params.clone();
                pp[k] += eps;
                let (lp, _) = loss_and_grad(&spec, &pp, &batch).unwrap();
                pp[k] -= 2.0 * eps;
                let (lm, _) = loss_and_grad(&spec, &pp, &batch).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let denom = grad[k].abs().max(1e-8);
                assert!(
                    (fd - grad[k]).abs() / denom < 1e-5,
                    "seed {seed} coord {k}: fd {fd} vs {g}",
                    g = grad[k]
                );
            }
        }
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grad_unchanged() {
        let spec = tiny_spec();
        let params = init_params(&spec, 3);
        let batch = random_batch(&spec, 9, 5);
        let (l1, g1) = loss_and_grad(&spec, &params, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&spec, &params, &batch.doubled()).unwrap();
        // Identical up to summation-order rounding in the mean.
        assert!((l1 - l2).abs() / l1 < 1e-13);
        for k in 0..g1.len() {
            let denom = g1[k].abs().max(1e-12);
            assert!((g1[k] - g2[k]).abs() / denom < 1e-10, "coord {k}");
        }
    }

    #[test]
    fn per_example_grads_mean_matches_full_grad() {
        let spec = tiny_spec();
        let params = init_params(&spec, 1);
        let batch = random_batch(&spec, 8, 2);
        let (_, full) = loss_and_grad(&spec, &params, &batch).unwrap();
        let per = per_example_grads(&spec, &params, &batch).unwrap();
        assert_eq!(per.len(), 8);
        let mut mean = ParamVector::zeros(spec.param_len());
        for g in &per {
            mean.axpy(1.0 / 8.0, g);
        }
        for k in 0..full.len() {
            let denom = full[k].abs().max(1e-12);
            assert!((mean[k] - full[k]).abs() / denom < 1e-10);
        }
    }

    #[test]
    fn single_example_per_example_grad_is_the_full_grad() {
        let spec = tiny_spec();
        let params = init_params(&spec, 4);
        let batch = random_batch(&spec, 1, 9);
        let (_, full) = loss_and_grad(&spec, &params, &batch).unwrap();
        let per = per_example_grads(&spec, &params, &batch).unwrap();
        for k in 0..full.len() {
            assert!((per[0][k] - full[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_examples_get_identical_per_example_grads() {
        let spec = tiny_spec();
        let params = init_params(&spec, 6);
        let one = random_batch(&spec, 1, 11);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..5 {
            inputs.extend_from_slice(one.input_row(0));
            labels.push(one.labels()[0]);
        }
        let batch = DataBatch::new(inputs, labels, spec.input_dim()).unwrap();
        let per = per_example_grads(&spec, &params, &batch).unwrap();
        for g in &per[1..] {
            assert_eq!(g, &per[0]);
        }
    }

    #[test]
    fn hvp_matches_finite_difference_of_gradients() {
        for seed in 0..3u64 {
            let spec = tiny_spec();
            let params = init_params(&spec, seed + 20);
            let batch = random_batch(&spec, 10, seed + 30);
            let mut rng = stream(seed, Domain::Probe);
            let v = ParamVector::from_vec(
                (0..spec.param_len())
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect(),
            );
            let hv = hvp(&spec, &params, &batch, &v).unwrap();
            let eps = 1e-4;
            let mut pp = params.clone();
            pp.axpy(eps, &v);
            let (_, gp) = loss_and_grad(&spec, &pp, &batch).unwrap();
            let mut pm = params.clone();
            pm.axpy(-eps, &v);
            let (_, gm) = loss_and_grad(&spec, &pm, &batch).unwrap();
            let mut fd = gp;
            fd.axpy(-1.0, &gm);
            fd.scale(1.0 / (2.0 * eps));
            let mut diff = fd.clone();
            diff.axpy(-1.0, &hv);
            let rel = diff.norm() / hv.norm().max(1e-12);
            assert!(rel < 1e-4, "seed {seed}: rel {rel}");
        }
    }

    #[test]
    fn hvp_is_linear() {
        let spec = tiny_spec();
        let params = init_params(&spec, 8);
        let batch = random_batch(&spec, 6, 8);
        let mut rng = stream(99, Domain::Probe);
        let v = ParamVector::from_vec(
            (0..spec.param_len())
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        );
        let hv = hvp(&spec, &params, &batch, &v).unwrap();
        let mut v3 = v.clone();
        v3.scale(3.0);
        let hv3 = hvp(&spec, &params, &batch, &v3).unwrap();
        for k in 0..hv.len() {
            let denom = hv[k].abs().max(1e-12);
            assert!((hv3[k] - 3.0 * hv[k]).abs() / denom < 1e-12);
        }
    }

    #[test]
    fn hvp_is_symmetric_bilinear_form() {
        let spec = tiny_spec();
        let params = init_params(&spec, 13);
        let batch = random_batch(&spec, 7, 14);
        let mut rng = stream(15, Domain::Probe);
        let dim = spec.param_len();
        let u = ParamVector::from_vec((0..dim).map(|_| rng.random::<f64>() - 0.5).collect());
        let v = ParamVector::from_vec((0..dim).map(|_| rng.random::<f64>() - 0.5).collect());
        let vhu = v.dot(&hvp(&spec, &params, &batch, &u).unwrap());
        let uhv = u.dot(&hvp(&spec, &params, &batch, &v).unwrap());
        assert!((vhu - uhv).abs() / vhu.abs().max(1e-12) < 1e-8);
    }

    #[test]
    fn accuracy_ties_break_to_lowest_class() {
        let spec = ModelSpec::new(vec![3, 4, 10]).unwrap();
        let params = ParamVector::zeros(spec.param_len());
        let batch = DataBatch::new(vec![0.5, -0.25, 1.0], vec![0], 3).unwrap();
        assert_eq!(accuracy(&spec, &params, &batch).unwrap(), 1.0);
        let batch1 = DataBatch::new(vec![0.5, -0.25, 1.0], vec![1], 3).unwrap();
        assert_eq!(accuracy(&spec, &params, &batch1).unwrap(), 0.0);
    }

    #[test]
    fn random_model_near_chance_accuracy() {
        let spec = ModelSpec::new(vec![16, 12, 10]).unwrap();
        let params = init_params(&spec, 77);
        let batch = random_batch(&spec, 1000, 78);
        let acc = accuracy(&spec, &params, &batch).unwrap();
        assert!((0.05..=0.20).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn label_out_of_range_rejected() {
        let spec = ModelSpec::new(vec![2, 3, 2]).unwrap();
        let params = init_params(&spec, 0);
        let batch = DataBatch::new(vec![0.1, 0.2], vec![2], 2).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &params, &batch),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn nonfinite_forward_reported_as_overflow() {
        let spec = ModelSpec::new(vec![2, 3, 2]).unwrap();
        let mut params = init_params(&spec, 0);
        params[0] = 1e308;
        params[1] = 1e308;
        let batch = DataBatch::new(vec![1e3, 1e3], vec![0], 2).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &params, &batch),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dp_grad_with_slack_clip_and_zero_sigma_is_bitwise_nonprivate() {
        let spec = tiny_spec();
        let params = init_params(&spec, 21);
        let batch = random_batch(&spec, 16, 22);
        let plain = grad_full(&spec, &params, &batch).unwrap();
        let mut rng = stream(0, Domain::Noise);
        let dp = grad_dp(&spec, &params, &batch, 1e300, 0.0, &mut rng).unwrap();
        assert_eq!(dp.base.grad, plain.grad);
        assert_eq!(dp.base.loss, plain.loss);
        assert_eq!(dp.clip_fraction, 0.0);
    }
}
