//! Piecewise-linear ReLU networks under frozen gates.
//!
//! A network is only ever *evaluated* nonlinearly; every gradient and Hessian
//! is taken on the [`LinearizedNet`] obtained by freezing the ReLU on/off
//! pattern at a reference input, where the net is exactly affine:
//! `z = W̃ᵀ x + b̃`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // std builds resolve the inherent methods first
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densela::{check_len, dot, Matrix, SymMatrix};
use crate::{Error, Result};

/// Pre-activations closer to zero than this count as a gate tie.
pub const GATE_TIE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Plain,
    /// Every layer but the last is a block `x ← x + relu(Wᵀx + b)`; the
    /// last layer is a linear head.
    Residual,
}

/// `z = Wᵀ a + b` with `W` of shape `n_in × n_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNet {
    pub arch: Arch,
    pub layers: Vec<Layer>,
}

/// Per-ReLU-layer activation masks recorded at a reference input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub masks: Vec<Vec<bool>>,
    /// Number of pre-activations with `|z| < GATE_TIE`, resolved as active.
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizedNet {
    /// `n × c` (or `n × 1` for a sigmoid head).
    pub w_tilde: Matrix,
    pub bias: Vec<f64>,
    pub gates: GateState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy {
        y: usize,
    },
    /// Single logit `z`, `p(y=1) = σ(z)`, label `y ∈ {0, 1}`.
    SigmoidBinaryCrossEntropy {
        y: usize,
    },
}

/// How the backward pass treats gates; `Exact` is ordinary backprop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackwardRule {
    Exact,
    /// ReLU layers with index `>= from` (0-based) back-propagate linearly.
    LinBp {
        from: usize,
    },
    /// Residual branches are scaled by `gamma` in the backward pass.
    Sgm {
        gamma: f64,
    },
}

impl LossKind {
    pub fn label(&self) -> usize {
        match *self {
            LossKind::SoftmaxCrossEntropy { y } | LossKind::SigmoidBinaryCrossEntropy { y } => y,
        }
    }

    /// Picks the loss matching the net's head width.
    pub fn for_net(net: &ReluNet, y: usize) -> Self {
        if net.output_dim() == 1 {
            LossKind::SigmoidBinaryCrossEntropy { y }
        } else {
            LossKind::SoftmaxCrossEntropy { y }
        }
    }

    fn validate(&self, width: usize) -> Result<()> {
        match *self {
            LossKind::SoftmaxCrossEntropy { y } if y < width && width >= 2 => Ok(()),
            LossKind::SigmoidBinaryCrossEntropy { y } if y < 2 && width == 1 => Ok(()),
            _ => Err(Error::BadSpec("label or head width does not match loss kind".into())),
        }
    }
}

impl ReluNet {
    pub fn new(arch: Arch, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::BadSpec("network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            check_len(layer.w.cols, layer.b.len())?;
            check_len(layer.w.rows * layer.w.cols, layer.w.data.len())?;
            if l > 0 {
                check_len(layers[l - 1].w.cols, layer.w.rows)?;
            }
            if arch == Arch::Residual && l + 1 < layers.len() {
                check_len(layer.w.rows, layer.w.cols)?;
            }
        }
        let out = layers[layers.len() - 1].w.cols;
        if out == 0 {
            return Err(Error::BadSpec("empty output layer".into()));
        }
        Ok(ReluNet { arch, layers })
    }

    /// Weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`.
    ///
    /// `dims = [n_0, n_1, …, n_d]`; for residual nets all inner widths must
    /// equal `n_0`.
    pub fn random(arch: Arch, dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::BadSpec("need at least input and output widths".into()));
        }
        let mut r = crate::seed::rng(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let s = 1.0 / (d[0] as f64).sqrt();
                let w = Matrix::from_fn(d[0], d[1], |_, _| r.random_range(-s..s));
                let b = (0..d[1]).map(|_| r.random_range(-s..s)).collect();
                Layer { w, b }
            })
            .collect();
        Self::new(arch, layers)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.rows];
        d.extend(self.layers.iter().map(|l| l.w.cols));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.cols
    }

    /// Class count; a single sigmoid logit counts as two classes.
    pub fn classes(&self) -> usize {
        self.output_dim().max(2)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.w.data);
            p.extend_from_slice(&l.b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.data.len();
            l.w.data.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }
}

fn affine(layer: &Layer, a: &[f64]) -> Vec<f64> {
    let mut z = layer.w.matvec_t(a);
    for (zi, bi) in z.iter_mut().zip(&layer.b) {
        *zi += bi;
    }
    z
}

struct Trace {
    /// inputs to each layer
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn run(net: &ReluNet, x: &[f64]) -> Trace {
    let d = net.layers.len();
    let mut a = x.to_vec();
    let mut acts = Vec::with_capacity(d);
    let mut pre = Vec::with_capacity(d - 1);
    for (l, layer) in net.layers.iter().enumerate() {
        acts.push(a.clone());
        let z = affine(layer, &a);
        if l + 1 == d {
            return Trace { acts, pre, logits: z };
        }
        a = match net.arch {
            Arch::Plain => z.iter().map(|&v| v.max(0.0)).collect(),
            Arch::Residual => a.iter().zip(&z).map(|(ai, zi)| ai + zi.max(0.0)).collect(),
        };
        pre.push(z);
    }
    unreachable!("loop returns at the last layer")
}

/// Exact nonlinear forward pass plus the gate pattern at `x`.
pub fn forward(net: &ReluNet, x: &[f64]) -> Result<(Vec<f64>, GateState)> {
    check_len(net.input_dim(), x.len())?;
    let t = run(net, x);
    let masks = t.pre.iter().map(|z| z.iter().map(|&v| v > 0.0).collect()).collect();
    Ok((t.logits, GateState { masks, ties: 0 }))
}

/// Effective input→logit map `W̃` (shape `n × c`) for given gates and rule.
pub fn effective_map(net: &ReluNet, gates: &GateState, rule: BackwardRule) -> Result<Matrix> {
    let d = net.layers.len();
    if let BackwardRule::LinBp { from } = rule {
        if from >= d {
            return Err(Error::BadLayer(from));
        }
    }
    if let BackwardRule::Sgm { .. } = rule {
        if net.arch != Arch::Residual {
            return Err(Error::NotResidual);
        }
    }
    // forward-mode: j = ∂a/∂x, rows = current width
    let n = net.input_dim();
    let mut j = Matrix::identity(n);
    for (l, layer) in net.layers.iter().enumerate() {
        let wt = layer.w.transpose();
        let mut branch = wt.matmul(&j);
        if l + 1 == d {
            j = branch;
            break;
        }
        let open = match rule {
            BackwardRule::LinBp { from } => l >= from,
            _ => false,
        };
        if !open {
            for (r, &on) in gates.masks[l].iter().enumerate() {
                if !on {
                    branch.data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        j = match net.arch {
            Arch::Plain => branch,
            Arch::Residual => {
                let g = if let BackwardRule::Sgm { gamma } = rule { gamma } else { 1.0 };
                let mut out = j;
                crate::densela::axpy(&mut out.data, g, &branch.data);
                out
            }
        };
    }
    Ok(j.transpose())
}

/// Freezes the gates at `x`. Pre-activations within [`GATE_TIE`] of zero are
/// resolved to the active side and counted in `gates.ties`.
pub fn linearize(net: &ReluNet, x: &[f64]) -> Result<LinearizedNet> {
    check_len(net.input_dim(), x.len())?;
    let t = run(net, x);
    let mut ties = 0;
    let masks = t
        .pre
        .iter()
        .map(|z| {
            z.iter()
                .map(|&v| {
                    if v.abs() < GATE_TIE {
                        ties += 1;
                        true
                    } else {
                        v > 0.0
                    }
                })
                .collect()
        })
        .collect();
    let gates = GateState { masks, ties };
    let w_tilde = effective_map(net, &gates, BackwardRule::Exact)?;
    let lin_out = w_tilde.matvec_t(x);
    let bias = t.logits.iter().zip(&lin_out).map(|(z, l)| z - l).collect();
    Ok(LinearizedNet { w_tilde, bias, gates })
}

impl LinearizedNet {
    pub fn input_dim(&self) -> usize {
        self.w_tilde.rows
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.w_tilde.matvec_t(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }

    /// A linear model with an explicit map, bypassing any network.
    pub fn from_map(w_tilde: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_len(w_tilde.cols, bias.len())?;
        Ok(LinearizedNet { w_tilde, bias, gates: GateState { masks: Vec::new(), ties: 0 } })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and class probabilities from raw logits.
pub fn loss_from_logits(z: &[f64], loss: LossKind) -> Result<(f64, Vec<f64>)> {
    loss.validate(z.len())?;
    match loss {
        LossKind::SoftmaxCrossEntropy { y } => {
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            let p = z.iter().map(|v| (v - lse).exp()).collect();
            Ok((lse - z[y], p))
        }
        LossKind::SigmoidBinaryCrossEntropy { y } => {
            let v = z[0];
            let softplus = v.max(0.0) + (-v.abs()).exp().ln_1p();
            let s = sigmoid(v);
            Ok((softplus - y as f64 * v, vec![1.0 - s, s]))
        }
    }
}

/// `∂Loss/∂z` (length = head width).
pub fn logit_gradient(z: &[f64], loss: LossKind) -> Result<Vec<f64>> {
    let (_, p) = loss_from_logits(z, loss)?;
    Ok(match loss {
        LossKind::SoftmaxCrossEntropy { y } => {
            let mut g = p;
            g[y] -= 1.0;
            g
        }
        LossKind::SigmoidBinaryCrossEntropy { y } => vec![p[1] - y as f64],
    })
}

pub fn loss_probs(lin: &LinearizedNet, x: &[f64], loss: LossKind) -> Result<(f64, Vec<f64>)> {
    check_len(lin.input_dim(), x.len())?;
    loss_from_logits(&lin.logits(x), loss)
}

/// `g = W̃ (p − Y)`, or `(σ(z) − y) w̃` for the sigmoid head.
pub fn input_gradient(lin: &LinearizedNet, x: &[f64], loss: LossKind) -> Result<Vec<f64>> {
    check_len(lin.input_dim(), x.len())?;
    let dz = logit_gradient(&lin.logits(x), loss)?;
    Ok(lin.w_tilde.matvec(&dz))
}

/// `H = W̃ (diag(p) − ppᵀ) W̃ᵀ`, or `σ(1−σ) w̃ w̃ᵀ` for the sigmoid head.
///
/// The softmax form is accumulated as `Σ_{k<l} p_k p_l (w_k − w_l)(w_k − w_l)ᵀ`,
/// a sum of PSD rank-one terms, which keeps the computed matrix PSD to
/// rounding.
pub fn input_hessian(lin: &LinearizedNet, x: &[f64], loss: LossKind) -> Result<SymMatrix> {
    check_len(lin.input_dim(), x.len())?;
    let (_, p) = loss_probs(lin, x, loss)?;
    let n = lin.input_dim();
    let w = &lin.w_tilde;
    let mut h = vec![0.0; n * n];
    let mut add_outer = |s: f64, v: &[f64]| {
        for i in 0..n {
            let si = s * v[i];
            if si == 0.0 {
                continue;
            }
            for j in i..n {
                h[i * n + j] += si * v[j];
            }
        }
    };
    match loss {
        LossKind::SigmoidBinaryCrossEntropy { .. } => {
            add_outer(p[0] * p[1], &w.col(0));
        }
        LossKind::SoftmaxCrossEntropy { .. } => {
            let c = w.cols;
            let cols: Vec<Vec<f64>> = (0..c).map(|k| w.col(k)).collect();
            for k in 0..c {
                for l in (k + 1)..c {
                    let s = p[k] * p[l];
                    if s == 0.0 {
                        continue;
                    }
                    let diff: Vec<f64> = cols[k].iter().zip(&cols[l]).map(|(a, b)| a - b).collect();
                    add_outer(s, &diff);
                }
            }
        }
    }
    Ok(SymMatrix::from_fn(n, |i, j| h[i * n + j]))
}

/// Replaces `W̃` at `x` by a map with orthogonal columns of norm `√κ`
/// (modified Gram–Schmidt, two passes), then resets the bias so the logits
/// at `x` — hence the probabilities — are unchanged.
pub fn orthogonalize_head(net: &ReluNet, x: &[f64], kappa: f64) -> Result<LinearizedNet> {
    let lin = linearize(net, x)?;
    orthogonalize_linear(&lin, x, kappa)
}

pub fn orthogonalize_linear(lin: &LinearizedNet, x: &[f64], kappa: f64) -> Result<LinearizedNet> {
    let (n, c) = (lin.w_tilde.rows, lin.w_tilde.cols);
    if c > n {
        return Err(Error::RankDeficient);
    }
    let z0 = lin.logits(x);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(c);
    for k in 0..c {
        let orig = lin.w_tilde.col(k);
        let scale = crate::densela::norm2(&orig);
        let mut v = orig;
        for _ in 0..2 {
            for u in &q {
                let r = dot(u, &v);
                crate::densela::axpy(&mut v, -r, u);
            }
        }
        let nv = crate::densela::norm2(&v);
        if !(nv > 1e-10 * scale.max(1e-300)) || scale == 0.0 {
            return Err(Error::RankDeficient);
        }
        v.iter_mut().for_each(|e| *e /= nv);
        q.push(v);
    }
    let s = kappa.sqrt();
    let w_tilde = Matrix::from_fn(n, c, |i, k| s * q[k][i]);
    let lin_out = w_tilde.matvec_t(x);
    let bias = z0.iter().zip(&lin_out).map(|(z, l)| z - l).collect();
    Ok(LinearizedNet { w_tilde, bias, gates: lin.gates.clone() })
}

/// Parameter gradient of the loss at `x` by exact backprop (gates at `x`),
/// flattened in [`ReluNet::params`] order.
pub fn param_gradient(net: &ReluNet, x: &[f64], loss: LossKind) -> Result<(f64, Vec<f64>)> {
    check_len(net.input_dim(), x.len())?;
    let t = run(net, x);
    let (value, _) = loss_from_logits(&t.logits, loss)?;
    let d = net.layers.len();
    let outer = |a: &[f64], dz: &[f64]| -> Vec<f64> {
        let mut gw = vec![0.0; a.len() * dz.len()];
        for (i, ai) in a.iter().enumerate() {
            for (j, dj) in dz.iter().enumerate() {
                gw[i * dz.len() + j] = ai * dj;
            }
        }
        gw
    };
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(d);
    let dz = logit_gradient(&t.logits, loss)?;
    grads.push((outer(&t.acts[d - 1], &dz), dz.clone()));
    // ∂L/∂(input of the current layer)
    let mut da = net.layers[d - 1].w.matvec(&dz);
    for l in (0..d - 1).rev() {
        let dz: Vec<f64> = da.iter().zip(&t.pre[l]).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        grads.push((outer(&t.acts[l], &dz), dz.clone()));
        let back = net.layers[l].w.matvec(&dz);
        match net.arch {
            Arch::Plain => da = back,
            Arch::Residual => da.iter_mut().zip(&back).for_each(|(a, b)| *a += b),
        }
    }
    grads.reverse();
    let mut flat = Vec::with_capacity(net.param_count());
    for (gw, gb) in grads {
        flat.extend(gw);
        flat.extend(gb);
    }
    Ok((value, flat))
}

/// Plain per-sample SGD. `perturb` maps `(net, x, loss)` to an input
/// perturbation applied before the update (zero for normal training).
#[allow(clippy::type_complexity)]
pub fn train_sgd(
    net: &mut ReluNet,
    xs: &[Vec<f64>],
    ys: &[usize],
    lr: f64,
    epochs: usize,
    seed: u64,
    perturb: &mut dyn FnMut(&ReluNet, &[f64], LossKind) -> Result<Vec<f64>>,
) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    check_len(xs.len(), ys.len())?;
    let mut r = crate::seed::rng(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut params = net.params();
    for _ in 0..epochs {
        order.shuffle(&mut r);
        for &i in &order {
            let loss = LossKind::for_net(net, ys[i]);
            let delta = perturb(net, &xs[i], loss)?;
            let xa: Vec<f64> = xs[i].iter().zip(&delta).map(|(a, b)| a + b).collect();
            let (_, g) = param_gradient(net, &xa, loss)?;
            crate::densela::axpy(&mut params, -lr, &g);
            net.set_params(&params);
        }
    }
    Ok(())
}

/// Fraction of samples whose argmax (or sigmoid side) matches the label.
pub fn accuracy(net: &ReluNet, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    let mut hits = 0;
    for (x, &y) in xs.iter().zip(ys) {
        let (z, _) = forward(net, x)?;
        if predict(&z) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / xs.len() as f64)
}

/// Predicted class from logits (lowest index wins ties).
pub fn predict(z: &[f64]) -> usize {
    if z.len() == 1 {
        return usize::from(z[0] > 0.0);
    }
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// `max_{y'≠y} z_{y'} − z_y`, runner-up chosen by lowest index on ties. A
/// single sigmoid logit is read as the two logits `(0, z)`.
pub fn margin(z: &[f64], y: usize) -> f64 {
    let two;
    let z = if z.len() == 1 {
        two = [0.0, z[0]];
        &two[..]
    } else {
        z
    };
    let mut best: Option<usize> = None;
    for (i, v) in z.iter().enumerate() {
        if i == y {
            continue;
        }
        match best {
            Some(b) if *v <= z[b] => {}
            _ => best = Some(i),
        }
    }
    z[best.expect("at least two classes")] - z[y]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densela::{jacobi_eigen, norm2};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64, s: f64) -> Vec<f64> {
        let mut r = crate::seed::rng(seed);
        (0..n).map(|_| r.random_range(-s..s)).collect()
    }

    /// Independent straight-line forward pass for a 3-layer plain net.
    #[allow(clippy::needless_range_loop)]
    fn naive_forward(net: &ReluNet, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (l, layer) in net.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.w.cols];
            for j in 0..layer.w.cols {
                let mut s = layer.b[j];
                for i in 0..layer.w.rows {
                    s += layer.w.data[i * layer.w.cols + j] * a[i];
                }
                z[j] = s;
            }
            a = if l + 1 < net.layers.len() {
                z.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect()
            } else {
                z
            };
        }
        a
    }

    #[test]
    fn identity_net() {
        let layer = Layer { w: Matrix::identity(2), b: vec![0.0; 2] };
        let net = ReluNet::new(Arch::Plain, vec![layer]).unwrap();
        let (z, g) = forward(&net, &[1.0, -1.0]).unwrap();
        assert_eq!(z, vec![1.0, -1.0]);
        assert!(g.masks.is_empty());
    }

    #[test]
    fn closed_gates_leave_bias_path() {
        let l1 = Layer { w: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), b: vec![-10.0, -10.0] };
        let l2 = Layer { w: Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap(), b: vec![0.5, -0.5, 2.0] };
        let net = ReluNet::new(Arch::Plain, vec![l1, l2]).unwrap();
        let (z, g) = forward(&net, &[1.0, 2.0]).unwrap();
        assert_eq!(g.masks, vec![vec![false, false]]);
        assert_eq!(z, vec![0.5, -0.5, 2.0]);
    }

    #[test]
    fn forward_matches_naive() {
        let net = ReluNet::random(Arch::Plain, &[6, 9, 7, 4], 5).unwrap();
        let x = rand_vec(6, 6, 1.0);
        let (z, _) = forward(&net, &x).unwrap();
        let oracle = naive_forward(&net, &x);
        for (a, b) in z.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(forward(&net, &[0.0; 5]).is_err());
    }

    #[test]
    fn linear_net_is_weight_product() {
        let net = ReluNet::random(Arch::Plain, &[4, 3], 1).unwrap();
        let lin = linearize(&net, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(lin.w_tilde, net.layers[0].w);
        let x2 = rand_vec(4, 9, 3.0);
        let (z, _) = forward(&net, &x2).unwrap();
        for (a, b) in lin.logits(&x2).iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linearization_is_locally_exact() {
        for seed in 0..20 {
            let net = ReluNet::random(Arch::Plain, &[10, 12, 8, 3], seed).unwrap();
            let x = rand_vec(10, seed + 100, 1.0);
            let lin = linearize(&net, &x).unwrap();
            let (z, g0) = forward(&net, &x).unwrap();
            for (a, b) in lin.logits(&x).iter().zip(&z) {
                assert!((a - b).abs() <= 1e-10);
            }
            let xp: Vec<f64> = x.iter().zip(rand_vec(10, seed + 200, 1.0)).map(|(a, d)| a + 1e-6 * d).collect();
            let (zp, gp) = forward(&net, &xp).unwrap();
            if gp.masks != g0.masks {
                continue; // crossed a gate boundary
            }
            for (a, b) in lin.logits(&xp).iter().zip(&zp) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn residual_open_gates_product() {
        // all biases large so every gate is open
        let mut net = ReluNet::random(Arch::Residual, &[3, 3, 3, 2], 8).unwrap();
        for l in 0..2 {
            net.layers[l].b = vec![100.0; 3];
        }
        let lin = linearize(&net, &[0.1, -0.2, 0.3]).unwrap();
        let i3 = Matrix::identity(3);
        let mut m = i3.clone();
        for l in 0..2 {
            let mut step = i3.clone();
            crate::densela::axpy(&mut step.data, 1.0, &net.layers[l].w.data);
            m = m.matmul(&step);
        }
        let expect = m.matmul(&net.layers[2].w);
        for (a, b) in lin.w_tilde.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_and_saturated_losses() {
        let lin = LinearizedNet::from_map(Matrix::zeros(2, 4), vec![0.0; 4]).unwrap();
        let (l, p) = loss_probs(&lin, &[0.0, 0.0], LossKind::SoftmaxCrossEntropy { y: 1 }).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let (l, _) = loss_from_logits(&[50.0, 0.0, 0.0], LossKind::SoftmaxCrossEntropy { y: 0 }).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn loss_matches_log_sum_exp() {
        let z = rand_vec(5, 3, 4.0);
        let (l, p) = loss_from_logits(&z, LossKind::SoftmaxCrossEntropy { y: 2 }).unwrap();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((l - (lse - z[2])).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_target() {
        // p = Y exactly requires an infinite margin; a sigmoid at σ(z) = y is
        // unreachable too, so build the degenerate case through a zero map.
        let lin = LinearizedNet::from_map(Matrix::zeros(3, 2), vec![0.0, 0.0]).unwrap();
        let g = input_gradient(&lin, &[1.0, 2.0, 3.0], LossKind::SoftmaxCrossEntropy { y: 0 }).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    fn fd_gradient(lin: &LinearizedNet, x: &[f64], loss: LossKind, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (loss_probs(lin, &a, loss).unwrap().0 - loss_probs(lin, &b, loss).unwrap().0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_fd_softmax_and_binary() {
        let net = ReluNet::random(Arch::Plain, &[10, 8, 4], 2).unwrap();
        let x = rand_vec(10, 7, 1.0);
        let lin = linearize(&net, &x).unwrap();
        let loss = LossKind::SoftmaxCrossEntropy { y: 1 };
        let g = input_gradient(&lin, &x, loss).unwrap();
        let fd = fd_gradient(&lin, &x, loss, 1e-5);
        assert!(norm2(&crate::densela::sub(&g, &fd)) <= 1e-4 * norm2(&g));

        let bnet = ReluNet::random(Arch::Plain, &[10, 8, 1], 3).unwrap();
        let blin = linearize(&bnet, &x).unwrap();
        let bl = LossKind::SigmoidBinaryCrossEntropy { y: 1 };
        let g = input_gradient(&blin, &x, bl).unwrap();
        let fd = fd_gradient(&blin, &x, bl, 1e-5);
        assert!(norm2(&crate::densela::sub(&g, &fd)) <= 1e-4 * norm2(&g));
        // direction of w̃
        let w = blin.w_tilde.col(0);
        let cos = dot(&g, &w) / (norm2(&g) * norm2(&w));
        assert!((cos.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_hessian_vanishes() {
        let w = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let lin = LinearizedNet::from_map(w, vec![80.0, 0.0, 0.0]).unwrap();
        let h = input_hessian(&lin, &[0.0; 3], LossKind::SoftmaxCrossEntropy { y: 0 }).unwrap();
        assert!(h.max_abs() <= 1e-8);
    }

    #[test]
    fn binary_hessian_is_rank_one() {
        let net = ReluNet::random(Arch::Plain, &[8, 6, 1], 4).unwrap();
        let x = rand_vec(8, 5, 1.0);
        let lin = linearize(&net, &x).unwrap();
        let h = input_hessian(&lin, &x, LossKind::SigmoidBinaryCrossEntropy { y: 0 }).unwrap();
        let e = jacobi_eigen(&h).unwrap();
        let z = lin.logits(&x)[0];
        let s = sigmoid(z);
        let w = lin.w_tilde.col(0);
        let expect = s * (1.0 - s) * dot(&w, &w);
        assert!((e.lambdas[0] - expect).abs() <= 1e-12 * expect);
        assert!(e.lambdas[1].abs().max(e.lambdas[7].abs()) <= 1e-8 * e.lambdas[0]);
    }

    #[test]
    fn hessian_matches_fd_of_gradient() {
        let net = ReluNet::random(Arch::Plain, &[7, 9, 3], 12).unwrap();
        let x = rand_vec(7, 13, 1.0);
        let lin = linearize(&net, &x).unwrap();
        let loss = LossKind::SoftmaxCrossEntropy { y: 2 };
        let h = input_hessian(&lin, &x, loss).unwrap();
        let step = 1e-4;
        let mut worst = 0.0f64;
        for j in 0..7 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += step;
            b[j] -= step;
            let ga = input_gradient(&lin, &a, loss).unwrap();
            let gb = input_gradient(&lin, &b, loss).unwrap();
            for i in 0..7 {
                worst = worst.max(((ga[i] - gb[i]) / (2.0 * step) - h.get(i, j)).abs());
            }
        }
        assert!(worst <= 1e-3 * h.max_abs());
    }

    #[test]
    fn orthogonalized_head() {
        let net = ReluNet::random(Arch::Plain, &[12, 10, 3], 21).unwrap();
        let x = rand_vec(12, 22, 1.0);
        let lin = linearize(&net, &x).unwrap();
        let o = orthogonalize_head(&net, &x, 2.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let g = dot(&o.w_tilde.col(i), &o.w_tilde.col(j));
                let want = if i == j { 2.5 } else { 0.0 };
                assert!((g - want).abs() <= 1e-9);
            }
        }
        let loss = LossKind::SoftmaxCrossEntropy { y: 0 };
        let (_, p0) = loss_probs(&lin, &x, loss).unwrap();
        let (_, p1) = loss_probs(&o, &x, loss).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-12);
        }
        // already orthogonal with norm √κ: unchanged
        let w = Matrix::from_fn(4, 2, |i, j| if i == j { 2.0 } else { 0.0 });
        let base = LinearizedNet::from_map(w.clone(), vec![0.0; 2]).unwrap();
        let same = orthogonalize_linear(&base, &[0.0; 4], 4.0).unwrap();
        assert_eq!(same.w_tilde, w);
        // dependent columns
        let dep = LinearizedNet::from_map(Matrix::from_fn(3, 2, |i, _| i as f64 + 1.0), vec![0.0; 2]).unwrap();
        assert_eq!(orthogonalize_linear(&dep, &[0.0; 3], 1.0).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn margin_ties_use_lowest_index() {
        assert_eq!(margin(&[1.0, 3.0, 3.0], 0), 2.0);
        assert_eq!(margin(&[0.0, 2.0], 1), -2.0);
        assert_eq!(margin(&[2.0], 0), 2.0);
    }

    fn fd_params(net: &ReluNet, x: &[f64], loss: LossKind) -> Vec<f64> {
        let p = net.params();
        let mut m = net.clone();
        (0..p.len())
            .map(|k| {
                let mut a = p.clone();
                let mut b = p.clone();
                a[k] += 1e-6;
                b[k] -= 1e-6;
                m.set_params(&a);
                let la = loss_from_logits(&forward(&m, x).unwrap().0, loss).unwrap().0;
                m.set_params(&b);
                let lb = loss_from_logits(&forward(&m, x).unwrap().0, loss).unwrap().0;
                (la - lb) / 2e-6
            })
            .collect()
    }

    #[test]
    fn backprop_matches_fd() {
        for (arch, dims) in
            [(Arch::Plain, vec![5, 7, 6, 3]), (Arch::Residual, vec![4, 4, 4, 3]), (Arch::Plain, vec![5, 6, 1])]
        {
            let net = ReluNet::random(arch, &dims, 31).unwrap();
            let x = rand_vec(dims[0], 32, 1.0);
            let loss = LossKind::for_net(&net, 1);
            let (_, g) = param_gradient(&net, &x, loss).unwrap();
            let fd = fd_params(&net, &x, loss);
            assert!(norm2(&crate::densela::sub(&g, &fd)) <= 1e-6 * norm2(&g).max(1e-12), "{arch:?}");
        }
    }

    #[test]
    fn sgm_unit_decay_equals_exact() {
        let net = ReluNet::random(Arch::Residual, &[5, 5, 5, 2], 40).unwrap();
        let x = rand_vec(5, 41, 1.0);
        let lin = linearize(&net, &x).unwrap();
        let m = effective_map(&net, &lin.gates, BackwardRule::Sgm { gamma: 1.0 }).unwrap();
        assert_eq!(m, lin.w_tilde);
        // gamma = 0: skip connections only
        let m0 = effective_map(&net, &lin.gates, BackwardRule::Sgm { gamma: 0.0 }).unwrap();
        assert_eq!(m0, net.layers[2].w);
        let plain = ReluNet::random(Arch::Plain, &[5, 5, 2], 1).unwrap();
        assert_eq!(
            effective_map(&plain, &lin.gates, BackwardRule::Sgm { gamma: 0.5 }).unwrap_err(),
            Error::NotResidual
        );
    }

    proptest! {
        #[test]
        fn hessian_is_psd(seed in any::<u64>(), c in 2usize..6, binary in any::<bool>()) {
            let dims = if binary { vec![6, 8, 1] } else { vec![6, 8, c] };
            let net = ReluNet::random(Arch::Plain, &dims, seed).unwrap();
            let x = rand_vec(6, seed ^ 1, 2.0);
            let lin = linearize(&net, &x).unwrap();
            let loss = LossKind::for_net(&net, 0);
            let e = jacobi_eigen(&input_hessian(&lin, &x, loss).unwrap()).unwrap();
            prop_assert!(e.lambdas.iter().all(|&l| l >= -1e-9));
        }

        #[test]
        fn softmax_probs_normalized(z in proptest::collection::vec(-30.0f64..30.0, 2..8)) {
            let (l, p) = loss_from_logits(&z, LossKind::SoftmaxCrossEntropy { y: 0 }).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((l + p[0].ln()).abs() <= 1e-9 * l.abs().max(1.0));
        }
    }
}
