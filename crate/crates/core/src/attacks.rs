//! Attack procedures.
//!
//! Iterative attacks run against an [`Objective`]: either the frozen-gate
//! loss of a linearized network ([`FrozenLoss`]) or an exact quadratic
//! ([`QuadraticLoss`]), on which the spectral closed forms are exact. All
//! attacks are untargeted ascent on the loss; sign/clip variants are opt-in
//! through [`AttackConfig::sign`] and [`AttackConfig::norm`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[allow(unused_imports)] // std builds resolve the inherent methods first
use num_traits::Float;

use crate::densela::{axpy, check_len, dot, norm2, norm_inf, EigenSystem, Matrix, SymMatrix};
use crate::gametheory::{Model, UnitPartition};
use crate::netcore::{
    self, effective_map, forward, input_gradient, input_hessian, linearize, logit_gradient, loss_probs, BackwardRule,
    LinearizedNet, LossKind, ReluNet,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
    Unconstrained,
}

/// How two attacks are made comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fairness {
    /// Same accumulated step size `β = α·m`.
    SameBeta,
    /// Perturbations rescaled to a common L2 norm.
    SameL2Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub alpha: f64,
    pub m: usize,
    #[serde(default = "unconstrained")]
    pub norm: Norm,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "same_beta")]
    pub fairness: Fairness,
    /// Step along `sign(g)` instead of `g`.
    #[serde(default)]
    pub sign: bool,
    #[serde(default)]
    pub seed: u64,
    /// Keep every intermediate perturbation.
    #[serde(default)]
    pub record: bool,
}

fn unconstrained() -> Norm {
    Norm::Unconstrained
}
fn same_beta() -> Fairness {
    Fairness::SameBeta
}

impl AttackConfig {
    pub fn new(alpha: f64, m: usize) -> Self {
        AttackConfig {
            alpha,
            m,
            norm: Norm::Unconstrained,
            epsilon: 0.0,
            fairness: Fairness::SameBeta,
            sign: false,
            seed: 0,
            record: false,
        }
    }

    /// `α = β / m`.
    pub fn from_beta(beta: f64, m: usize) -> Self {
        Self::new(beta / m.max(1) as f64, m)
    }

    pub fn beta(&self) -> f64 {
        self.alpha * self.m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::BadSpec("alpha must be finite".into()));
        }
        if self.m == 0 {
            return Err(Error::BadSpec("need at least one step".into()));
        }
        if self.norm != Norm::Unconstrained && !(self.epsilon > 0.0) {
            return Err(Error::BadSpec("constrained attacks need epsilon > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Single,
    Multi,
    Pgd,
    ClosedForm,
    Mi,
    MiNormalized,
    Vr,
    Pi,
    Rap,
    Il,
    Linbp,
    Sgm,
    Ir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: Method,
    pub delta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Vec<f64>>>,
    pub config: AttackConfig,
    pub fairness: Fairness,
    pub l2_norm: f64,
    pub linf_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interactions_sum: Option<f64>,
    /// Method-specific scalars (step normalizers, mean probabilities, …).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stats: BTreeMap<String, f64>,
}

impl AttackResult {
    fn new(method: Method, delta: Vec<f64>, trajectory: Option<Vec<Vec<f64>>>, config: &AttackConfig) -> Self {
        AttackResult {
            method,
            l2_norm: norm2(&delta),
            linf_norm: norm_inf(&delta),
            delta,
            trajectory,
            config: config.clone(),
            fairness: config.fairness,
            interactions_sum: None,
            stats: BTreeMap::new(),
        }
    }

    /// Fills `interactions_sum = δᵀHδ`.
    pub fn with_interactions(mut self, h: &SymMatrix) -> Result<Self> {
        check_len(h.n(), self.delta.len())?;
        self.interactions_sum = Some(h.quad(&self.delta));
        Ok(self)
    }

    /// Rescales to L2 norm `target` for same-norm comparisons.
    pub fn rescaled_to(mut self, target: f64) -> Result<Self> {
        if self.l2_norm == 0.0 {
            return Err(Error::ZeroBase);
        }
        let s = target / self.l2_norm;
        self.delta.iter_mut().for_each(|d| *d *= s);
        if let Some(t) = self.trajectory.as_mut() {
            t.iter_mut().for_each(|step| step.iter_mut().for_each(|d| *d *= s));
        }
        self.l2_norm = norm2(&self.delta);
        self.linf_norm = norm_inf(&self.delta);
        self.fairness = Fairness::SameL2Norm;
        self.interactions_sum = None;
        Ok(self)
    }

    fn stat(mut self, k: &str, v: f64) -> Self {
        self.stats.insert(k.into(), v);
        self
    }
}

/// A loss over perturbations `δ` around a fixed input.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, delta: &[f64]) -> Result<f64>;
    fn gradient(&self, delta: &[f64]) -> Result<Vec<f64>>;
}

/// `Loss(x + δ)` on a frozen-gate network.
#[derive(Debug, Clone)]
pub struct FrozenLoss<'a> {
    pub lin: &'a LinearizedNet,
    pub x: &'a [f64],
    pub loss: LossKind,
}

impl<'a> FrozenLoss<'a> {
    pub fn new(lin: &'a LinearizedNet, x: &'a [f64], loss: LossKind) -> Result<Self> {
        check_len(lin.input_dim(), x.len())?;
        loss_probs(lin, x, loss)?;
        Ok(FrozenLoss { lin, x, loss })
    }

    fn shifted(&self, delta: &[f64]) -> Vec<f64> {
        self.x.iter().zip(delta).map(|(a, b)| a + b).collect()
    }

    /// Input Hessian at the unperturbed input.
    pub fn hessian(&self) -> Result<SymMatrix> {
        input_hessian(self.lin, self.x, self.loss)
    }
}

impl Objective for FrozenLoss<'_> {
    fn dim(&self) -> usize {
        self.x.len()
    }
    fn value(&self, delta: &[f64]) -> Result<f64> {
        Ok(loss_probs(self.lin, &self.shifted(delta), self.loss)?.0)
    }
    fn gradient(&self, delta: &[f64]) -> Result<Vec<f64>> {
        input_gradient(self.lin, &self.shifted(delta), self.loss)
    }
}

/// `gᵀδ + ½ δᵀHδ`: the second-order model on which the closed forms are exact.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub g: Vec<f64>,
    pub h: SymMatrix,
}

impl QuadraticLoss {
    pub fn new(g: Vec<f64>, h: SymMatrix) -> Result<Self> {
        check_len(h.n(), g.len())?;
        Ok(QuadraticLoss { g, h })
    }
}

impl Objective for QuadraticLoss {
    fn dim(&self) -> usize {
        self.g.len()
    }
    fn value(&self, delta: &[f64]) -> Result<f64> {
        check_len(self.dim(), delta.len())?;
        Ok(dot(&self.g, delta) + 0.5 * self.h.quad(delta))
    }
    fn gradient(&self, delta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), delta.len())?;
        let mut out = self.h.matvec(delta);
        axpy(&mut out, 1.0, &self.g);
        Ok(out)
    }
}

/// Frozen-gate forward pass with a substituted backward map (LinBP, SGM).
#[derive(Debug, Clone)]
pub struct ModifiedBackward<'a> {
    pub lin: LinearizedNet,
    /// `n × c` map used in place of `W̃` when back-propagating.
    pub back: Matrix,
    pub x: &'a [f64],
    pub loss: LossKind,
}

impl<'a> ModifiedBackward<'a> {
    pub fn new(net: &ReluNet, x: &'a [f64], loss: LossKind, rule: BackwardRule) -> Result<Self> {
        let lin = linearize(net, x)?;
        let back = effective_map(net, &lin.gates, rule)?;
        loss_probs(&lin, x, loss)?;
        Ok(ModifiedBackward { lin, back, x, loss })
    }
}

impl Objective for ModifiedBackward<'_> {
    fn dim(&self) -> usize {
        self.x.len()
    }
    fn value(&self, delta: &[f64]) -> Result<f64> {
        let xs: Vec<f64> = self.x.iter().zip(delta).map(|(a, b)| a + b).collect();
        Ok(loss_probs(&self.lin, &xs, self.loss)?.0)
    }
    fn gradient(&self, delta: &[f64]) -> Result<Vec<f64>> {
        let xs: Vec<f64> = self.x.iter().zip(delta).map(|(a, b)| a + b).collect();
        let dz = logit_gradient(&self.lin.logits(&xs), self.loss)?;
        Ok(self.back.matvec(&dz))
    }
}

/// L∞ clamp, L2 radial rescale, or identity. `epsilon = 0` maps every
/// constrained perturbation to zero.
pub fn project_norm(delta: &[f64], norm: Norm, epsilon: f64) -> Vec<f64> {
    match norm {
        Norm::Unconstrained => delta.to_vec(),
        Norm::Linf => delta.iter().map(|d| d.clamp(-epsilon, epsilon)).collect(),
        Norm::L2 => {
            let n = norm2(delta);
            if n <= epsilon {
                delta.to_vec()
            } else {
                delta.iter().map(|d| d * (epsilon / n)).collect()
            }
        }
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(delta: &[f64], step: usize) -> Result<()> {
    if delta.iter().all(|d| d.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// `δ = η·g` at the clean input.
pub fn single_step<O: Objective + ?Sized>(obj: &O, eta: f64) -> Result<AttackResult> {
    let g = obj.gradient(&vec![0.0; obj.dim()])?;
    let cfg = AttackConfig::new(eta, 1);
    Ok(AttackResult::new(Method::Single, crate::densela::scaled(&g, eta), None, &cfg))
}

/// Shared ascent loop; `step_dir` may rewrite the raw gradient in place.
fn ascend<O: Objective + ?Sized>(
    obj: &O,
    cfg: &AttackConfig,
    start: Vec<f64>,
    steps: core::ops::Range<usize>,
    trajectory: &mut Option<Vec<Vec<f64>>>,
    mut step_dir: impl FnMut(usize, &[f64], &mut Vec<f64>) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut delta = start;
    for t in steps {
        let mut g = obj.gradient(&delta)?;
        step_dir(t, &delta, &mut g)?;
        if cfg.sign {
            g.iter_mut().for_each(|v| *v = signum0(*v));
        }
        axpy(&mut delta, cfg.alpha, &g);
        if cfg.norm != Norm::Unconstrained {
            delta = project_norm(&delta, cfg.norm, cfg.epsilon);
        }
        check_finite(&delta, t + 1)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(delta.clone());
        }
    }
    Ok(delta)
}

/// Iterative ascent `δ ← δ + α·g(x + δ)` for `m` steps.
pub fn multi_step<O: Objective + ?Sized>(obj: &O, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut tr = cfg.record.then(Vec::new);
    let delta = ascend(obj, cfg, vec![0.0; obj.dim()], 0..cfg.m, &mut tr, |_, _, _| Ok(()))?;
    Ok(AttackResult::new(Method::Multi, delta, tr, cfg))
}

/// Projected sign-gradient ascent: [`multi_step`] with `sign = true`.
pub fn pgd<O: Objective + ?Sized>(obj: &O, cfg: &AttackConfig) -> Result<AttackResult> {
    let cfg = AttackConfig { sign: true, ..cfg.clone() };
    let mut r = multi_step(obj, &cfg)?;
    r.method = Method::Pgd;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Steps {
    Finite(usize),
    Infinite,
}

/// `expm1(βλ)/λ`, continuous through `λ = 0`.
pub fn expm1_over(beta: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        beta
    } else {
        (beta * lambda).exp_m1() / lambda
    }
}

/// Per-eigenvalue coefficients of the plain iterative attack:
/// `((1 + αλ)^m − 1)/λ` for `m` steps, `(e^{βλ} − 1)/λ` in the infinitesimal
/// limit, and `αm` / `β` when `|λ| <= tol`.
pub fn closed_form_coefficients(lambdas: &[f64], tol: f64, alpha: f64, steps: Steps, beta: f64) -> Vec<f64> {
    lambdas
        .iter()
        .map(|&l| match steps {
            Steps::Infinite if l.abs() <= tol => beta,
            Steps::Infinite => (beta * l).exp_m1() / l,
            Steps::Finite(m) if l.abs() <= tol => alpha * m as f64,
            Steps::Finite(m) => {
                let x = alpha * l;
                if x > -1.0 {
                    (m as f64 * x.ln_1p()).exp_m1() / l
                } else {
                    ((1.0 + x).powf(m as f64) - 1.0) / l
                }
            }
        })
        .collect()
}

/// Spectral perturbation `Σ_i D_ii γ_i v_i`. Finite mode uses `cfg.alpha`
/// and the given step count, infinite mode `β = cfg.beta()`.
pub fn closed_form_perturbation(eig: &EigenSystem, cfg: &AttackConfig, steps: Steps) -> Result<AttackResult> {
    if eig.gammas.is_none() {
        return Err(Error::BadSpec("eigensystem needs projected gradient coordinates".into()));
    }
    let d = closed_form_coefficients(&eig.lambdas, eig.zero_threshold(), cfg.alpha, steps, cfg.beta());
    let delta = eig.combine(&d);
    let mut cfg = cfg.clone();
    if let Steps::Finite(m) = steps {
        cfg.m = m;
    }
    Ok(AttackResult::new(Method::ClosedForm, delta, None, &cfg))
}

/// `Σ_i λ_i (D_ii γ_i)²` — `δᵀHδ` for a spectral perturbation.
pub fn spectral_interaction(eig: &EigenSystem, d: &[f64]) -> f64 {
    let gammas = eig.gammas.as_deref().unwrap_or(&[]);
    eig.lambdas.iter().zip(d).zip(gammas).map(|((l, d), g)| l * (d * g) * (d * g)).sum()
}

/// Running-average momentum: `g_mi ← μ g_mi + (1−μ) g` with `μ = (t−1)/t`.
pub fn mi_attack<O: Objective + ?Sized>(obj: &O, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut tr = cfg.record.then(Vec::new);
    let mut g_mi = vec![0.0; obj.dim()];
    let delta = ascend(obj, cfg, vec![0.0; obj.dim()], 0..cfg.m, &mut tr, |t, _, g| {
        let mu = t as f64 / (t + 1) as f64;
        for (m, v) in g_mi.iter_mut().zip(g.iter()) {
            *m = mu * *m + (1.0 - mu) * v;
        }
        g.copy_from_slice(&g_mi);
        Ok(())
    })?;
    Ok(AttackResult::new(Method::Mi, delta, tr, cfg))
}

/// MI coefficients on an exact quadratic: the scalar momentum recursion run
/// per eigenvalue (`D` such that `δ_mi = Σ D_ii γ_i v_i`).
pub fn mi_coefficients(lambdas: &[f64], alpha: f64, m: usize) -> Vec<f64> {
    lambdas
        .iter()
        .map(|&l| {
            let (mut c, mut gm) = (0.0, 0.0);
            for t in 0..m {
                let mu = t as f64 / (t + 1) as f64;
                gm = mu * gm + (1.0 - mu) * (1.0 + l * c);
                c += alpha * gm;
            }
            c
        })
        .collect()
}

/// Momentum with `‖·‖₁`-normalized gradients and decay `mu`.
pub fn mi_attack_normalized<O: Objective + ?Sized>(obj: &O, cfg: &AttackConfig, mu: f64) -> Result<AttackResult> {
    cfg.validate()?;
    let mut tr = cfg.record.then(Vec::new);
    let mut g_mi = vec![0.0; obj.dim()];
    let delta = ascend(obj, cfg, vec![0.0; obj.dim()], 0..cfg.m, &mut tr, |_, _, g| {
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        let s = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
        for (m, v) in g_mi.iter_mut().zip(g.iter()) {
            *m = mu * *m + s * v;
        }
        g.copy_from_slice(&g_mi);
        Ok(())
    })?;
    Ok(AttackResult::new(Method::MiNormalized, delta, tr, cfg).stat("mu", mu))
}

/// `κ = trace(W̃ᵀW̃)/c`.
pub fn head_kappa(lin: &LinearizedNet) -> f64 {
    let w = &lin.w_tilde;
    w.data.iter().map(|v| v * v).sum::<f64>() / w.cols as f64
}

/// Normalized single step on the plain loss: `η / (2√κ (1 − p_y))`.
pub fn ce_single_step(lin: &LinearizedNet, x: &[f64], loss: LossKind, eta: f64) -> Result<AttackResult> {
    let (_, p) = loss_probs(lin, x, loss)?;
    let py = p[loss.label()];
    let kappa = head_kappa(lin);
    let eta_ce = eta / (2.0 * kappa.sqrt() * (1.0 - py));
    let g = input_gradient(lin, x, loss)?;
    let cfg = AttackConfig::new(eta_ce, 1);
    Ok(AttackResult::new(Method::Single, crate::densela::scaled(&g, eta_ce), None, &cfg)
        .stat("kappa", kappa)
        .stat("p_y", py)
        .stat("eta", eta))
}

/// Variance-reduced single step: the gradient of `E_ξ[Loss(x + ξ)]`,
/// `ξ ~ N(0, σ²I)`, estimated from `samples` antithetic pairs `±ξ` and
/// normalized by `η_vr = η / (2√κ (1 − q_y))` with `q` the mean noisy
/// probabilities.
pub fn vr_attack(
    lin: &LinearizedNet,
    x: &[f64],
    loss: LossKind,
    sigma: f64,
    samples: usize,
    seed: u64,
    eta: f64,
) -> Result<AttackResult> {
    if samples == 0 {
        return Err(Error::BadSpec("need at least one noise sample".into()));
    }
    check_len(lin.input_dim(), x.len())?;
    let n = x.len();
    let mut r = crate::seed::rng(seed);
    let c = loss_probs(lin, x, loss)?.1.len();
    let mut g = vec![0.0; n];
    let mut q = vec![0.0; c];
    let count = (2 * samples) as f64;
    for _ in 0..samples {
        let xi: Vec<f64> =
            (0..n).map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)).collect();
        for s in [1.0, -1.0] {
            let xs: Vec<f64> = x.iter().zip(&xi).map(|(a, b)| a + s * b).collect();
            axpy(&mut g, 1.0 / count, &input_gradient(lin, &xs, loss)?);
            axpy(&mut q, 1.0 / count, &loss_probs(lin, &xs, loss)?.1);
        }
    }
    let qy = q[loss.label()];
    let kappa = head_kappa(lin);
    let eta_vr = eta / (2.0 * kappa.sqrt() * (1.0 - qy));
    let mut cfg = AttackConfig::new(eta_vr, 1);
    cfg.seed = seed;
    Ok(AttackResult::new(Method::Vr, crate::densela::scaled(&g, eta_vr), None, &cfg)
        .stat("kappa", kappa)
        .stat("q_y", qy)
        .stat("sigma", sigma)
        .stat("eta", eta))
}

/// Mean probability when one logit is shifted by `±τ` with the others held
/// fixed, written in terms of the unshifted probability `p`.
pub fn p_bar_tau(p: f64, tau: f64) -> f64 {
    let w1 = tau.cosh() - 1.0;
    p + w1 * p * (1.0 - 2.0 * p) * (1.0 - p) / (2.0 * w1 * p * (1.0 - p) + 1.0)
}

/// Redistribution matrix of the patch-wise attack on an `h × w` grid.
///
/// Column `i` moves the fraction `τ_i` of pixel `i`'s update to its in-grid
/// neighbors, `τ_i/K` each; the share belonging to off-grid neighbors stays
/// on the pixel. Columns therefore sum to one, and `A_ii = 1 − τ_i` holds
/// exactly for interior pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiRedistribution {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub taus: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
    pub a: Matrix,
}

/// Upper clamp keeping `τ < 1`.
pub const TAU_MAX: f64 = 1.0 - 1e-9;

impl PiRedistribution {
    pub fn new(height: usize, width: usize, taus: Vec<f64>, k: usize) -> Result<Self> {
        check_len(height * width, taus.len())?;
        if k != 4 && k != 8 {
            return Err(Error::BadRedistribution("neighbor count must be 4 or 8"));
        }
        if taus.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::BadRedistribution("exceedance ratios must lie in [0, 1)"));
        }
        let n = height * width;
        let mut neighbors = vec![Vec::new(); n];
        let offsets: &[(isize, isize)] = if k == 4 {
            &[(-1, 0), (0, -1), (0, 1), (1, 0)]
        } else {
            &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
        };
        for r in 0..height {
            for c in 0..width {
                for &(dr, dc) in offsets {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
                        neighbors[r * width + c].push(nr as usize * width + nc as usize);
                    }
                }
            }
        }
        let mut a = Matrix::zeros(n, n);
        let kf = k as f64;
        for i in 0..n {
            let t = taus[i];
            let kept = (k - neighbors[i].len()) as f64;
            a.set(i, i, 1.0 - t + t * kept / kf);
            for &j in &neighbors[i] {
                a.set(j, i, t / kf);
            }
        }
        Ok(PiRedistribution { height, width, k, taus, neighbors, a })
    }

    /// `τ_a = max(|δ_a + α g_a| − ε, 0) / |α g_a|`, clamped to [`TAU_MAX`]
    /// (zero where the step is zero).
    pub fn exceedance(delta: &[f64], g: &[f64], alpha: f64, epsilon: f64) -> Result<Vec<f64>> {
        check_len(delta.len(), g.len())?;
        Ok(delta
            .iter()
            .zip(g)
            .map(|(d, gi)| {
                let step = (alpha * gi).abs();
                if step == 0.0 {
                    0.0
                } else {
                    (((d + alpha * gi).abs() - epsilon).max(0.0) / step).min(TAU_MAX)
                }
            })
            .collect())
    }

    /// Re-checks the column-sum, diagonal and off-diagonal structure.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.a.rows != n || self.a.cols != n || self.taus.len() != n || self.neighbors.len() != n {
            return Err(Error::BadRedistribution("shape mismatch"));
        }
        let kf = self.k as f64;
        for i in 0..n {
            let t = self.taus[i];
            if !(0.0..1.0).contains(&t) {
                return Err(Error::BadRedistribution("exceedance ratios must lie in [0, 1)"));
            }
            let col = self.a.col(i);
            if (col.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::BadRedistribution("column does not sum to one"));
            }
            let kept = (self.k - self.neighbors[i].len()) as f64;
            if (col[i] - (1.0 - t + t * kept / kf)).abs() > 1e-15 {
                return Err(Error::BadRedistribution("diagonal entry inconsistent with tau"));
            }
            for (j, v) in col.iter().enumerate() {
                if j != i && *v != 0.0 && (*v != t / kf || !self.neighbors[i].contains(&j)) {
                    return Err(Error::BadRedistribution("off-diagonal entry not in {0, tau/K}"));
                }
            }
        }
        Ok(())
    }
}

/// Two-stage patch-wise attack: `m1` plain steps, then `cfg.m − m1` steps
/// of `δ ← δ + α·A·g` with `A` held fixed.
pub fn pi_attack<O: Objective + ?Sized>(
    obj: &O,
    cfg: &AttackConfig,
    pi: &PiRedistribution,
    m1: usize,
) -> Result<AttackResult> {
    cfg.validate()?;
    pi.validate()?;
    check_len(pi.a.rows, obj.dim())?;
    if m1 > cfg.m {
        return Err(Error::BadSpec("stage split exceeds the step count".into()));
    }
    let mut tr = cfg.record.then(Vec::new);
    let delta = ascend(obj, cfg, vec![0.0; obj.dim()], 0..m1, &mut tr, |_, _, _| Ok(()))?;
    let delta = ascend(obj, cfg, delta, m1..cfg.m, &mut tr, |_, _, g| {
        *g = pi.a.matvec(g);
        Ok(())
    })?;
    Ok(AttackResult::new(Method::Pi, delta, tr, cfg).stat("m1", m1 as f64))
}

/// Continuous-time patch-wise perturbation for a rank-one Hessian
/// `λ v₁v₁ᵀ` with gradient `γ₁ v₁`: stage one runs for `β₁`, stage two for
/// `β₂` along `A v₁`, where the gradient grows at rate `λ·v₁ᵀAv₁`.
pub fn pi_rank1_closed_form(
    lambda: f64,
    v1: &[f64],
    gamma1: f64,
    beta1: f64,
    beta2: f64,
    a: &Matrix,
) -> Result<Vec<f64>> {
    check_len(a.cols, v1.len())?;
    let av = a.matvec(v1);
    let c = dot(v1, &av);
    let mut out = crate::densela::scaled(v1, gamma1 * expm1_over(beta1, lambda));
    let gamma1_late = gamma1 * (beta1 * lambda).exp();
    axpy(&mut out, gamma1_late * expm1_over(beta2, lambda * c), &av);
    Ok(out)
}

/// Inner loop of the robust-adversarial-perturbation attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RapConfig {
    /// Inner descent steps on the reverse perturbation `r`.
    pub m_r: usize,
    /// L2 budget on `r`; `None` leaves it unconstrained.
    #[serde(default)]
    pub epsilon_r: Option<f64>,
}

impl RapConfig {
    /// `β_r = α·m_r`.
    pub fn beta_r(&self, alpha: f64) -> f64 {
        alpha * self.m_r as f64
    }
}

/// Each outer step restarts `r = 0`, runs `m_r` descent steps
/// `r ← r − α·g(x + δ + r)` (L2-projected to `ε_r`), then ascends
/// `δ ← δ + α·g(x + δ + r)`.
pub fn rap_attack<O: Objective + ?Sized>(obj: &O, cfg: &AttackConfig, rap: &RapConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if let Some(e) = rap.epsilon_r {
        if !(e > 0.0) {
            return Err(Error::BadSpec("epsilon_r must be positive".into()));
        }
    }
    let n = obj.dim();
    let mut tr = cfg.record.then(Vec::new);
    let mut delta = vec![0.0; n];
    for t in 0..cfg.m {
        let mut r = vec![0.0; n];
        for _ in 0..rap.m_r {
            let shifted: Vec<f64> = delta.iter().zip(&r).map(|(a, b)| a + b).collect();
            axpy(&mut r, -cfg.alpha, &obj.gradient(&shifted)?);
            if let Some(e) = rap.epsilon_r {
                r = project_norm(&r, Norm::L2, e);
            }
        }
        let shifted: Vec<f64> = delta.iter().zip(&r).map(|(a, b)| a + b).collect();
        let mut g = obj.gradient(&shifted)?;
        if cfg.sign {
            g.iter_mut().for_each(|v| *v = signum0(*v));
        }
        axpy(&mut delta, cfg.alpha, &g);
        if cfg.norm != Norm::Unconstrained {
            delta = project_norm(&delta, cfg.norm, cfg.epsilon);
        }
        check_finite(&delta, t + 1)?;
        if let Some(tr) = tr.as_mut() {
            tr.push(delta.clone());
        }
    }
    Ok(AttackResult::new(Method::Rap, delta, tr, cfg).stat("m_r", rap.m_r as f64))
}

/// `D^(rap) = (exp(βλ e^{−β_r λ}) − 1)/λ`, `β` when `|λ| <= tol`.
pub fn rap_coefficients(lambdas: &[f64], tol: f64, beta: f64, beta_r: f64) -> Vec<f64> {
    lambdas.iter().map(|&l| if l.abs() <= tol { beta } else { (beta * l * (-beta_r * l).exp()).exp_m1() / l }).collect()
}

/// Intermediate-level attack: a weak base attack of strength `β₂` rescaled
/// to `target_norm` (the norm of the full-strength perturbation).
pub fn il_attack<O: Objective + ?Sized>(obj: &O, base: &AttackConfig, target_norm: f64) -> Result<AttackResult> {
    if !(target_norm > 0.0) {
        return Err(Error::BadSpec("target norm must be positive".into()));
    }
    let b = multi_step(obj, base)?;
    if b.l2_norm == 0.0 {
        return Err(Error::ZeroBase);
    }
    let eta = target_norm / b.l2_norm;
    let delta = crate::densela::scaled(&b.delta, eta);
    let tr = b.trajectory.map(|t| t.iter().map(|d| crate::densela::scaled(d, eta)).collect());
    let mut r = AttackResult::new(Method::Il, delta, tr, base).stat("eta", eta);
    r.fairness = Fairness::SameL2Norm;
    Ok(r)
}

/// Spectral IL coefficients: `η·D^(∞)(β₂)` with `η` matching the norm of
/// the `β₁` perturbation. Errors with `ZeroBase` if the base vanishes.
pub fn il_coefficients(eig: &EigenSystem, beta1: f64, beta2: f64) -> Result<Vec<f64>> {
    let tol = eig.zero_threshold();
    let gammas = eig.gammas.as_deref().ok_or(Error::BadSpec("missing gradient coordinates".into()))?;
    let full = closed_form_coefficients(&eig.lambdas, tol, 0.0, Steps::Infinite, beta1);
    let base = closed_form_coefficients(&eig.lambdas, tol, 0.0, Steps::Infinite, beta2);
    let nrm = |d: &[f64]| d.iter().zip(gammas).map(|(d, g)| (d * g) * (d * g)).sum::<f64>().sqrt();
    let nb = nrm(&base);
    if nb == 0.0 {
        return Err(Error::ZeroBase);
    }
    let eta = nrm(&full) / nb;
    Ok(base.iter().map(|d| eta * d).collect())
}

/// Linear back-propagation from ReLU layer `from` (0-based) onward; the
/// forward pass keeps the gates of the clean input.
pub fn linbp_attack(net: &ReluNet, x: &[f64], loss: LossKind, cfg: &AttackConfig, from: usize) -> Result<AttackResult> {
    let obj = ModifiedBackward::new(net, x, loss, BackwardRule::LinBp { from })?;
    let mut r = multi_step(&obj, cfg)?;
    r.method = Method::Linbp;
    Ok(r.stat("from", from as f64))
}

/// Skip-gradient attack: residual branches scaled by `gamma` on the way back.
pub fn sgm_attack(net: &ReluNet, x: &[f64], loss: LossKind, cfg: &AttackConfig, gamma: f64) -> Result<AttackResult> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::BadSpec("gamma must lie in [0, 1]".into()));
    }
    let obj = ModifiedBackward::new(net, x, loss, BackwardRule::Sgm { gamma })?;
    let mut r = multi_step(&obj, cfg)?;
    r.method = Method::Sgm;
    Ok(r.stat("gamma", gamma))
}

/// Divergence of the normalized gradient field, `gᵀ(tr(H) I − H) g / ‖g‖³`.
pub fn ia_objective(lin: &LinearizedNet, x: &[f64], loss: LossKind) -> Result<f64> {
    let g = input_gradient(lin, x, loss)?;
    let gn = norm2(&g);
    if gn == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let h = input_hessian(lin, x, loss)?;
    Ok((h.trace() * gn * gn - h.quad(&g)) / (gn * gn * gn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaReport {
    pub objective_before: f64,
    pub objective_after: f64,
    pub accepted_steps: usize,
    /// Largest `|p_y − p_y⁰|` over the finetuning samples.
    pub max_py_shift: f64,
}

/// Allowed drift of the true-class probability during IA finetuning.
pub const IA_PY_BAND: f64 = 0.02;
const IA_PENALTY: f64 = 100.0;
const IA_BATCH: usize = 32;

fn ia_score(net: &ReluNet, xs: &[&Vec<f64>], ys: &[usize], p0: &[f64]) -> Result<(f64, f64, f64)> {
    let (mut obj, mut pen, mut worst) = (0.0, 0.0, 0.0f64);
    for ((x, &y), p0) in xs.iter().zip(ys).zip(p0) {
        let lin = linearize(net, x)?;
        let loss = LossKind::for_net(net, y);
        obj += match ia_objective(&lin, x, loss) {
            Ok(v) => v,
            Err(Error::ZeroGradient) => 0.0,
            Err(e) => return Err(e),
        };
        let py = loss_probs(&lin, x, loss)?.1[y];
        pen += (py - p0) * (py - p0);
        worst = worst.max((py - p0).abs());
    }
    let k = xs.len() as f64;
    Ok((obj / k, IA_PENALTY * pen / k, worst))
}

/// Finite-difference ascent on the mean IA objective with a quadratic
/// penalty on true-class probability drift; steps that would move any
/// `p_y` by more than [`IA_PY_BAND`] or fail to raise the penalized
/// objective are halved (up to 20 times) and otherwise skipped.
pub fn ia_finetune(
    net: &ReluNet,
    xs: &[Vec<f64>],
    ys: &[usize],
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<(ReluNet, IaReport)> {
    if xs.is_empty() {
        return Err(Error::Empty);
    }
    check_len(xs.len(), ys.len())?;
    let mut r = crate::seed::rng(seed);
    let idx: Vec<usize> = if xs.len() > IA_BATCH {
        rand::seq::index::sample(&mut r, xs.len(), IA_BATCH).into_vec()
    } else {
        (0..xs.len()).collect()
    };
    let bx: Vec<&Vec<f64>> = idx.iter().map(|&i| &xs[i]).collect();
    let by: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
    let p0: Vec<f64> = bx
        .iter()
        .zip(&by)
        .map(|(x, &y)| Ok(netcore::loss_from_logits(&forward(net, x)?.0, LossKind::for_net(net, y))?.1[y]))
        .collect::<Result<_>>()?;
    let mut cur = net.clone();
    let (before, _, _) = ia_score(&cur, &bx, &by, &p0)?;
    let mut worst_shift = 0.0;
    let mut accepted = 0;
    let mut params = cur.params();
    for _ in 0..steps {
        let score = |p: &[f64]| -> Result<(f64, f64)> {
            let mut trial = cur.clone();
            trial.set_params(p);
            let (o, pen, w) = ia_score(&trial, &bx, &by, &p0)?;
            Ok((o - pen, w))
        };
        let (base, _) = score(&params)?;
        let mut grad = vec![0.0; params.len()];
        for k in 0..params.len() {
            let h = 1e-4 * params[k].abs().max(1.0);
            let mut p = params.clone();
            p[k] += h;
            let up = score(&p)?.0;
            p[k] -= 2.0 * h;
            let down = score(&p)?.0;
            grad[k] = (up - down) / (2.0 * h);
        }
        let mut step = lr;
        for _ in 0..20 {
            let mut p = params.clone();
            axpy(&mut p, step, &grad);
            let (s, w) = score(&p)?;
            if s > base && w <= IA_PY_BAND {
                params = p;
                cur.set_params(&params);
                accepted += 1;
                worst_shift = w;
                break;
            }
            step *= 0.5;
        }
    }
    let (after, _, _) = ia_score(&cur, &bx, &by, &p0)?;
    Ok((
        cur,
        IaReport {
            objective_before: before,
            objective_after: after,
            accepted_steps: accepted,
            max_py_shift: worst_shift,
        },
    ))
}

/// Min-max training: each sample is attacked with [`multi_step`] on the
/// frozen-gate loss of the current weights (projected per `cfg.norm`), then
/// the weights take an SGD step at `x + δ`. `cfg.epsilon = 0` on a
/// constrained norm skips the attack, giving ordinary training.
pub fn adversarial_train(
    net: &ReluNet,
    xs: &[Vec<f64>],
    ys: &[usize],
    cfg: &AttackConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<ReluNet> {
    let mut out = net.clone();
    let clean = cfg.norm != Norm::Unconstrained && cfg.epsilon == 0.0;
    if !clean {
        cfg.validate()?;
    }
    netcore::train_sgd(&mut out, xs, ys, lr, epochs, seed, &mut |n, x, loss| {
        if clean {
            return Ok(vec![0.0; x.len()]);
        }
        let lin = linearize(n, x)?;
        Ok(multi_step(&FrozenLoss::new(&lin, x, loss)?, cfg)?.delta)
    })?;
    Ok(out)
}

/// Interaction-reduced attack settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrConfig {
    pub lambda: f64,
    /// Grid side: the image is split into `grid × grid` units.
    pub grid: usize,
    /// Unit pairs drawn per step for the penalty gradient.
    pub pair_samples: usize,
    /// Contexts per pair when the final interactions are estimated.
    pub context_samples: usize,
}

/// Gradient of the sampled penalty `mean_{(a,b)} δ_aᵀ H_ab δ_b` over the
/// given ordered unit pairs.
pub fn ir_penalty_gradient(
    delta: &[f64],
    h: &SymMatrix,
    partition: &UnitPartition,
    pairs: &[(usize, usize)],
) -> Vec<f64> {
    let mut out = vec![0.0; delta.len()];
    if pairs.is_empty() {
        return out;
    }
    let w = 1.0 / pairs.len() as f64;
    for &(a, b) in pairs {
        let (ua, ub) = (&partition.units[a], &partition.units[b]);
        for &i in ua {
            let s: f64 = ub.iter().map(|&j| h.get(i, j) * delta[j]).sum();
            out[i] += w * s;
        }
        for &j in ub {
            let s: f64 = ua.iter().map(|&i| h.get(i, j) * delta[i]).sum();
            out[j] += w * s;
        }
    }
    out
}

/// `max_δ Loss(x + δ) − λ·Σ_{a≠b} δ_aᵀH_abδ_b` with `H` the input Hessian
/// at `x`; the total is estimated each step as `n(n−1)` times the mean over
/// freshly sampled ordered unit pairs. `λ = 0` runs exactly
/// the [`multi_step`] iteration (no sampling happens at all).
pub fn ir_attack(
    obj: &FrozenLoss<'_>,
    cfg: &AttackConfig,
    ir: &IrConfig,
    height: usize,
    width: usize,
) -> Result<AttackResult> {
    if !(ir.lambda >= 0.0) {
        return Err(Error::BadSpec("lambda must be non-negative".into()));
    }
    check_len(obj.dim(), height * width)?;
    let partition = crate::gametheory::make_grid_partition(height, width, ir.grid)?;
    if ir.lambda == 0.0 {
        let mut r = multi_step(obj, cfg)?;
        r.method = Method::Ir;
        return Ok(r.stat("lambda", 0.0));
    }
    cfg.validate()?;
    let n_units = partition.n_units();
    if n_units < 2 || ir.pair_samples == 0 {
        return Err(Error::BadSpec("penalty needs two units and at least one pair sample".into()));
    }
    let h = obj.hessian()?;
    let mut tr = cfg.record.then(Vec::new);
    let delta = ascend(obj, cfg, vec![0.0; obj.dim()], 0..cfg.m, &mut tr, |t, delta, g| {
        let mut r = crate::seed::rng(crate::seed::derive(cfg.seed, t as u64));
        let pairs: Vec<(usize, usize)> = (0..ir.pair_samples)
            .map(|_| {
                let a = rand::Rng::random_range(&mut r, 0..n_units);
                let mut b = rand::Rng::random_range(&mut r, 0..n_units - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect();
        let total = (n_units * (n_units - 1)) as f64;
        axpy(g, -ir.lambda * total, &ir_penalty_gradient(delta, &h, &partition, &pairs));
        Ok(())
    })?;
    Ok(AttackResult::new(Method::Ir, delta, tr, cfg).stat("lambda", ir.lambda))
}

/// Off-diagonal grid-level interaction `Σ_{a≠b} δ_aᵀ H_ab δ_b = δᵀHδ − Σ_a δ_aᵀH_aaδ_a`.
pub fn grid_interaction_sum(delta: &[f64], h: &SymMatrix, partition: &UnitPartition) -> Result<f64> {
    check_len(h.n(), delta.len())?;
    let own: f64 = partition.units.iter().map(|u| crate::gametheory::self_influence_block(delta, h, u)).sum();
    Ok(h.quad(delta) - own)
}

/// Change of the target's runner-up margin caused by `delta`.
pub fn transfer_utility(target: Model<'_>, x: &[f64], delta: &[f64], y: usize) -> Result<f64> {
    check_len(x.len(), delta.len())?;
    let logits = |v: &[f64]| -> Result<Vec<f64>> {
        match target {
            Model::Net(n) => Ok(forward(n, v)?.0),
            Model::Linear(l) => {
                check_len(l.input_dim(), v.len())?;
                Ok(l.logits(v))
            }
        }
    };
    let xs: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
    Ok(netcore::margin(&logits(&xs)?, y) - netcore::margin(&logits(x)?, y))
}
