//! Coalition games over perturbation units.
//!
//! Players are perturbation units (pixels or pixel blocks); a coalition `S`
//! keeps the perturbation on its units and zeroes the rest. On top of a
//! [`Game`] this module computes Shapley values, pairwise (Shapley
//! interaction index) and multi-order interactions, the cheap
//! sum-of-interactions identity, and sampled interaction reports.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // std builds resolve the inherent methods first
use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::densela::{check_len, SymMatrix};
use crate::netcore::{self, forward, input_hessian, linearize, LinearizedNet, LossKind, ReluNet};
use crate::{Error, Result};

/// Largest unit count accepted by exhaustive enumeration.
pub const MAX_EXACT_UNITS: usize = 20;
/// Largest unit count for the exhaustive decomposition check.
pub const MAX_DECOMPOSITION_UNITS: usize = 10;
/// Contexts per order are enumerated when `C(n−2, s)` is at most this.
pub const EXACT_CONTEXT_LIMIT: u64 = 10_000;

/// Disjoint cover of the pixel indices `0..n_pixels` by units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitPartition {
    pub n_pixels: usize,
    pub units: Vec<Vec<usize>>,
}

impl UnitPartition {
    pub fn new(n_pixels: usize, units: Vec<Vec<usize>>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::BadSpec("partition needs at least one unit".into()));
        }
        let mut seen = vec![false; n_pixels];
        for u in &units {
            for &p in u {
                if p >= n_pixels || seen[p] {
                    return Err(Error::BadSpec("units must be disjoint pixel sets".into()));
                }
                seen[p] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::BadSpec("units must cover every pixel".into()));
        }
        Ok(UnitPartition { n_pixels, units })
    }

    /// One unit per pixel.
    pub fn singletons(n: usize) -> Self {
        UnitPartition { n_pixels: n, units: (0..n).map(|i| vec![i]).collect() }
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// `δ^(S)`: keeps `delta` on the member units, zero elsewhere.
    pub fn mask(&self, delta: &[f64], members: &[bool]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_pixels];
        for (u, on) in self.units.iter().zip(members) {
            if *on {
                for &p in u {
                    out[p] = delta[p];
                }
            }
        }
        out
    }

    /// Per-pixel unit index.
    pub fn owner(&self) -> Vec<usize> {
        let mut o = vec![0; self.n_pixels];
        for (k, u) in self.units.iter().enumerate() {
            for &p in u {
                o[p] = k;
            }
        }
        o
    }
}

/// `k × k` grid over a row-major `height × width` image. When `k` does not
/// divide a side, the last row/column of cells absorbs the remainder.
pub fn make_grid_partition(height: usize, width: usize, k: usize) -> Result<UnitPartition> {
    if k == 0 || k > height.min(width) {
        return Err(Error::BadGrid);
    }
    let (ch, cw) = (height / k, width / k);
    let mut units = vec![Vec::new(); k * k];
    for r in 0..height {
        let gr = (r / ch).min(k - 1);
        for c in 0..width {
            let gc = (c / cw).min(k - 1);
            units[gr * k + gc].push(r * width + c);
        }
    }
    UnitPartition::new(height * width, units)
}

/// A cooperative game on `n_units()` players.
pub trait Game {
    fn n_units(&self) -> usize;
    fn value(&self, members: &[bool]) -> f64;
    /// `I_aa`, the influence of a unit on itself, when the game carries the
    /// second-order information to define it.
    fn self_interaction(&self, _a: usize) -> Option<f64> {
        None
    }
}

/// Explicit value table indexed by coalition bitmask (bit `a` = unit `a`).
#[derive(Debug, Clone, PartialEq)]
pub struct TableGame {
    n: usize,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_EXACT_UNITS {
            return Err(Error::TooLarge { n, max: MAX_EXACT_UNITS });
        }
        check_len(1 << n, values.len())?;
        Ok(TableGame { n, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn bits(members: &[bool]) -> usize {
    members.iter().enumerate().fold(0, |m, (i, &on)| if on { m | (1 << i) } else { m })
}

impl Game for TableGame {
    fn n_units(&self) -> usize {
        self.n
    }
    fn value(&self, members: &[bool]) -> f64 {
        self.values[bits(members)]
    }
}

/// Second-order surrogate `v(S) = gᵀδ^(S) + ½ δ^(S)ᵀ H δ^(S)`.
#[derive(Debug, Clone)]
pub struct QuadraticGame {
    pub g: Vec<f64>,
    pub h: SymMatrix,
    pub delta: Vec<f64>,
    pub partition: UnitPartition,
}

impl QuadraticGame {
    pub fn new(g: Vec<f64>, h: SymMatrix, delta: Vec<f64>, partition: UnitPartition) -> Result<Self> {
        check_len(h.n(), g.len())?;
        check_len(h.n(), delta.len())?;
        check_len(h.n(), partition.n_pixels)?;
        Ok(QuadraticGame { g, h, delta, partition })
    }

    /// `δ_aᵀ H_ab δ_b` on unit blocks.
    pub fn block(&self, a: usize, b: usize) -> f64 {
        let ua = &self.partition.units[a];
        let ub = &self.partition.units[b];
        let mut s = 0.0;
        for &i in ua {
            for &j in ub {
                s += self.delta[i] * self.h.get(i, j) * self.delta[j];
            }
        }
        s
    }
}

impl Game for QuadraticGame {
    fn n_units(&self) -> usize {
        self.partition.n_units()
    }
    fn value(&self, members: &[bool]) -> f64 {
        let d = self.partition.mask(&self.delta, members);
        crate::densela::dot(&self.g, &d) + 0.5 * self.h.quad(&d)
    }
    fn self_interaction(&self, a: usize) -> Option<f64> {
        Some(self.block(a, a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueKind {
    /// `v(S) = Loss(x + δ^(S)) − Loss(x)`
    LossGap,
    /// `v(S) = max_{y'≠y} h_{y'}(x + δ^(S)) − h_y(x + δ^(S))` on raw logits
    Margin,
}

/// What a [`CoalitionGame`] evaluates.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    /// Exact nonlinear forward pass.
    Net(&'a ReluNet),
    /// Frozen-gate affine model.
    Linear(&'a LinearizedNet),
}

impl Model<'_> {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Model::Net(net) => Ok(forward(net, x)?.0),
            Model::Linear(lin) => {
                check_len(lin.input_dim(), x.len())?;
                Ok(lin.logits(x))
            }
        }
    }

    fn linearized(&self, x: &[f64]) -> Result<LinearizedNet> {
        match self {
            Model::Net(net) => linearize(net, x),
            Model::Linear(lin) => Ok((*lin).clone()),
        }
    }
}

/// The attacking-utility game of a perturbation `delta` at input `x`.
pub struct CoalitionGame<'a> {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub partition: UnitPartition,
    pub kind: ValueKind,
    pub loss: LossKind,
    model: Model<'a>,
    base_loss: f64,
    /// Input Hessian of the value at `x` (frozen gates); zero for margins,
    /// which are affine under frozen gates.
    hessian: SymMatrix,
}

impl<'a> CoalitionGame<'a> {
    pub fn new(
        model: Model<'a>,
        x: Vec<f64>,
        delta: Vec<f64>,
        partition: UnitPartition,
        kind: ValueKind,
        loss: LossKind,
    ) -> Result<Self> {
        check_len(x.len(), delta.len())?;
        check_len(x.len(), partition.n_pixels)?;
        let base_loss = netcore::loss_from_logits(&model.logits(&x)?, loss)?.0;
        let hessian = match kind {
            ValueKind::LossGap => input_hessian(&model.linearized(&x)?, &x, loss)?,
            ValueKind::Margin => SymMatrix::zeros(x.len()),
        };
        Ok(CoalitionGame { x, delta, partition, kind, loss, model, base_loss, hessian })
    }

    /// `v(S)` for an explicit unit list.
    pub fn coalition_value(&self, units: &[usize]) -> Result<f64> {
        let mut members = vec![false; self.n_units()];
        for &u in units {
            *members.get_mut(u).ok_or(Error::InvalidUnit(u))? = true;
        }
        self.eval(&members)
    }

    fn eval(&self, members: &[bool]) -> Result<f64> {
        let d = self.partition.mask(&self.delta, members);
        let xs: Vec<f64> = self.x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let z = self.model.logits(&xs)?;
        Ok(match self.kind {
            ValueKind::LossGap => netcore::loss_from_logits(&z, self.loss)?.0 - self.base_loss,
            ValueKind::Margin => netcore::margin(&z, self.loss.label()),
        })
    }
}

impl Game for CoalitionGame<'_> {
    fn n_units(&self) -> usize {
        self.partition.n_units()
    }
    fn value(&self, members: &[bool]) -> f64 {
        self.eval(members).expect("dimensions validated at construction")
    }
    fn self_interaction(&self, a: usize) -> Option<f64> {
        Some(self_influence_block(&self.delta, &self.hessian, &self.partition.units[a]))
    }
}

/// `δ_aᵀ H_aa δ_a` on one unit's pixel block.
pub fn self_influence_block(delta: &[f64], h: &SymMatrix, unit: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in unit {
        for &j in unit {
            s += delta[i] * h.get(i, j) * delta[j];
        }
    }
    s
}

/// `I_aa = δ_aᵀ H_aa δ_a` for unit `a` of `partition`.
pub fn self_influence(delta: &[f64], h: &SymMatrix, partition: &UnitPartition, a: usize) -> Result<f64> {
    check_len(h.n(), delta.len())?;
    check_len(h.n(), partition.n_pixels)?;
    let unit = partition.units.get(a).ok_or(Error::InvalidUnit(a))?;
    Ok(self_influence_block(delta, h, unit))
}

/// `δᵀ H δ` — the sum of all pairwise interactions (self terms included)
/// under the second-order model.
pub fn quadratic_interaction_sum(delta: &[f64], h: &SymMatrix) -> Result<f64> {
    check_len(h.n(), delta.len())?;
    Ok(h.quad(delta))
}

fn members_of(mask: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask & (1 << i) != 0).collect()
}

/// `v(S)` for every bitmask `S`.
pub fn value_table<G: Game + ?Sized>(game: &G) -> Result<Vec<f64>> {
    let n = game.n_units();
    if n > MAX_EXACT_UNITS {
        return Err(Error::TooLarge { n, max: MAX_EXACT_UNITS });
    }
    Ok((0..1usize << n).map(|m| game.value(&members_of(m, n))).collect())
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    // exact for the sizes used here; round away accumulated division error
    c.round()
}

/// `φ(a)` from a value table over `n` players.
fn shapley_from_table(n: usize, table: &[f64], a: usize) -> f64 {
    // |S|!(n−|S|−1)!/n! = 1 / (n · C(n−1, |S|))
    let w: Vec<f64> = (0..n).map(|s| 1.0 / (n as f64 * binom(n - 1, s))).collect();
    let bit = 1usize << a;
    let mut phi = 0.0;
    for m in 0..(1usize << n) {
        if m & bit != 0 {
            continue;
        }
        phi += w[m.count_ones() as usize] * (table[m | bit] - table[m]);
    }
    phi
}

fn check_unit(n: usize, a: usize) -> Result<()> {
    if a < n {
        Ok(())
    } else {
        Err(Error::InvalidUnit(a))
    }
}

/// Exact Shapley value by enumerating all `2^n` coalitions.
pub fn shapley_exact<G: Game + ?Sized>(game: &G, a: usize) -> Result<f64> {
    let n = game.n_units();
    check_unit(n, a)?;
    let t = value_table(game)?;
    Ok(shapley_from_table(n, &t, a))
}

/// All Shapley values from a single value table.
pub fn shapley_all<G: Game + ?Sized>(game: &G) -> Result<Vec<f64>> {
    let n = game.n_units();
    let t = value_table(game)?;
    Ok((0..n).map(|a| shapley_from_table(n, &t, a)).collect())
}

/// Context-difference form: `I_ab = Σ_{S⊆Ω∖{a,b}} |S|!(n−|S|−2)!/(n−1)! · Δv(a,b|S)`.
fn pairwise_from_table(n: usize, table: &[f64], a: usize, b: usize) -> f64 {
    let w: Vec<f64> = (0..n - 1).map(|s| 1.0 / ((n - 1) as f64 * binom(n - 2, s))).collect();
    let (ba, bb) = (1usize << a, 1usize << b);
    let mut acc = 0.0;
    for m in 0..(1usize << n) {
        if m & (ba | bb) != 0 {
            continue;
        }
        let dv = table[m | ba | bb] - table[m | ba] - table[m | bb] + table[m];
        acc += w[m.count_ones() as usize] * dv;
    }
    acc
}

fn check_pair(n: usize, a: usize, b: usize) -> Result<()> {
    check_unit(n, a)?;
    check_unit(n, b)?;
    if a == b {
        return Err(Error::SameUnit);
    }
    Ok(())
}

/// Exact pairwise interaction (Shapley interaction index).
pub fn pairwise_interaction_exact<G: Game + ?Sized>(game: &G, a: usize, b: usize) -> Result<f64> {
    let n = game.n_units();
    check_pair(n, a, b)?;
    let t = value_table(game)?;
    Ok(pairwise_from_table(n, &t, a, b))
}

/// Singleton-coalition form: `φ(S_ab | Ω') − φ(a | Ω∖{b}) − φ(b | Ω∖{a})`,
/// where `Ω'` treats `{a, b}` as one merged player. Each term is a genuine
/// Shapley value of a reduced `(n−1)`-player game.
pub fn pairwise_interaction_singleton<G: Game + ?Sized>(game: &G, a: usize, b: usize) -> Result<f64> {
    let n = game.n_units();
    check_pair(n, a, b)?;
    let t = value_table(game)?;
    let others: Vec<usize> = (0..n).filter(|&k| k != a && k != b).collect();
    // the reduced games put the extra player at index `top`
    let top = others.len();
    let reduced = |extra: usize| -> Vec<f64> {
        (0..1usize << (top + 1))
            .map(|m| {
                let mut full = if m & (1 << top) != 0 { extra } else { 0 };
                for (i, &o) in others.iter().enumerate() {
                    if m & (1 << i) != 0 {
                        full |= 1 << o;
                    }
                }
                t[full]
            })
            .collect()
    };
    let merged = reduced((1 << a) | (1 << b));
    let only_a = reduced(1 << a);
    let only_b = reduced(1 << b);
    let m = top + 1;
    Ok(shapley_from_table(m, &merged, top) - shapley_from_table(m, &only_a, top) - shapley_from_table(m, &only_b, top))
}

/// Result of the `2n + 2`-evaluation sum identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastSum {
    /// `Σ_{a≠b} I_ab = Σ_a [v(Ω) − v(Ω∖{a}) − v({a}) + v(∅)]`
    pub off_diagonal: f64,
    /// `Σ_a I_aa` when the game defines self terms.
    pub self_terms: Option<f64>,
    /// `off_diagonal + self_terms` (self terms counted as zero if absent).
    pub total: f64,
}

/// Sum of pairwise interactions from `2n + 2` value evaluations. The
/// identity holds for every game; the `a = b` terms are added separately
/// from [`Game::self_interaction`].
pub fn sum_interactions_fast<G: Game + ?Sized>(game: &G) -> FastSum {
    let n = game.n_units();
    let mut m = vec![true; n];
    let full = game.value(&m);
    m.iter_mut().for_each(|x| *x = false);
    let empty = game.value(&m);
    let mut off = 0.0;
    for a in 0..n {
        m.iter_mut().for_each(|x| *x = true);
        m[a] = false;
        let without = game.value(&m);
        m.iter_mut().for_each(|x| *x = false);
        m[a] = true;
        let alone = game.value(&m);
        off += full - without - alone + empty;
    }
    let self_terms = (0..n).map(|a| game.self_interaction(a)).sum::<Option<f64>>();
    FastSum { off_diagonal: off, self_terms, total: off + self_terms.unwrap_or(0.0) }
}

/// How an interaction estimate was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Estimator {
    Exact,
    Sampled { pair_samples: Option<usize>, context_samples: Option<usize>, seed: u64 },
}

/// Multi-order interaction estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    pub order: usize,
    pub value: f64,
    pub contexts: u64,
    pub estimator: Estimator,
}

/// Advances `idx` to the next `k`-combination of `0..n` in lexicographic
/// order; returns false after the last one.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in (i + 1)..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn delta_v<G: Game + ?Sized>(game: &G, members: &mut [bool], a: usize, b: usize) -> f64 {
    members[a] = false;
    members[b] = false;
    let v0 = game.value(members);
    members[a] = true;
    let va = game.value(members);
    members[b] = true;
    let vab = game.value(members);
    members[a] = false;
    let vb = game.value(members);
    members[b] = false;
    vab - va - vb + v0
}

/// `I^(s)_ab`: the mean of `Δv(a,b|S)` over contexts `S ⊆ Ω∖{a,b}` with
/// `|S| = s`. Contexts are enumerated when there are at most
/// [`EXACT_CONTEXT_LIMIT`] of them and sampled uniformly otherwise.
pub fn multi_order_interaction<G: Game + ?Sized>(
    game: &G,
    a: usize,
    b: usize,
    s: usize,
    samples: usize,
    seed: u64,
) -> Result<OrderEstimate> {
    let n = game.n_units();
    check_pair(n, a, b)?;
    if s + 2 > n {
        return Err(Error::OrderOutOfRange { s, max: n - 2 });
    }
    let others: Vec<usize> = (0..n).filter(|&k| k != a && k != b).collect();
    let total = binom(n - 2, s);
    let mut members = vec![false; n];
    if total <= EXACT_CONTEXT_LIMIT as f64 {
        let mut idx: Vec<usize> = (0..s).collect();
        let mut acc = 0.0;
        let mut count = 0u64;
        loop {
            members.iter_mut().for_each(|m| *m = false);
            for &i in &idx {
                members[others[i]] = true;
            }
            acc += delta_v(game, &mut members, a, b);
            count += 1;
            if !next_combination(&mut idx, others.len()) {
                break;
            }
        }
        return Ok(OrderEstimate { order: s, value: acc / count as f64, contexts: count, estimator: Estimator::Exact });
    }
    if samples == 0 {
        return Err(Error::BadSpec("need at least one context sample".into()));
    }
    let mut r = crate::seed::rng(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        members.iter_mut().for_each(|m| *m = false);
        for i in rand::seq::index::sample(&mut r, others.len(), s) {
            members[others[i]] = true;
        }
        acc += delta_v(game, &mut members, a, b);
    }
    Ok(OrderEstimate {
        order: s,
        value: acc / samples as f64,
        contexts: samples as u64,
        estimator: Estimator::Sampled { pair_samples: None, context_samples: Some(samples), seed },
    })
}

/// Mean `Δv(a,b|S)` per context size, from a table.
fn order_means(n: usize, table: &[f64], a: usize, b: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n - 1];
    let mut cnt = vec![0usize; n - 1];
    let (ba, bb) = (1usize << a, 1usize << b);
    for m in 0..(1usize << n) {
        if m & (ba | bb) != 0 {
            continue;
        }
        let s = m.count_ones() as usize;
        sum[s] += table[m | ba | bb] - table[m | ba] - table[m | bb] + table[m];
        cnt[s] += 1;
    }
    sum.iter().zip(&cnt).map(|(s, c)| s / *c as f64).collect()
}

/// Both sides of the multi-order decomposition
/// `v(Ω) − v(∅) = Σ_a [v({a}) − v(∅)] + Σ_{a≠b} Σ_s (n−1−s)/(n(n−1)) · I^(s)_ab`,
/// computed independently by exhaustive enumeration. Returns `(lhs, rhs, gap)`.
pub fn utility_decomposition_check<G: Game + ?Sized>(game: &G) -> Result<(f64, f64, f64)> {
    let n = game.n_units();
    if n > MAX_DECOMPOSITION_UNITS {
        return Err(Error::TooLarge { n, max: MAX_DECOMPOSITION_UNITS });
    }
    let t = value_table(game)?;
    let full = (1usize << n) - 1;
    let lhs = t[full] - t[0];
    let mut rhs: f64 = (0..n).map(|a| t[1 << a] - t[0]).sum();
    if n >= 2 {
        let norm = (n * (n - 1)) as f64;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                for (s, i_s) in order_means(n, &t, a, b).iter().enumerate() {
                    rhs += (n - 1 - s) as f64 / norm * i_s;
                }
            }
        }
    }
    Ok((lhs, rhs, (lhs - rhs).abs()))
}

/// Pairwise interactions, order profile and summary sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub n_units: usize,
    /// Row-major `n × n`; the diagonal holds `I_aa` when the game defines
    /// it, unestimated pairs are NaN.
    pub pairwise: Vec<f64>,
    /// `order_profile[s]` = mean `I^(s)` over the estimated pairs.
    pub order_profile: Option<Vec<f64>>,
    /// Estimate of `Σ_{a,b} I_ab` over all ordered pairs incl. `a = b`.
    pub sum_all: f64,
    pub off_diagonal_sum: f64,
    /// Whether `sum_all` includes `a = b` terms.
    pub self_terms_included: bool,
    pub estimator: Estimator,
    pub note: String,
}

impl InteractionReport {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.pairwise[a * self.n_units + b]
    }
}

fn fill_diagonal<G: Game + ?Sized>(game: &G, pairwise: &mut [f64]) -> Option<f64> {
    let n = game.n_units();
    let mut total = 0.0;
    for a in 0..n {
        let v = game.self_interaction(a)?;
        pairwise[a * n + a] = v;
        total += v;
    }
    Some(total)
}

const SELF_NOTE: &str = "sum_all includes a = b terms I_aa = δ_aᵀH_aaδ_a when self_terms_included";

/// Exhaustive report: every pair, every context, full order profile.
pub fn interaction_report_exact<G: Game + ?Sized>(game: &G) -> Result<InteractionReport> {
    let n = game.n_units();
    let t = value_table(game)?;
    let mut pairwise = vec![0.0; n * n];
    let mut profile = vec![0.0; n.saturating_sub(1)];
    let mut off = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let v = pairwise_from_table(n, &t, a, b);
            pairwise[a * n + b] = v;
            pairwise[b * n + a] = v;
            off += 2.0 * v;
            for (s, m) in order_means(n, &t, a, b).iter().enumerate() {
                profile[s] += m;
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2).max(1) as f64;
    profile.iter_mut().for_each(|p| *p /= pairs);
    let diag = fill_diagonal(game, &mut pairwise);
    Ok(InteractionReport {
        n_units: n,
        pairwise,
        order_profile: if n >= 2 { Some(profile) } else { None },
        sum_all: off + diag.unwrap_or(0.0),
        off_diagonal_sum: off,
        self_terms_included: diag.is_some(),
        estimator: Estimator::Exact,
        note: SELF_NOTE.into(),
    })
}

/// Which pairs a sampled report visits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairSampling {
    All,
    Random(usize),
}

/// How each visited pair's interaction is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextSampling {
    /// Enumerate every context (needs `n <= 20`).
    Exact,
    /// Draw a context size uniformly from `0..=n−2`, then a uniform subset of
    /// that size; the mean of `Δv` is unbiased for `I_ab`.
    Random(usize),
}

/// Sampled estimate of the pairwise interactions.
pub fn interaction_report_sampled<G: Game + ?Sized>(
    game: &G,
    pairs: PairSampling,
    contexts: ContextSampling,
    seed: u64,
) -> Result<InteractionReport> {
    let n = game.n_units();
    if n < 2 {
        return Err(Error::BadSpec("need at least two units".into()));
    }
    if matches!(pairs, PairSampling::Random(0)) || matches!(contexts, ContextSampling::Random(0)) {
        return Err(Error::BadSpec("sample counts must be at least one".into()));
    }
    if contexts == ContextSampling::Exact && n > MAX_EXACT_UNITS {
        return Err(Error::TooLarge { n, max: MAX_EXACT_UNITS });
    }
    let mut r = crate::seed::rng(seed);
    let chosen: Vec<(usize, usize)> = match pairs {
        PairSampling::All => (0..n).flat_map(|a| ((a + 1)..n).map(move |b| (a, b))).collect(),
        PairSampling::Random(k) => (0..k)
            .map(|_| {
                let a = r.random_range(0..n);
                let mut b = r.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                (a.min(b), a.max(b))
            })
            .collect(),
    };
    let mut sums = vec![0.0; n * n];
    let mut hits = vec![0usize; n * n];
    let mut profile = vec![0.0; n - 1];
    let mut profile_hits = vec![0usize; n - 1];
    let mut members = vec![false; n];
    let others_of = |a: usize, b: usize| -> Vec<usize> { (0..n).filter(|&k| k != a && k != b).collect() };
    for &(a, b) in &chosen {
        let others = others_of(a, b);
        let est = match contexts {
            ContextSampling::Exact => {
                let mut acc = 0.0;
                for m in 0..(1usize << others.len()) {
                    members.iter_mut().for_each(|x| *x = false);
                    for (i, &o) in others.iter().enumerate() {
                        members[o] = m & (1 << i) != 0;
                    }
                    let s = m.count_ones() as usize;
                    let w = 1.0 / ((n - 1) as f64 * binom(n - 2, s));
                    let dv = delta_v(game, &mut members, a, b);
                    acc += w * dv;
                    profile[s] += dv / binom(n - 2, s);
                }
                for h in profile_hits.iter_mut() {
                    *h += 1;
                }
                acc
            }
            ContextSampling::Random(k) => {
                let mut acc = 0.0;
                for _ in 0..k {
                    let s = r.random_range(0..n - 1);
                    members.iter_mut().for_each(|x| *x = false);
                    for i in rand::seq::index::sample(&mut r, others.len(), s) {
                        members[others[i]] = true;
                    }
                    let dv = delta_v(game, &mut members, a, b);
                    acc += dv;
                    profile[s] += dv;
                    profile_hits[s] += 1;
                }
                acc / k as f64
            }
        };
        sums[a * n + b] += est;
        hits[a * n + b] += 1;
    }
    let mut pairwise = vec![f64::NAN; n * n];
    let mut est_sum = 0.0;
    let mut est_pairs = 0usize;
    for a in 0..n {
        for b in (a + 1)..n {
            let h = hits[a * n + b];
            if h > 0 {
                let v = sums[a * n + b] / h as f64;
                pairwise[a * n + b] = v;
                pairwise[b * n + a] = v;
                est_sum += v;
                est_pairs += 1;
            }
        }
    }
    for a in 0..n {
        pairwise[a * n + a] = 0.0;
    }
    let off = est_sum / est_pairs as f64 * (n * (n - 1)) as f64;
    let order_profile = match contexts {
        ContextSampling::Exact => profile.iter().map(|p| p / chosen.len() as f64).collect(),
        ContextSampling::Random(_) => {
            profile.iter().zip(&profile_hits).map(|(p, h)| if *h > 0 { p / *h as f64 } else { f64::NAN }).collect()
        }
    };
    let diag = fill_diagonal(game, &mut pairwise);
    let estimator = if pairs == PairSampling::All && contexts == ContextSampling::Exact {
        Estimator::Exact
    } else {
        Estimator::Sampled {
            pair_samples: match pairs {
                PairSampling::All => None,
                PairSampling::Random(k) => Some(k),
            },
            context_samples: match contexts {
                ContextSampling::Exact => None,
                ContextSampling::Random(k) => Some(k),
            },
            seed,
        }
    };
    Ok(InteractionReport {
        n_units: n,
        pairwise,
        order_profile: Some(order_profile),
        sum_all: off + diag.unwrap_or(0.0),
        off_diagonal_sum: off,
        self_terms_included: diag.is_some(),
        estimator,
        note: SELF_NOTE.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Arch;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_table(n: usize, seed: u64) -> TableGame {
        let mut r = crate::seed::rng(seed);
        TableGame::new(n, (0..1 << n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn additive(w: &[f64]) -> TableGame {
        let n = w.len();
        let values = (0..1usize << n).map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| w[i]).sum()).collect();
        TableGame::new(n, values).unwrap()
    }

    fn random_quadratic(n: usize, seed: u64) -> QuadraticGame {
        let mut r = crate::seed::rng(seed);
        let a = crate::densela::Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let h = SymMatrix::gram(&a);
        let g = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let d = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        QuadraticGame::new(g, h, d, UnitPartition::singletons(n)).unwrap()
    }

    #[test]
    fn two_player_examples() {
        let g = TableGame::new(2, vec![0.0, 1.0, 1.0, 3.0]).unwrap();
        assert_eq!(shapley_all(&g).unwrap(), vec![1.5, 1.5]);
        let g = TableGame::new(2, vec![0.0, 1.0, 1.0, 4.0]).unwrap();
        assert_eq!(pairwise_interaction_exact(&g, 0, 1).unwrap(), 2.0);
        assert_eq!(pairwise_interaction_exact(&g, 0, 0).unwrap_err(), Error::SameUnit);
    }

    #[test]
    fn additive_games_have_no_interaction() {
        let g = additive(&[0.5, -1.0, 2.0, 0.25]);
        let phi = shapley_all(&g).unwrap();
        assert_eq!(phi, vec![0.5, -1.0, 2.0, 0.25]);
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert!(pairwise_interaction_exact(&g, a, b).unwrap().abs() < 1e-15);
                }
            }
        }
        assert!(sum_interactions_fast(&g).off_diagonal.abs() < 1e-15);
        for s in 0..3 {
            assert_eq!(multi_order_interaction(&g, 0, 1, s, 1, 0).unwrap().value, 0.0);
        }
        let (_, _, gap) = utility_decomposition_check(&g).unwrap();
        assert!(gap <= 1e-10);
    }

    #[test]
    fn order_zero_is_single_context() {
        let g = random_table(5, 9);
        let t = g.values();
        let e = multi_order_interaction(&g, 1, 3, 0, 1, 0).unwrap();
        assert_eq!(e.contexts, 1);
        assert_eq!(e.value, t[0b01010] - t[0b00010] - t[0b01000] + t[0]);
        assert!(multi_order_interaction(&g, 1, 3, 4, 1, 0).is_err());
    }

    #[test]
    fn orders_average_to_pairwise() {
        let g = random_table(8, 3);
        for (a, b) in [(0, 1), (2, 7), (5, 3)] {
            let mean: f64 =
                (0..7).map(|s| multi_order_interaction(&g, a, b, s, 1, 0).unwrap().value).sum::<f64>() / 7.0;
            let exact = pairwise_interaction_exact(&g, a, b).unwrap();
            assert!((mean - exact).abs() <= 1e-8);
        }
    }

    #[test]
    fn sampled_orders_are_seeded() {
        // C(22, 11) > 10^4 forces sampling
        let q = random_quadratic(24, 2);
        let a = multi_order_interaction(&q, 0, 1, 11, 50, 7).unwrap();
        let b = multi_order_interaction(&q, 0, 1, 11, 50, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(a.estimator, Estimator::Sampled { .. }));
        // quadratic games have context-free interactions
        assert!((a.value - q.block(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_pairwise_is_block_form() {
        let q = random_quadratic(6, 4);
        for a in 0..6 {
            for b in (a + 1)..6 {
                let i = pairwise_interaction_exact(&q, a, b).unwrap();
                assert!((i - q.block(a, b)).abs() <= 1e-8, "{a} {b}");
            }
        }
        let fast = sum_interactions_fast(&q);
        assert!((fast.total - q.h.quad(&q.delta)).abs() <= 1e-8);
        assert!((quadratic_interaction_sum(&q.delta, &q.h).unwrap() - fast.total).abs() <= 1e-8);
    }

    #[test]
    fn quadratic_decomposition_closes() {
        let q = random_quadratic(8, 5);
        let (_, _, gap) = utility_decomposition_check(&q).unwrap();
        assert!(gap <= 1e-8);
        assert!(utility_decomposition_check(&random_quadratic(11, 1)).is_err());
    }

    #[test]
    fn self_influence_cases() {
        let h = SymMatrix::identity(3);
        let p = UnitPartition::singletons(3);
        assert_eq!(self_influence(&[0.0, 2.0, 0.0], &h, &p, 0).unwrap(), 0.0);
        assert_eq!(self_influence(&[0.0, 3.0, 0.0], &h, &p, 1).unwrap(), 9.0);
        let q = random_quadratic(5, 8);
        let direct = q.delta[2] * q.h.get(2, 2) * q.delta[2];
        assert_eq!(self_influence(&q.delta, &q.h, &q.partition, 2).unwrap(), direct);
    }

    #[test]
    fn grid_partitions() {
        let p = make_grid_partition(4, 4, 2).unwrap();
        assert_eq!(p.units[0], vec![0, 1, 4, 5]);
        assert_eq!(p.n_units(), 4);
        let p = make_grid_partition(5, 5, 2).unwrap();
        assert_eq!(p.units[0].len(), 4);
        assert_eq!(p.units[3].len(), 9);
        assert_eq!(p.units[1], vec![2, 3, 4, 7, 8, 9]);
        let p = make_grid_partition(16, 16, 16).unwrap();
        assert!(p.units.iter().all(|u| u.len() == 1));
        assert_eq!(make_grid_partition(3, 5, 4).unwrap_err(), Error::BadGrid);
    }

    #[test]
    fn coalition_game_on_network() {
        let net = ReluNet::random(Arch::Plain, &[4, 6, 3], 1).unwrap();
        let x = vec![0.3, -0.2, 0.5, 0.1];
        let delta = vec![0.1, 0.2, -0.1, 0.05];
        let loss = LossKind::SoftmaxCrossEntropy { y: 0 };
        let game = CoalitionGame::new(
            Model::Net(&net),
            x.clone(),
            delta.clone(),
            UnitPartition::singletons(4),
            ValueKind::LossGap,
            loss,
        )
        .unwrap();
        assert_eq!(game.coalition_value(&[]).unwrap(), 0.0);
        let full: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let expect = netcore::loss_from_logits(&forward(&net, &full).unwrap().0, loss).unwrap().0
            - netcore::loss_from_logits(&forward(&net, &x).unwrap().0, loss).unwrap().0;
        assert!((game.coalition_value(&[0, 1, 2, 3]).unwrap() - expect).abs() < 1e-15);
        assert_eq!(game.coalition_value(&[4]).unwrap_err(), Error::InvalidUnit(4));
    }

    #[test]
    fn sampled_report_matches_exact() {
        let q = random_quadratic(6, 12);
        let exact = interaction_report_exact(&q).unwrap();
        let all = interaction_report_sampled(&q, PairSampling::All, ContextSampling::Exact, 3).unwrap();
        for k in 0..36 {
            assert!((exact.pairwise[k] - all.pairwise[k]).abs() <= 1e-9);
        }
        assert!((exact.sum_all - all.sum_all).abs() <= 1e-9);
        let p1 = exact.order_profile.as_ref().unwrap();
        let p2 = all.order_profile.as_ref().unwrap();
        for (a, b) in p1.iter().zip(p2) {
            assert!((a - b).abs() <= 1e-9);
        }
        let s1 = interaction_report_sampled(&q, PairSampling::Random(5), ContextSampling::Random(20), 9).unwrap();
        let s2 = interaction_report_sampled(&q, PairSampling::Random(5), ContextSampling::Random(20), 9).unwrap();
        assert_eq!(std::format!("{s1:?}"), std::format!("{s2:?}"));
        let add = additive(&[1.0, 2.0, 3.0, 4.0]);
        let r = interaction_report_sampled(&add, PairSampling::All, ContextSampling::Exact, 0).unwrap();
        assert!(r.pairwise.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shapley_efficiency_and_linearity(seed in any::<u64>(), n in 1usize..9) {
            let v = random_table(n, seed);
            let w = random_table(n, seed ^ 0xabc);
            let phi_v = shapley_all(&v).unwrap();
            let phi_w = shapley_all(&w).unwrap();
            let sum = TableGame::new(n, v.values().iter().zip(w.values()).map(|(a, b)| a + b).collect()).unwrap();
            let phi_s = shapley_all(&sum).unwrap();
            let total = v.values()[(1 << n) - 1] - v.values()[0];
            prop_assert!((phi_v.iter().sum::<f64>() - total).abs() <= 1e-9);
            for a in 0..n {
                prop_assert!((phi_s[a] - phi_v[a] - phi_w[a]).abs() <= 1e-9);
            }
        }

        #[test]
        fn interaction_forms_agree(seed in any::<u64>(), n in 2usize..8) {
            let g = random_table(n, seed);
            let fast = sum_interactions_fast(&g);
            let mut enumerated = 0.0;
            for a in 0..n {
                for b in 0..n {
                    if a == b { continue; }
                    let i2 = pairwise_interaction_exact(&g, a, b).unwrap();
                    let i1 = pairwise_interaction_singleton(&g, a, b).unwrap();
                    prop_assert!((i1 - i2).abs() <= 1e-9);
                    enumerated += i2;
                }
            }
            prop_assert!((fast.off_diagonal - enumerated).abs() <= 1e-9);
            prop_assert!(fast.self_terms.is_none());
        }

        #[test]
        fn decomposition_closes(seed in any::<u64>(), n in 1usize..8) {
            let (_, _, gap) = utility_decomposition_check(&random_table(n, seed)).unwrap();
            prop_assert!(gap <= 1e-8);
        }
    }
}
