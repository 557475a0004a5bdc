//! Concrete (Gumbel-Softmax) RRH selection layer and the baseline selectors.
//!
//! Each of the `M` selection rows owns a logit vector over the `N` RRHs.
//! During training a row is the softmax of `(φ_m + g_m)/τ` with fresh Gumbel
//! noise `g_m`; at test time the row collapses onto `argmax_n φ_{m,n}`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::channel_sim::{Dataset, FeatureMode};
use crate::error::{Error, Result};
use crate::nn::glorot_init;

/// Soft rows at temperatures below this are computed at this temperature.
pub const MIN_TEMPERATURE: f64 = 1e-6;

const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_epochs: usize,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_epochs: usize) -> Result<Self> {
        if !(tau_start > tau_end && tau_end > 0.0) || total_epochs == 0 {
            return Err(Error::InvalidConfig(format!(
                "temperature schedule needs tau_start > tau_end > 0 and T >= 1 (got {tau_start}, {tau_end}, {total_epochs})"
            )));
        }
        Ok(Self { tau_start, tau_end, total_epochs })
    }

    /// `τ_0 (τ_e/τ_0)^{t/T}`.
    pub fn temperature(&self, epoch: usize) -> f64 {
        temperature(epoch, self)
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { tau_start: 10.0, tau_end: 0.1, total_epochs: 800 }
    }
}

/// Exponentially annealed temperature at `epoch` (`0 ≤ epoch ≤ T`).
pub fn temperature(epoch: usize, schedule: &TemperatureSchedule) -> f64 {
    let TemperatureSchedule { tau_start, tau_end, total_epochs } = *schedule;
    if epoch == 0 {
        return tau_start;
    }
    if epoch == total_epochs {
        return tau_end;
    }
    tau_start * (tau_end / tau_start).powf(epoch as f64 / total_epochs as f64)
}

/// Softmax with max-subtraction.
pub fn class_probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gumbel inverse CDF `−log(−log u)`, with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// `count` i.i.d. Gumbel(0, 1) draws.
pub fn sample_gumbel<R: Rng>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Categorical draw via the Gumbel-Max trick.
pub fn gumbel_max_sample<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let noise = sample_gumbel(logits.len(), rng);
    argmax(logits.iter().zip(&noise).map(|(l, g)| l + g))
}

/// Relaxed one-hot row `softmax((φ + g)/τ)`.
pub fn concrete_sample(logits: &[f64], gumbel_noise: &[f64], tau: f64) -> Vec<f64> {
    let tau = tau.max(MIN_TEMPERATURE);
    let scaled: Vec<f64> = logits.iter().zip(gumbel_noise).map(|(l, g)| (l + g) / tau).collect();
    class_probabilities(&scaled)
}

/// Learnable logits, one row of length `N` per selection unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    logits: Array2<f64>,
}

impl SelectorParams {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        let (m, n) = logits.dim();
        if m == 0 || m > n {
            return Err(Error::InvalidConfig(format!("selector needs 1 <= M <= N, got M={m}, N={n}")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("selector logits must be finite".into()));
        }
        Ok(Self { logits })
    }

    /// Glorot-normal logits.
    pub fn init<R: Rng>(m: usize, n: usize, rng: &mut R) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::InvalidConfig(format!("selector needs 1 <= M <= N, got M={m}, N={n}")));
        }
        Ok(Self { logits: glorot_init(m, n, rng) })
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Array2<f64> {
        &mut self.logits
    }

    pub fn m(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n(&self) -> usize {
        self.logits.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Soft,
    Hard,
}

/// `M × N` matrix mapping channel features onto the selected subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    rows: Array2<f64>,
    mode: SelectionMode,
}

impl SelectionMatrix {
    pub fn soft(rows: Array2<f64>) -> Result<Self> {
        for (m, row) in rows.outer_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("row {m} is not on the probability simplex")));
            }
        }
        Ok(Self { rows, mode: SelectionMode::Soft })
    }

    pub fn hard(indices: &[usize], n: usize) -> Result<Self> {
        let mut rows = Array2::zeros((indices.len(), n));
        for (m, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            rows[[m, i]] = 1.0;
        }
        Ok(Self { rows, mode: SelectionMode::Hard })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }
}

/// `ĥ = A h̃`. Hard matrices gather, soft ones take row-wise dot products.
pub fn apply_selection(matrix: &SelectionMatrix, features: ArrayView1<f64>) -> Result<Array1<f64>> {
    if features.len() != matrix.rows.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{} features for a selection over {} RRHs",
            features.len(),
            matrix.rows.ncols()
        )));
    }
    Ok(match matrix.mode {
        SelectionMode::Soft => matrix.rows.dot(&features),
        SelectionMode::Hard => matrix
            .rows
            .outer_iter()
            .map(|row| features[argmax(row.iter().copied())])
            .collect(),
    })
}

/// Hard selection result; duplicate indices across rows are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
}

impl Selection {
    pub fn unique_count(&self) -> usize {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    pub fn duplicate_count(&self) -> usize {
        self.indices.len() - self.unique_count()
    }
}

/// Test-time selection: `argmax_n φ_{m,n}` per row, lowest index on ties.
pub fn hard_select(params: &SelectorParams) -> Selection {
    let sel = hard_select_quiet(params);
    if sel.duplicate_count() > 0 {
        log::warn!(
            "hard selection picked {} unique RRHs for M={} ({} duplicates)",
            sel.unique_count(),
            sel.indices.len(),
            sel.duplicate_count()
        );
    }
    sel
}

/// [`hard_select`] without the duplicate warning, for per-epoch validation.
pub fn hard_select_quiet(params: &SelectorParams) -> Selection {
    Selection { indices: params.logits.outer_iter().map(|row| argmax(row.iter().copied())).collect() }
}

/// Gathers columns `indices` of a feature matrix.
pub fn gather_features(features: ArrayView2<f64>, indices: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= features.ncols()) {
        return Err(Error::IndexOutOfRange { index: bad, len: features.ncols() });
    }
    Ok(features.select(Axis(1), indices))
}

/// Batched relaxed selection. `noise` is `B × M × N`.
///
/// Returns the selected features (`B × M`) and the soft rows (`B × M × N`)
/// needed by [`concrete_backward`].
pub fn concrete_forward(
    params: &SelectorParams,
    features: ArrayView2<f64>,
    noise: ArrayView3<f64>,
    tau: f64,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (b, n) = features.dim();
    let m = params.m();
    if n != params.n() || noise.dim() != (b, m, n) {
        return Err(Error::ShapeMismatch(format!(
            "features {:?}, noise {:?}, selector {m}x{}",
            features.dim(),
            noise.dim(),
            params.n()
        )));
    }
    let mut weights = Array3::zeros((b, m, n));
    let mut out = Array2::zeros((b, m));
    for r in 0..b {
        let f = features.row(r);
        for k in 0..m {
            let row = concrete_sample(
                params.logits.row(k).as_slice().expect("contiguous logits"),
                noise.slice(ndarray::s![r, k, ..]).to_vec().as_slice(),
                tau,
            );
            let mut acc = 0.0;
            for (j, &w) in row.iter().enumerate() {
                weights[[r, k, j]] = w;
                acc += w * f[j];
            }
            out[[r, k]] = acc;
        }
    }
    Ok((out, weights))
}

/// Gradient of the loss w.r.t. the logits, given the gradient w.r.t. the
/// selected features.
///
/// With `a = softmax((φ + g)/τ)` and `ĥ = a · h`,
/// `∂ĥ/∂φ_j = a_j (h_j − ĥ) / τ`.
pub fn concrete_backward(
    features: ArrayView2<f64>,
    weights: ArrayView3<f64>,
    selected: ArrayView2<f64>,
    grad_selected: ArrayView2<f64>,
    tau: f64,
) -> Result<Array2<f64>> {
    let (b, m, n) = weights.dim();
    if features.dim() != (b, n) || selected.dim() != (b, m) || grad_selected.dim() != (b, m) {
        return Err(Error::ShapeMismatch("concrete backward inputs".into()));
    }
    let tau = tau.max(MIN_TEMPERATURE);
    let mut grad = Array2::zeros((m, n));
    for r in 0..b {
        for k in 0..m {
            let g = grad_selected[[r, k]] / tau;
            if g == 0.0 {
                continue;
            }
            let hat = selected[[r, k]];
            for j in 0..n {
                grad[[k, j]] += g * weights[[r, k, j]] * (features[[r, j]] - hat);
            }
        }
    }
    Ok(grad)
}

/// Channel-gain baseline: the `m` RRHs with the largest `Σ_r |h̃_{r,n}|²`,
/// in descending gain order, lowest index first on ties.
pub fn select_cg(dataset: &Dataset, m: usize) -> Result<Vec<usize>> {
    if dataset.feature_mode != FeatureMode::Magnitude {
        return Err(Error::WrongFeatureMode { expected: "magnitude" });
    }
    if m > dataset.n {
        return Err(Error::InvalidConfig(format!("cannot select M={m} of N={}", dataset.n)));
    }
    let scores: Vec<f64> = dataset.features.columns().into_iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    Ok(rank_descending(&scores, m))
}

/// Indices of the `m` largest scores, descending, ties to the lower index.
pub fn rank_descending(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// `m` distinct RRH indices drawn uniformly without replacement.
pub fn select_random<R: Rng>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::InvalidConfig(format!("cannot select M={m} of N={n}")));
    }
    Ok(sample(rng, n, m).into_vec())
}
