//! Small dense-network engine with hand-written reverse mode.
//!
//! Layers compute `act(x W + b)` on row-major batches (`B × in`), with
//! inverted dropout applied after hidden activations. Everything runs in
//! `f64` on the calling thread.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Glorot (Xavier) normal initialization, variance `2 / (fan_in + fan_out)`.
pub fn glorot_init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in × out`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    /// Dropout rate applied to this layer's activated output during training.
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer dropout masks; `None` for layers without dropout.
/// Entries are `0` or `1/(1 − rate)`.
pub type DropoutMasks = Vec<Option<Array2<f64>>>;

#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
    masks: Option<DropoutMasks>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

pub type MlpGradients = Vec<LayerGradients>;

impl Mlp {
    /// Fully connected network with ReLU hidden layers and a linear output.
    /// `widths` lists input, hidden and output widths.
    pub fn new<R: Rng>(widths: &[usize], dropout: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::ShapeMismatch(format!("invalid layer widths {widths:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let hidden = i < last;
                Layer {
                    weights: glorot_init(w[0], w[1], rng),
                    biases: Array1::zeros(w[1]),
                    activation: if hidden { Activation::Relu } else { Activation::Identity },
                    dropout: if hidden { dropout } else { 0.0 },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.weights.ncols() {
                return Err(Error::ShapeMismatch(format!("layer {i}: bias length vs weight columns")));
            }
            if i > 0 && layers[i - 1].weights.ncols() != l.weights.nrows() {
                return Err(Error::ShapeMismatch(format!("layer {i}: input width mismatch")));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::InvalidConfig(format!("layer {i}: dropout {}", l.dropout)));
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(|l| l.weights.ncols()))
            .collect()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.dropout > 0.0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Draws fresh inverted-dropout masks for a batch of `batch` rows.
    pub fn sample_masks<R: Rng>(&self, batch: usize, rng: &mut R) -> DropoutMasks {
        self.layers
            .iter()
            .map(|l| {
                (l.dropout > 0.0).then(|| {
                    let keep = 1.0 - l.dropout;
                    let scale = 1.0 / keep;
                    Array2::from_shape_simple_fn((batch, l.weights.ncols()), || {
                        if rng.gen::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    })
                })
            })
            .collect()
    }

    /// Batched forward pass. Without masks dropout is the identity.
    pub fn forward(&self, input: ArrayView2<f64>, masks: Option<&DropoutMasks>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} vs network input {}",
                input.ncols(),
                self.input_width()
            )));
        }
        if let Some(m) = masks {
            if m.len() != self.layers.len() {
                return Err(Error::ShapeMismatch("one mask slot per layer expected".into()));
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = x.dot(&layer.weights) + &layer.biases;
            let mut a = match layer.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => z.mapv(|v| v.max(0.0)),
            };
            if let Some(Some(mask)) = masks.map(|m| &m[i]) {
                if mask.dim() != a.dim() {
                    return Err(Error::ShapeMismatch(format!("dropout mask shape for layer {i}")));
                }
                a *= mask;
            }
            inputs.push(std::mem::replace(&mut x, a));
            preacts.push(z);
        }
        Ok((x, ForwardCache { inputs, preacts, masks: masks.cloned() }))
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(input, None).map(|(out, _)| out)
    }

    /// Single-vector forward pass.
    pub fn forward_one(&self, input: ArrayView1<f64>) -> Result<Array1<f64>> {
        let x = input.insert_axis(Axis(0));
        Ok(self.predict(x)?.row(0).to_owned())
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<f64>) -> Result<(MlpGradients, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("cache does not match network depth".into()));
        }
        let last = &cache.preacts[self.layers.len() - 1];
        if grad_output.dim() != last.dim() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.dim(),
                last.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(Some(mask)) = cache.masks.as_ref().map(|m| &m[i]) {
                g *= mask;
            }
            if layer.activation == Activation::Relu {
                Zip::from(&mut g).and(&cache.preacts[i]).for_each(|gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let dw = cache.inputs[i].t().dot(&g);
            let db = g.sum_axis(Axis(0));
            g = g.dot(&layer.weights.t());
            grads.push(LayerGradients { weights: dw, biases: db });
        }
        grads.reverse();
        Ok((grads, g))
    }

    /// All parameters flattened in layer order (weights row-major, then biases).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.biases.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.biases.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }
}

/// Flattens gradients in the same order as [`Mlp::flat_params`].
pub fn flatten_gradients(grads: &MlpGradients) -> Vec<f64> {
    grads.iter().flat_map(|g| g.weights.iter().chain(g.biases.iter()).copied()).collect()
}

/// Squared Euclidean error `‖pred − target‖²`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Heteroscedastic Gaussian negative log-likelihood with per-axis log-variance,
/// additive constants dropped.
pub fn gaussian_nll_loss(mean: &[f64], log_var: &[f64], target: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .zip(target)
        .map(|((m, s), t)| 0.5 * s + (t - m) * (t - m) / (2.0 * s.exp()))
        .sum()
}

/// Batch-mean of [`mse_loss`] and its gradient w.r.t. `pred`.
pub fn mse_batch(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let b = pred.nrows() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    (loss, diff * (2.0 / b))
}

/// Batch-mean of [`gaussian_nll_loss`] for outputs laid out as
/// `(μ_x, μ_y, s_x, s_y)`, with the gradient w.r.t. those outputs.
pub fn gaussian_nll_batch(output: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let b = output.nrows();
    let d = target.ncols();
    let mut grad = Array2::zeros(output.dim());
    let mut loss = 0.0;
    for r in 0..b {
        for k in 0..d {
            let mu = output[[r, k]];
            let s = output[[r, d + k]];
            let err = target[[r, k]] - mu;
            let inv_var = (-s).exp();
            loss += 0.5 * s + 0.5 * err * err * inv_var;
            grad[[r, k]] = -err * inv_var / b as f64;
            grad[[r, d + k]] = (0.5 - 0.5 * err * err * inv_var) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Central finite differences of `f` at `point`.
pub fn finite_diff_gradients<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state of {} for {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One Adam state per weight matrix and bias vector of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpAdam {
    states: Vec<(AdamState, AdamState)>,
}

impl MlpAdam {
    pub fn new(mlp: &Mlp, learning_rate: f64) -> Self {
        Self {
            states: mlp
                .layers()
                .iter()
                .map(|l| (AdamState::new(l.weights.len(), learning_rate), AdamState::new(l.biases.len(), learning_rate)))
                .collect(),
        }
    }

    pub fn update(&mut self, mlp: &mut Mlp, grads: &MlpGradients) -> Result<()> {
        if grads.len() != self.states.len() {
            return Err(Error::ShapeMismatch("gradient count vs layer count".into()));
        }
        for ((layer, g), (sw, sb)) in mlp.layers_mut().iter_mut().zip(grads).zip(self.states.iter_mut()) {
            let gw = g.weights.as_standard_layout();
            sw.update(
                layer.weights.as_slice_mut().expect("standard layout weights"),
                gw.as_slice().expect("standard layout"),
            )?;
            sb.update(
                layer.biases.as_slice_mut().expect("contiguous biases"),
                g.biases.as_slice().expect("contiguous"),
            )?;
        }
        Ok(())
    }
}

/// Per-dimension input normalization fitted on a training split.
///
/// Each value is first compressed as `sign(v) ln(1 + |v|/a)`, with `a` the
/// training median of `|v|` for that dimension, then z-scored. Channel
/// magnitudes fall off as `1/d`, so users next to an RRH produce values tens of
/// standard deviations out; the compression keeps them in range.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    /// Compression reference `a` per dimension; 0 disables compression.
    pub reference: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions with zero variance; their std is pinned to 1.
    pub constant_dims: Vec<usize>,
}

fn compress(v: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        v.signum() * (v.abs() / reference).ln_1p()
    } else {
        v
    }
}

impl FeatureScaler {
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyInput("feature scaler fit"));
        }
        let reference: Vec<f64> = data
            .columns()
            .into_iter()
            .map(|col| {
                let mut abs: Vec<f64> = col.iter().map(|v| v.abs()).collect();
                let mid = abs.len() / 2;
                let median = *abs.select_nth_unstable_by(mid, f64::total_cmp).1;
                if median.is_finite() { median } else { 0.0 }
            })
            .collect();
        let mut compressed = data.to_owned();
        for mut row in compressed.rows_mut() {
            for (v, &a) in row.iter_mut().zip(&reference) {
                *v = compress(*v, a);
            }
        }
        let mean = compressed.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let mut constant_dims = Vec::new();
        let std = compressed
            .std_axis(Axis(0), 0.0)
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    constant_dims.push(i);
                    1.0
                }
            })
            .collect();
        Ok(Self { reference, mean, std, constant_dims })
    }

    pub fn identity(dim: usize) -> Self {
        Self { reference: vec![0.0; dim], mean: vec![0.0; dim], std: vec![1.0; dim], constant_dims: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} features vs scaler width {}", data.ncols(), self.dim())));
        }
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for (((v, a), m), s) in row.iter_mut().zip(&self.reference).zip(&self.mean).zip(&self.std) {
                *v = (compress(*v, *a) - m) / s;
            }
        }
        Ok(out)
    }

    /// Restricts the scaler to the given input dimensions.
    pub fn gather(&self, indices: &[usize]) -> Self {
        Self {
            reference: indices.iter().map(|&i| self.reference[i]).collect(),
            mean: indices.iter().map(|&i| self.mean[i]).collect(),
            std: indices.iter().map(|&i| self.std[i]).collect(),
            constant_dims: indices
                .iter()
                .enumerate()
                .filter(|(_, i)| self.constant_dims.contains(i))
                .map(|(k, _)| k)
                .collect(),
        }
    }
}

/// Per-axis affine map of positions onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScaler {
    pub center: [f64; 2],
    pub half_range: [f64; 2],
}

impl TargetScaler {
    pub fn fit(targets: ArrayView2<f64>) -> Result<Self> {
        if targets.nrows() == 0 || targets.ncols() != 2 {
            return Err(Error::EmptyInput("target scaler fit"));
        }
        let mut center = [0.0; 2];
        let mut half_range = [1.0; 2];
        for k in 0..2 {
            let col = targets.column(k);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            center[k] = 0.5 * (lo + hi);
            if hi > lo {
                half_range[k] = 0.5 * (hi - lo);
            }
        }
        Ok(Self { center, half_range })
    }

    pub fn scale(&self, targets: ArrayView2<f64>) -> Array2<f64> {
        let mut out = targets.to_owned();
        for mut row in out.rows_mut() {
            for k in 0..2 {
                row[k] = (row[k] - self.center[k]) / self.half_range[k];
            }
        }
        out
    }

    pub fn unscale_point(&self, scaled: [f64; 2]) -> [f64; 2] {
        [
            scaled[0] * self.half_range[0] + self.center[0],
            scaled[1] * self.half_range[1] + self.center[1],
        ]
    }

    /// Converts a variance in scaled units to squared meters.
    pub fn unscale_variance(&self, var: [f64; 2]) -> [f64; 2] {
        [var[0] * self.half_range[0].powi(2), var[1] * self.half_range[1].powi(2)]
    }
}
