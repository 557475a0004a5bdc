//! End-to-end RSD training, test-time selection, and the LUD stage.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel_sim::{Dataset, FeatureMode, Position2D};
use crate::error::{Error, Result};
use crate::nn::{gaussian_nll_batch, mse_batch, FeatureScaler, Mlp, MlpAdam, AdamState, TargetScaler};
use crate::selector::{
    concrete_backward, concrete_forward, gather_features, gumbel_from_uniform, hard_select, hard_select_quiet, Selection,
    SelectorParams, TemperatureSchedule,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// 64 at R=8000 gives about as many Adam steps per epoch as 512 at R=49000.
    pub batch_size: usize,
    pub dropout: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub patience: usize,
    pub m: usize,
    pub seed: u64,
    /// Fraction of samples in the train pool; the rest is held out for testing.
    pub split_ratio: f64,
    /// Fraction of the train pool carved out for validation.
    pub validation_fraction: f64,
    pub split_seed: u64,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Dropout-enabled forward passes used for the epistemic estimate.
    pub mc_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 1e-3,
            batch_size: 64,
            dropout: 0.2,
            tau_start: 10.0,
            tau_end: 0.1,
            patience: 30,
            m: 6,
            seed: 0,
            split_ratio: 0.8,
            validation_fraction: 0.1,
            split_seed: 0,
            hidden_layers: 3,
            hidden_units: 350,
            mc_passes: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.m == 0 || self.hidden_units == 0 {
            return bad("epochs, batch_size, m and hidden_units must be positive".into());
        }
        if self.patience == 0 || self.patience > self.epochs {
            return bad(format!("patience must be in 1..={} (got {})", self.epochs, self.patience));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} outside (0, 1)", self.split_ratio));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} outside (0, 1)", self.validation_fraction));
        }
        TemperatureSchedule::new(self.tau_start, self.tau_end, self.epochs)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        TemperatureSchedule::new(self.tau_start, self.tau_end, self.epochs)
    }

    fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        w.push(output);
        w
    }
}

/// Disjoint sample index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled split: `ratio` of the samples form the train pool, of which
/// `validation_fraction` is held out for validation; the rest is the test set.
pub fn split_dataset(len: usize, ratio: f64, validation_fraction: f64, seed: u64) -> Result<Split> {
    if len < 10 {
        return Err(Error::TooFewSamples { needed: 10, got: len });
    }
    if !(ratio > 0.0 && ratio < 1.0) || !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fractions {ratio}, {validation_fraction}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The test set may round to empty; evaluation reports that as EmptyInput.
    let pool = ((len as f64 * ratio).round() as usize).clamp(2, len);
    let val = ((pool as f64 * validation_fraction).round() as usize).clamp(1, pool - 1);
    let test = order.split_off(pool);
    let validation = order.split_off(pool - val);
    Ok(Split { train: order, validation, test })
}

/// One row of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Selection temperature; `None` for stages without a selection layer.
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRsd {
    pub selector: SelectorParams,
    pub trunk: Mlp,
    pub scaler: FeatureScaler,
    pub target_scaler: TargetScaler,
    pub schedule: TemperatureSchedule,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedLud {
    pub trunk: Mlp,
    /// Fitted on the gathered input columns.
    pub scaler: FeatureScaler,
    pub target_scaler: TargetScaler,
    /// RRH indices feeding the network, in input order.
    pub selected_indices: Vec<usize>,
    pub n: usize,
    pub feature_mode: FeatureMode,
    pub mc_passes: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Position estimate with per-axis variances in square meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub position: Position2D,
    pub aleatoric: [f64; 2],
    pub epistemic: [f64; 2],
}

/// Stream ids for the per-purpose RNGs derived from the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_EPOCH_BASE: u64 = 1 << 32;
const STREAM_MC: u64 = 1 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Prepared {
    x_train: Array2<f64>,
    y_train: Array2<f64>,
    x_val: Array2<f64>,
    y_val: Array2<f64>,
    scaler: FeatureScaler,
    target_scaler: TargetScaler,
}

fn prepare(dataset: &Dataset, columns: Option<&[usize]>, config: &TrainConfig) -> Result<Prepared> {
    let split = split_dataset(dataset.len(), config.split_ratio, config.validation_fraction, config.split_seed)?;
    let gather = |idx: &[usize]| -> Result<Array2<f64>> {
        let rows = dataset.features.select(Axis(0), idx);
        match columns {
            Some(c) => gather_features(rows.view(), c),
            None => Ok(rows),
        }
    };
    let raw_train = gather(&split.train)?;
    let raw_val = gather(&split.validation)?;
    let scaler = FeatureScaler::fit(raw_train.view())?;
    if !scaler.constant_dims.is_empty() {
        log::warn!("constant feature dimensions {:?}", scaler.constant_dims);
    }
    let targets = dataset.targets();
    let t_train = targets.select(Axis(0), &split.train);
    let target_scaler = TargetScaler::fit(t_train.view())?;
    Ok(Prepared {
        x_train: scaler.transform(raw_train.view())?,
        y_train: target_scaler.scale(t_train.view()),
        x_val: scaler.transform(raw_val.view())?,
        y_val: target_scaler.scale(targets.select(Axis(0), &split.validation).view()),
        scaler,
        target_scaler,
    })
}

/// Tracks the best validation loss and decides when to stop.
struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Returns `(improved, stop)`.
    fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

fn rsd_validation_loss(selector: &SelectorParams, trunk: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let sel = hard_select_quiet(selector);
    let input = gather_features(x, &sel.indices)?;
    let pred = trunk.predict(input.view())?;
    Ok(mse_batch(pred.view(), y).0)
}

/// Trains the selection layer and the localization trunk jointly.
///
/// Epoch `t ∈ 1..=T` runs at `schedule.temperature(t)`, so the last epoch uses
/// the end temperature. Each sample gets fresh Gumbel noise in every epoch.
/// Validation uses the hard (argmax) selection with dropout off; the returned
/// parameters are those of the best validation epoch.
pub fn train_rsd(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedRsd> {
    config.validate()?;
    if dataset.feature_mode != FeatureMode::Magnitude {
        return Err(Error::WrongFeatureMode { expected: "magnitude" });
    }
    if config.m > dataset.n {
        return Err(Error::InvalidConfig(format!("cannot select M={} of N={}", config.m, dataset.n)));
    }
    let schedule = config.schedule()?;
    let data = prepare(dataset, None, config)?;
    let (m, n) = (config.m, dataset.n);

    let mut init_rng = stream_rng(config.seed, STREAM_INIT);
    let mut selector = SelectorParams::init(m, n, &mut init_rng)?;
    let mut trunk = Mlp::new(&config.widths(m, 2), config.dropout, &mut init_rng)?;
    let mut trunk_opt = MlpAdam::new(&trunk, config.learning_rate);
    let mut logit_opt = AdamState::new(m * n, config.learning_rate);

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (selector.clone(), trunk.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.x_train.nrows()).collect();

    for epoch in 1..=config.epochs {
        let tau = schedule.temperature(epoch);
        log::debug!("rsd epoch {epoch}: tau = {tau}");
        let mut rng = stream_rng(config.seed, STREAM_EPOCH_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, config.batch_size) {
            let b = batch.len();
            let x = data.x_train.select(Axis(0), batch);
            let y = data.y_train.select(Axis(0), batch);
            let noise = Array3::from_shape_simple_fn((b, m, n), || gumbel_from_uniform(rng.gen::<f64>()));
            let (selected, weights) = concrete_forward(&selector, x.view(), noise.view(), tau)?;
            let masks = trunk.sample_masks(b, &mut rng);
            let (pred, cache) = trunk.forward(selected.view(), Some(&masks))?;
            let (loss, grad) = mse_batch(pred.view(), y.view());
            let (grads, grad_sel) = trunk.backward(&cache, grad.view())?;
            let grad_logits = concrete_backward(x.view(), weights.view(), selected.view(), grad_sel.view(), tau)?;
            trunk_opt.update(&mut trunk, &grads)?;
            logit_opt.update(
                selector.logits_mut().as_slice_mut().expect("standard layout logits"),
                grad_logits.as_slice().expect("standard layout"),
            )?;
            loss_sum += loss * b as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = rsd_validation_loss(&selector, &trunk, data.x_val.view(), data.y_val.view())?;
        history.push(EpochRecord { epoch, train_loss, val_loss, tau: Some(tau) });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = (selector.clone(), trunk.clone());
        }
        if stop {
            log::info!("rsd early stop at epoch {epoch} (best {})", stopper.best_epoch);
            break;
        }
    }
    let (selector, trunk) = best;
    Ok(TrainedRsd {
        selector,
        trunk,
        scaler: data.scaler,
        target_scaler: data.target_scaler,
        schedule,
        history,
        best_epoch: stopper.best_epoch,
    })
}

/// Test-time selection with per-row diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub selection: Selection,
    /// Winning logit minus runner-up per row; infinite when `N = 1`.
    pub margins: Vec<f64>,
}

pub fn run_selection(trained: &TrainedRsd) -> SelectionReport {
    let selection = hard_select(&trained.selector);
    let margins = trained
        .selector
        .logits()
        .outer_iter()
        .zip(&selection.indices)
        .map(|(row, &win)| {
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != win)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            row[win] - runner_up
        })
        .collect();
    SelectionReport { selection, margins }
}

/// Feature columns used by a selection of RRH indices.
pub fn feature_columns(indices: &[usize], mode: FeatureMode) -> Vec<usize> {
    match mode {
        FeatureMode::Magnitude => indices.to_vec(),
        FeatureMode::ComplexSplit => indices.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect(),
    }
}

/// Trains the localization-and-uncertainty network on the selected RRHs.
///
/// Outputs are `(μ_x, μ_y, s_x, s_y)` with `s` the per-axis log-variance,
/// trained with the Gaussian negative log-likelihood.
pub fn train_lud(dataset: &Dataset, selected_indices: &[usize], config: &TrainConfig) -> Result<TrainedLud> {
    config.validate()?;
    if selected_indices.is_empty() {
        return Err(Error::EmptyInput("selected RRH indices"));
    }
    if let Some(&bad) = selected_indices.iter().find(|&&i| i >= dataset.n) {
        return Err(Error::IndexOutOfRange { index: bad, len: dataset.n });
    }
    let columns = feature_columns(selected_indices, dataset.feature_mode);
    let data = prepare(dataset, Some(&columns), config)?;

    let mut init_rng = stream_rng(config.seed, STREAM_INIT);
    let mut trunk = Mlp::new(&config.widths(columns.len(), 4), config.dropout, &mut init_rng)?;
    let mut opt = MlpAdam::new(&trunk, config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = trunk.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.x_train.nrows()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = stream_rng(config.seed, STREAM_EPOCH_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, config.batch_size) {
            let x = data.x_train.select(Axis(0), batch);
            let y = data.y_train.select(Axis(0), batch);
            let masks = trunk.sample_masks(batch.len(), &mut rng);
            let (out, cache) = trunk.forward(x.view(), Some(&masks))?;
            let (loss, grad) = gaussian_nll_batch(out.view(), y.view());
            let (grads, _) = trunk.backward(&cache, grad.view())?;
            opt.update(&mut trunk, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_out = trunk.predict(data.x_val.view())?;
        let val_loss = gaussian_nll_batch(val_out.view(), data.y_val.view()).0;
        history.push(EpochRecord { epoch, train_loss, val_loss, tau: None });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = trunk.clone();
        }
        if stop {
            log::info!("lud early stop at epoch {epoch} (best {})", stopper.best_epoch);
            break;
        }
    }
    Ok(TrainedLud {
        trunk: best,
        scaler: data.scaler,
        target_scaler: data.target_scaler,
        selected_indices: selected_indices.to_vec(),
        n: dataset.n,
        feature_mode: dataset.feature_mode,
        mc_passes: config.mc_passes,
        seed: config.seed,
        history,
        best_epoch: stopper.best_epoch,
    })
}

impl TrainedLud {
    /// Columns of a full feature row consumed by this model.
    pub fn input_columns(&self) -> Vec<usize> {
        feature_columns(&self.selected_indices, self.feature_mode)
    }

    pub fn input_width(&self) -> usize {
        self.trunk.input_width()
    }

    /// Batch prediction on already-gathered raw features (`B × input_width`).
    pub fn predict_batch(&self, features: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        if features.ncols() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "{} features for a model expecting {}",
                features.ncols(),
                self.input_width()
            )));
        }
        let x = self.scaler.transform(features)?;
        let out = self.trunk.predict(x.view())?;
        let b = x.nrows();

        let mut epistemic = vec![[0.0; 2]; b];
        if self.trunk.has_dropout() && self.mc_passes > 1 {
            let mut rng = stream_rng(self.seed, STREAM_MC);
            let mut sum = Array2::<f64>::zeros((b, 2));
            let mut sum_sq = Array2::<f64>::zeros((b, 2));
            for _ in 0..self.mc_passes {
                let masks = self.trunk.sample_masks(b, &mut rng);
                let (o, _) = self.trunk.forward(x.view(), Some(&masks))?;
                let mu = o.slice(ndarray::s![.., 0..2]);
                sum += &mu;
                sum_sq += &mu.mapv(|v| v * v);
            }
            let k = self.mc_passes as f64;
            for (r, e) in epistemic.iter_mut().enumerate() {
                let var = [0, 1].map(|d| {
                    let mean = sum[[r, d]] / k;
                    (sum_sq[[r, d]] / k - mean * mean).max(0.0)
                });
                *e = self.target_scaler.unscale_variance(var);
            }
        }
        Ok((0..b)
            .map(|r| {
                let pos = self.target_scaler.unscale_point([out[[r, 0]], out[[r, 1]]]);
                let aleatoric = self.target_scaler.unscale_variance([out[[r, 2]].exp(), out[[r, 3]].exp()]);
                Prediction { position: Position2D::new(pos[0], pos[1]), aleatoric, epistemic: epistemic[r] }
            })
            .collect())
    }

    /// Single-sample prediction on gathered raw features.
    pub fn predict(&self, features: ArrayView1<f64>) -> Result<Prediction> {
        let x = features.insert_axis(Axis(0));
        Ok(self.predict_batch(x)?[0])
    }

    /// Mean position estimates for full dataset rows, dropout off.
    pub fn predict_positions(&self, dataset: &Dataset) -> Result<Vec<Position2D>> {
        self.check_dataset(dataset)?;
        let x = gather_features(dataset.features.view(), &self.input_columns())?;
        let out = self.trunk.predict(self.scaler.transform(x.view())?.view())?;
        Ok(out
            .outer_iter()
            .map(|o| {
                let p = self.target_scaler.unscale_point([o[0], o[1]]);
                Position2D::new(p[0], p[1])
            })
            .collect())
    }

    /// Full predictions (with uncertainty) for dataset rows.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Prediction>> {
        self.check_dataset(dataset)?;
        let x = gather_features(dataset.features.view(), &self.input_columns())?;
        self.predict_batch(x.view())
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.n != self.n || dataset.feature_mode != self.feature_mode {
            return Err(Error::ShapeMismatch(format!(
                "model trained on N={} ({}), dataset has N={} ({})",
                self.n,
                self.feature_mode.name(),
                dataset.n,
                dataset.feature_mode.name()
            )));
        }
        Ok(())
    }
}
