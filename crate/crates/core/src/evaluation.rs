//! Localization metrics, selection statistics and method comparisons.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel_sim::{channel_features, channel_vector, Dataset, Position2D, Scenario, MAX_REDRAWS};
use crate::error::{Error, Result};
use crate::selector::{gather_features, select_cg, select_random};
use crate::training::{run_selection, split_dataset, train_lud, train_rsd, Split, TrainConfig, TrainedLud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub true_position: Position2D,
    pub estimated_position: Position2D,
    pub error: f64,
}

impl ErrorSample {
    pub fn new(true_position: Position2D, estimated_position: Position2D) -> Self {
        Self { true_position, estimated_position, error: true_position.distance(&estimated_position) }
    }
}

pub fn error_samples(truth: &[Position2D], estimates: &[Position2D]) -> Vec<ErrorSample> {
    truth.iter().zip(estimates).map(|(t, e)| ErrorSample::new(*t, *e)).collect()
}

pub fn rmse(samples: &[ErrorSample]) -> Result<f64> {
    rmse_of_errors(&samples.iter().map(|s| s.error).collect::<Vec<_>>())
}

pub fn rmse_of_errors(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("rmse"));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Empirical CDF as a right-continuous step function.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    /// Fraction of samples `≤ value`.
    pub fn eval(&self, value: f64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= value);
        count as f64 / self.sorted.len() as f64
    }

    /// Distinct values with the cumulative fraction reached at each.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (k, &v) in self.sorted.iter().enumerate() {
            let frac = (k + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = frac,
                _ => out.push((v, frac)),
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Lowest sample `v` with `eval(v) ≥ p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        // smallest k with k/n >= p, computed on the same k/n grid as `eval`
        let mut k = ((p * n as f64).ceil() as usize).clamp(1, n);
        while k > 1 && (k - 1) as f64 / n as f64 >= p {
            k -= 1;
        }
        while k < n && (k as f64 / n as f64) < p {
            k += 1;
        }
        self.sorted[k - 1]
    }
}

pub fn ecdf(errors: &[f64]) -> Result<Ecdf> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("ecdf"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Ecdf { sorted })
}

/// Inverted-ECDF percentile, no interpolation. `p` is a fraction in `(0, 1]`.
pub fn percentile(errors: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!("percentile fraction {p} outside (0, 1]")));
    }
    Ok(ecdf(errors)?.quantile(p))
}

/// Occurrence counts of RRH indices across several selections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionFrequency {
    pub counts: BTreeMap<usize, usize>,
    pub runs: usize,
}

impl SelectionFrequency {
    pub fn from_selections(selections: &[Vec<usize>]) -> Result<Self> {
        if selections.is_empty() {
            return Err(Error::EmptyInput("selection_frequency"));
        }
        let mut counts = BTreeMap::new();
        for &i in selections.iter().flatten() {
            *counts.entry(i).or_insert(0) += 1;
        }
        Ok(Self { counts, runs: selections.len() })
    }

    /// Top `k` indices by count, lower index first on ties.
    pub fn top(&self, k: usize) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.counts.iter().map(|(&i, &c)| (i, c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }
}

pub fn selection_frequency(selections: &[Vec<usize>], top_k: usize) -> Result<Vec<(usize, usize)>> {
    Ok(SelectionFrequency::from_selections(selections)?.top(top_k))
}

/// Min–max normalization onto `[0, 1]`; constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapCell {
    pub cell_x: usize,
    pub cell_y: usize,
    /// RMSE over the cell's samples, meters.
    pub error: f64,
    /// Mean aleatoric standard deviation, meters.
    pub uncertainty: f64,
    pub norm_error: f64,
    pub norm_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub cols: usize,
    pub rows: usize,
    pub grid_step: f64,
    pub cells: Vec<MapCell>,
}

/// Spatial error and uncertainty over a regular ROI grid.
///
/// Each cell is probed with `samples_per_cell` fresh channel samples drawn
/// uniformly inside the cell (respecting the RRH exclusion radius). Error and
/// uncertainty are min–max normalized independently over the grid.
pub fn error_map(
    trained: &TrainedLud,
    scenario: &Scenario,
    grid_step: f64,
    samples_per_cell: usize,
    seed: u64,
) -> Result<ErrorMap> {
    if !(grid_step > 0.0) || samples_per_cell == 0 {
        return Err(Error::InvalidConfig(format!(
            "error map needs grid_step > 0 and samples_per_cell >= 1 (got {grid_step}, {samples_per_cell})"
        )));
    }
    if scenario.num_rrhs() != trained.n {
        return Err(Error::ShapeMismatch(format!(
            "model trained for N={}, scenario has {}",
            trained.n,
            scenario.num_rrhs()
        )));
    }
    let roi = *scenario.roi();
    let cols = (roi.width() / grid_step).ceil().max(1.0) as usize;
    let rows = (roi.height() / grid_step).ceil().max(1.0) as usize;
    let columns = trained.input_columns();

    let mut positions = Vec::with_capacity(cols * rows * samples_per_cell);
    let mut features = Vec::new();
    for cy in 0..rows {
        for cx in 0..cols {
            let x0 = roi.min_x + cx as f64 * grid_step;
            let y0 = roi.min_y + cy as f64 * grid_step;
            let x1 = (x0 + grid_step).min(roi.max_x);
            let y1 = (y0 + grid_step).min(roi.max_y);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((cy * cols + cx) as u64);
            for _ in 0..samples_per_cell {
                let p = draw_in_box(scenario, (x0, y0, x1, y1), &mut rng)?;
                let h = channel_vector(&p, scenario)?;
                let f = channel_features(&h.channel, trained.feature_mode);
                features.extend(columns.iter().map(|&c| f[c]));
                positions.push(p);
            }
        }
    }
    let x = Array2::from_shape_vec((positions.len(), columns.len()), features)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let preds = trained.predict_batch(x.view())?;

    let mut errors = Vec::with_capacity(cols * rows);
    let mut uncertainties = Vec::with_capacity(cols * rows);
    for cell in preds.chunks(samples_per_cell).zip(positions.chunks(samples_per_cell)) {
        let errs: Vec<f64> = cell.0.iter().zip(cell.1).map(|(p, t)| p.position.distance(t)).collect();
        errors.push(rmse_of_errors(&errs)?);
        let std: f64 = cell.0.iter().map(|p| (p.aleatoric[0] + p.aleatoric[1]).sqrt()).sum::<f64>() / samples_per_cell as f64;
        uncertainties.push(std);
    }
    let ne = min_max_normalize(&errors);
    let nu = min_max_normalize(&uncertainties);
    let cells = (0..cols * rows)
        .map(|i| MapCell {
            cell_x: i % cols,
            cell_y: i / cols,
            error: errors[i],
            uncertainty: uncertainties[i],
            norm_error: ne[i],
            norm_uncertainty: nu[i],
        })
        .collect();
    Ok(ErrorMap { cols, rows, grid_step, cells })
}

fn draw_in_box(scenario: &Scenario, (x0, y0, x1, y1): (f64, f64, f64, f64), rng: &mut ChaCha8Rng) -> Result<Position2D> {
    use rand::Rng;
    for _ in 0..MAX_REDRAWS {
        let p = Position2D::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        if scenario.check_user(&p).is_ok() {
            return Ok(p);
        }
    }
    Err(Error::ExhaustedRedraws(MAX_REDRAWS))
}

/// Metrics of one trained model on one set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub errors: Vec<f64>,
    pub ecdf: Vec<(f64, f64)>,
    /// `(p, meters)` pairs in the requested order.
    pub percentiles: Vec<(f64, f64)>,
    pub unique_selected: usize,
    pub runtime: f64,
}

impl EvalReport {
    pub fn percentile(&self, p: f64) -> Option<f64> {
        self.percentiles.iter().find(|(q, _)| *q == p).map(|(_, v)| *v)
    }
}

/// Evaluates a trained LUD on the given rows of `dataset`.
pub fn evaluate(trained: &TrainedLud, dataset: &Dataset, rows: &[usize], percentiles: &[f64]) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let start = Instant::now();
    let subset = dataset.subset(rows);
    let est = trained.predict_positions(&subset)?;
    let samples = error_samples(&subset.positions, &est);
    let errors: Vec<f64> = samples.iter().map(|s| s.error).collect();
    let curve = ecdf(&errors)?;
    let percentiles = percentiles
        .iter()
        .map(|&p| percentile(&errors, p).map(|v| (p, v)))
        .collect::<Result<Vec<_>>>()?;
    let mut uniq = trained.selected_indices.clone();
    uniq.sort_unstable();
    uniq.dedup();
    Ok(EvalReport {
        rmse: rmse(&samples)?,
        ecdf: curve.points(),
        errors,
        percentiles,
        unique_selected: uniq.len(),
        runtime: start.elapsed().as_secs_f64(),
    })
}

/// RRH selection strategies compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Rsd,
    Cg,
    Random,
    Full,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rsd => "rsd",
            Method::Cg => "cg",
            Method::Random => "random",
            Method::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rsd" => Some(Method::Rsd),
            "cg" => Some(Method::Cg),
            "random" => Some(Method::Random),
            "full" => Some(Method::Full),
            _ => None,
        }
    }
}

/// Mean and 95 % normal-approximation half-width of per-seed values.
/// A single value gives a zero half-width.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean_ci95"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * (var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub m: usize,
    pub seed_count: usize,
    pub rmse_mean: f64,
    pub ci95: f64,
    /// Set when only one seed was run and the half-width is meaningless.
    pub ci_degenerate: bool,
    /// Mean number of distinct RRHs actually used.
    pub unique_selected: f64,
    pub p50: f64,
    pub p90: f64,
}

impl MethodSummary {
    pub fn from_runs(method: Method, m: usize, runs: &[&MethodRun]) -> Result<Self> {
        let rmses: Vec<f64> = runs.iter().map(|r| r.report.rmse).collect();
        let (rmse_mean, ci95) = mean_ci95(&rmses)?;
        let avg = |f: &dyn Fn(&MethodRun) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / runs.len() as f64;
        Ok(Self {
            method,
            m,
            seed_count: runs.len(),
            rmse_mean,
            ci95,
            ci_degenerate: runs.len() < 2,
            unique_selected: avg(&|r| r.report.unique_selected as f64),
            p50: avg(&|r| percentile(&r.report.errors, 0.5).unwrap_or(f64::NAN)),
            p90: avg(&|r| percentile(&r.report.errors, 0.9).unwrap_or(f64::NAN)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub selection: Vec<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub summaries: Vec<MethodSummary>,
    pub runs: Vec<MethodRun>,
}

/// Picks RRHs for `method` using only the training split.
pub fn select_for_method(dataset: &Dataset, split: &Split, method: Method, config: &TrainConfig) -> Result<Vec<usize>> {
    match method {
        Method::Full => Ok((0..dataset.n).collect()),
        Method::Cg => select_cg(&dataset.subset(&split.train), config.m),
        Method::Random => select_random(dataset.n, config.m, &mut ChaCha8Rng::seed_from_u64(config.seed)),
        Method::Rsd => Ok(run_selection(&train_rsd(dataset, config)?).selection.indices),
    }
}

/// Trains one LUD per `(method, seed)` and reports RMSE statistics.
/// The data split is fixed by `base.split_seed`; seeds vary initialization,
/// noise and the random baseline.
pub fn compare_methods(
    dataset: &Dataset,
    methods: &[Method],
    base: &TrainConfig,
    seeds: &[u64],
    percentiles: &[f64],
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("seed list"));
    }
    let split = split_dataset(dataset.len(), base.split_ratio, base.validation_fraction, base.split_seed)?;
    let mut runs = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let config = TrainConfig { seed, ..base.clone() };
            let selection = select_for_method(dataset, &split, method, &config)?;
            let lud = train_lud(dataset, &selection, &config)?;
            let report = evaluate(&lud, dataset, &split.test, percentiles)?;
            log::info!("{} seed {seed}: rmse {:.4} m", method.name(), report.rmse);
            runs.push(MethodRun { method, seed, selection, report });
        }
    }
    let summaries = methods
        .iter()
        .map(|&method| {
            let mine: Vec<&MethodRun> = runs.iter().filter(|r| r.method == method).collect();
            let m = if method == Method::Full { dataset.n } else { base.m };
            MethodSummary::from_runs(method, m, &mine)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { summaries, runs })
}

/// Gathers selected columns of a dataset's feature matrix.
pub fn selected_features(dataset: &Dataset, columns: &[usize]) -> Result<Array2<f64>> {
    gather_features(dataset.features.view(), columns)
}
