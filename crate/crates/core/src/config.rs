//! Flat `block.key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, and every value is validated before any work starts.

use std::str::FromStr;

use crate::channel_sim::{Cluster, FeatureMode, Layout, Position2D, Roi, ScenarioConfig, SpreadKind};
use crate::error::{Error, Result};
use crate::evaluation::Method;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub r: usize,
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { r: 8000, feature_mode: FeatureMode::Magnitude, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub percentiles: Vec<f64>,
    pub grid_step: f64,
    pub samples_per_cell: usize,
    pub map_seed: u64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            percentiles: vec![0.5, 0.9],
            grid_step: 5.0,
            samples_per_cell: 4,
            map_seed: 7,
            seeds: vec![1, 2, 3],
            methods: vec![Method::Rsd, Method::Cg, Method::Random, Method::Full],
            top_k: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub scenario_seed: u64,
    pub dataset: DatasetConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            scenario_seed: 1,
            dataset: DatasetConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigLine { line, msg: format!("{key}: cannot parse {value:?}") })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

fn parse_fixed<const K: usize>(line: usize, key: &str, value: &str) -> Result<[f64; K]> {
    let v: Vec<f64> = parse_list(line, key, value)?;
    v.try_into()
        .map_err(|_| Error::ConfigLine { line, msg: format!("{key}: expected {K} comma-separated numbers") })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut layout = "grid".to_string();
        let mut center: Option<Position2D> = None;
        let mut diameter = 1.5;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::ConfigLine { line, msg: format!("expected key = value, got {content:?}") })?;
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigLine { line, msg: format!("duplicate key {key}") });
            }
            let s = &mut cfg.scenario;
            let t = &mut cfg.training;
            let e = &mut cfg.evaluation;
            match key {
                "scenario.n" => s.n = parse_num(line, key, value)?,
                "scenario.k" => s.k = parse_num(line, key, value)?,
                "scenario.gamma" => s.gamma = parse_num(line, key, value)?,
                "scenario.wavelength" => s.wavelength = parse_num(line, key, value)?,
                "scenario.roi" => {
                    let [a, b, c, d] = parse_fixed::<4>(line, key, value)?;
                    s.roi = Roi::new(a, b, c, d).map_err(|err| Error::ConfigLine { line, msg: err.to_string() })?;
                }
                "scenario.layout" => match value {
                    "grid" | "circular" => layout = value.to_string(),
                    _ => return Err(Error::ConfigLine { line, msg: format!("{key}: expected grid or circular") }),
                },
                "scenario.array_center" => {
                    let [x, y] = parse_fixed::<2>(line, key, value)?;
                    center = Some(Position2D::new(x, y));
                }
                "scenario.array_diameter" => diameter = parse_num(line, key, value)?,
                "scenario.clusters" => {
                    s.clusters = value
                        .split(';')
                        .map(str::trim)
                        .filter(|c| !c.is_empty())
                        .map(|c| {
                            let [mx, my, sx, sy] = parse_fixed::<4>(line, key, c)?;
                            Ok(Cluster { mean: (mx, my), spread: (sx, sy) })
                        })
                        .collect::<Result<_>>()?;
                }
                "scenario.spread_kind" => {
                    s.spread_kind = match value {
                        "std" => SpreadKind::StdDev,
                        "variance" => SpreadKind::Variance,
                        _ => return Err(Error::ConfigLine { line, msg: format!("{key}: expected std or variance") }),
                    }
                }
                "scenario.min_scatter_rrh_dist" => s.min_scatter_rrh_dist = parse_num(line, key, value)?,
                "scenario.min_user_rrh_dist" => s.min_user_rrh_dist = parse_num(line, key, value)?,
                "scenario.noise_std" => s.noise_std = parse_num(line, key, value)?,
                "scenario.seed" => cfg.scenario_seed = parse_num(line, key, value)?,
                "dataset.r" => cfg.dataset.r = parse_num(line, key, value)?,
                "dataset.feature_mode" => {
                    cfg.dataset.feature_mode = FeatureMode::parse(value).ok_or_else(|| Error::ConfigLine {
                        line,
                        msg: format!("{key}: expected magnitude or complex_split"),
                    })?
                }
                "dataset.seed" => cfg.dataset.seed = parse_num(line, key, value)?,
                "training.epochs" => t.epochs = parse_num(line, key, value)?,
                "training.learning_rate" => t.learning_rate = parse_num(line, key, value)?,
                "training.batch_size" => t.batch_size = parse_num(line, key, value)?,
                "training.dropout" => t.dropout = parse_num(line, key, value)?,
                "training.tau_start" => t.tau_start = parse_num(line, key, value)?,
                "training.tau_end" => t.tau_end = parse_num(line, key, value)?,
                "training.patience" => t.patience = parse_num(line, key, value)?,
                "training.m" => t.m = parse_num(line, key, value)?,
                "training.seed" => t.seed = parse_num(line, key, value)?,
                "training.split_ratio" => t.split_ratio = parse_num(line, key, value)?,
                "training.validation_fraction" => t.validation_fraction = parse_num(line, key, value)?,
                "training.split_seed" => t.split_seed = parse_num(line, key, value)?,
                "training.hidden_layers" => t.hidden_layers = parse_num(line, key, value)?,
                "training.hidden_units" => t.hidden_units = parse_num(line, key, value)?,
                "training.mc_passes" => t.mc_passes = parse_num(line, key, value)?,
                "evaluation.percentiles" => e.percentiles = parse_list(line, key, value)?,
                "evaluation.grid_step" => e.grid_step = parse_num(line, key, value)?,
                "evaluation.samples_per_cell" => e.samples_per_cell = parse_num(line, key, value)?,
                "evaluation.map_seed" => e.map_seed = parse_num(line, key, value)?,
                "evaluation.seeds" => e.seeds = parse_list(line, key, value)?,
                "evaluation.methods" => {
                    e.methods = value
                        .split(',')
                        .map(str::trim)
                        .map(|m| {
                            Method::parse(m).ok_or_else(|| Error::ConfigLine {
                                line,
                                msg: format!("{key}: unknown method {m:?}"),
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "evaluation.top_k" => e.top_k = parse_num(line, key, value)?,
                _ => return Err(Error::ConfigLine { line, msg: format!("unknown key {key}") }),
            }
        }
        cfg.scenario.layout = match layout.as_str() {
            "circular" => Layout::Circular { center: center.unwrap_or_else(|| cfg.scenario.roi.center()), diameter },
            _ => Layout::Grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let s = &self.scenario;
        if s.n == 0 {
            return bad("scenario.n must be >= 1".into());
        }
        if let Layout::Grid = s.layout {
            let side = (s.n as f64).sqrt().round() as usize;
            if side * side != s.n {
                return Err(Error::NonSquareN(s.n));
            }
        }
        if let Layout::Circular { diameter, .. } = s.layout {
            if !(diameter > 0.0) {
                return bad("scenario.array_diameter must be > 0".into());
            }
        }
        if !(s.wavelength > 0.0) || !(s.gamma >= 0.0) || !(s.noise_std >= 0.0) {
            return bad("wavelength must be > 0, gamma and noise_std >= 0".into());
        }
        if !(s.min_user_rrh_dist >= 0.0) || !(s.min_scatter_rrh_dist >= 0.0) {
            return bad("minimum distances must be >= 0".into());
        }
        if s.k > 0 && s.clusters.is_empty() {
            return bad("scenario.k > 0 needs scenario.clusters".into());
        }
        if s.clusters.iter().any(|c| !(c.spread.0 > 0.0 && c.spread.1 > 0.0)) {
            return bad("cluster spreads must be > 0".into());
        }
        if self.dataset.r < 10 {
            return bad(format!("dataset.r must be >= 10 (got {})", self.dataset.r));
        }
        self.training.validate()?;
        if self.training.m > s.n {
            return bad(format!("training.m = {} exceeds scenario.n = {}", self.training.m, s.n));
        }
        let e = &self.evaluation;
        if e.percentiles.is_empty() || e.percentiles.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad("evaluation.percentiles must be fractions in (0, 1]".into());
        }
        if !(e.grid_step > 0.0) || e.samples_per_cell == 0 {
            return bad("evaluation.grid_step must be > 0 and samples_per_cell >= 1".into());
        }
        if e.seeds.is_empty() || e.methods.is_empty() || e.top_k == 0 {
            return bad("evaluation.seeds, evaluation.methods and evaluation.top_k must be non-empty".into());
        }
        Ok(())
    }
}
