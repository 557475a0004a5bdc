//! Spatially consistent scatterer channel model.
//!
//! Every coefficient depends only on the distances between the user, the
//! scatterers and the RRHs. A user-to-RRH coefficient is the free-space LOS
//! path plus one single-bounce path per scatterer:
//!
//! ```text
//! h = λ/(4π d) e^{i 2π d/λ} + λγ/(4π)^{3/2} Σ_k e^{i(φ_k + 2π(d1_k + d2_k)/λ)} / (d1_k d2_k)
//! ```
//!
//! [`channel_coefficient`] evaluates the collapsed form above. The product
//! form `α_{r,n} + Σ_k β_{r,k} α_{k,n}` is kept in
//! [`channel_coefficient_composed`] and serves as the cross-check.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rejected draws allowed per scatterer or user position before giving up.
pub const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

impl Position2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    /// Rotation about the origin, counter-clockwise.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    fn as_tuple(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Axis-aligned region of interest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Roi {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let ok = [min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite())
            && max_x > min_x
            && max_y > min_y;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "degenerate ROI [{min_x}, {max_x}] x [{min_y}, {max_y}]"
            )));
        }
        Ok(Self { min_x, min_y, max_x, max_y })
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Position2D {
        Position2D::new(0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))
    }

    pub fn contains(&self, p: &Position2D) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }
}

impl Default for Roi {
    fn default() -> Self {
        Self { min_x: -50.0, min_y: -50.0, max_x: 50.0, max_y: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Position2D,
    /// Radians in `[0, 2π)`.
    pub phase_shift: f64,
    pub amplitude_gain: f64,
}

/// The frozen physical world: RRHs, scatterers and propagation constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    rrh_positions: Vec<Position2D>,
    scatterers: Vec<Scatterer>,
    roi: Roi,
    wavelength: f64,
    gamma: f64,
    min_user_rrh_dist: f64,
    noise_std: f64,
    seed: u64,
}

impl Scenario {
    pub fn new(
        rrh_positions: Vec<Position2D>,
        scatterers: Vec<Scatterer>,
        roi: Roi,
        wavelength: f64,
        gamma: f64,
        min_user_rrh_dist: f64,
        seed: u64,
    ) -> Result<Self> {
        if rrh_positions.is_empty() {
            return Err(Error::InvalidConfig("scenario needs at least one RRH".into()));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::InvalidConfig(format!("wavelength must be > 0, got {wavelength}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(min_user_rrh_dist >= 0.0) {
            return Err(Error::InvalidConfig("min_user_rrh_dist must be >= 0".into()));
        }
        for (i, a) in rrh_positions.iter().enumerate() {
            if !(a.x.is_finite() && a.y.is_finite()) {
                return Err(Error::InvalidConfig(format!("RRH {i} has a non-finite position")));
            }
            if rrh_positions[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidConfig(format!("RRH {i} duplicates an earlier RRH")));
            }
        }
        for s in &scatterers {
            if !(0.0..2.0 * PI).contains(&s.phase_shift) || !(s.amplitude_gain >= 0.0) {
                return Err(Error::InvalidConfig(format!("invalid scatterer {s:?}")));
            }
            if let Some(q) = rrh_positions.iter().find(|q| q.distance(&s.position) <= 0.0) {
                return Err(Error::ZeroDistance { a: s.position.as_tuple(), b: q.as_tuple() });
            }
        }
        Ok(Self {
            rrh_positions,
            scatterers,
            roi,
            wavelength,
            gamma,
            min_user_rrh_dist,
            noise_std: 0.0,
            seed,
        })
    }

    /// Standard deviation of optional complex AWGN added per coefficient
    /// during dataset generation. Zero disables it.
    pub fn with_noise_std(mut self, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {noise_std}")));
        }
        self.noise_std = noise_std;
        Ok(self)
    }

    pub fn rrh_positions(&self) -> &[Position2D] {
        &self.rrh_positions
    }

    pub fn scatterers(&self) -> &[Scatterer] {
        &self.scatterers
    }

    pub fn roi(&self) -> &Roi {
        &self.roi
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn min_user_rrh_dist(&self) -> f64 {
        self.min_user_rrh_dist
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_rrhs(&self) -> usize {
        self.rrh_positions.len()
    }

    /// Checks the user-to-RRH minimum distance.
    pub fn check_user(&self, user: &Position2D) -> Result<()> {
        match self.rrh_positions.iter().position(|q| user.distance(q) <= self.min_user_rrh_dist) {
            Some(rrh) => Err(Error::MinDistanceViolation {
                x: user.x,
                y: user.y,
                rrh,
                min: self.min_user_rrh_dist,
            }),
            None => Ok(()),
        }
    }
}

fn checked_distance(a: &Position2D, b: &Position2D) -> Result<f64> {
    let d = a.distance(b);
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::ZeroDistance { a: a.as_tuple(), b: b.as_tuple() })
    }
}

fn wavenumber(wavelength: f64) -> f64 {
    2.0 * PI / wavelength
}

/// Free-space path coefficient `λ/(4π d) · e^{i 2π d/λ}`.
pub fn los_coefficient(a: &Position2D, b: &Position2D, wavelength: f64) -> Result<Complex64> {
    let d = checked_distance(a, b)?;
    Ok(Complex64::from_polar(wavelength / (4.0 * PI * d), wavenumber(wavelength) * d))
}

/// Single-bounce term `u(p)` for one scatterer, without the `λγ/(4π)^{3/2}` prefactor.
pub fn scatter_term(
    user: &Position2D,
    scatterer: &Scatterer,
    rrh: &Position2D,
    wavelength: f64,
) -> Result<Complex64> {
    let d1 = checked_distance(user, &scatterer.position)?;
    let d2 = checked_distance(&scatterer.position, rrh)?;
    let phase = scatterer.phase_shift + wavenumber(wavelength) * (d1 + d2);
    Ok(Complex64::from_polar(1.0 / (d1 * d2), phase))
}

/// Channel between one user position and one RRH.
pub fn channel_coefficient(user: &Position2D, rrh: &Position2D, scenario: &Scenario) -> Result<Complex64> {
    let wl = scenario.wavelength;
    let mut h = los_coefficient(user, rrh, wl)?;
    if scenario.scatterers.is_empty() {
        return Ok(h);
    }
    let mut sum = Complex64::new(0.0, 0.0);
    for s in &scenario.scatterers {
        sum += scatter_term(user, s, rrh, wl)?;
    }
    h += sum * (wl * scenario.gamma / (4.0 * PI).powf(1.5));
    Ok(h)
}

/// Scattering coefficient `β_{i,j} = δ_j / (√(4π) ‖v_i − v_j‖) · e^{i 2π‖v_i − v_j‖/λ}`
/// with `δ_j = γ_j e^{iφ_j}`.
pub fn scattering_coefficient(from: &Position2D, scatterer: &Scatterer, wavelength: f64) -> Result<Complex64> {
    let d = checked_distance(from, &scatterer.position)?;
    let delta = Complex64::from_polar(scatterer.amplitude_gain, scatterer.phase_shift);
    Ok(delta * Complex64::from_polar(1.0 / ((4.0 * PI).sqrt() * d), wavenumber(wavelength) * d))
}

/// Same channel as [`channel_coefficient`], built as `α_{r,n} + Σ_k β_{r,k} α_{k,n}`.
///
/// Uses each scatterer's own `amplitude_gain`; generated scenarios set it to γ.
pub fn channel_coefficient_composed(user: &Position2D, rrh: &Position2D, scenario: &Scenario) -> Result<Complex64> {
    let wl = scenario.wavelength;
    let mut h = los_coefficient(user, rrh, wl)?;
    for s in &scenario.scatterers {
        let beta = scattering_coefficient(user, s, wl)?;
        let alpha = los_coefficient(&s.position, rrh, wl)?;
        h += beta * alpha;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub user_position: Position2D,
    pub channel: Vec<Complex64>,
}

/// Channel vector across all RRHs, in RRH index order.
pub fn channel_vector(user: &Position2D, scenario: &Scenario) -> Result<ChannelSample> {
    scenario.check_user(user)?;
    let channel = scenario
        .rrh_positions
        .iter()
        .map(|q| channel_coefficient(user, q, scenario))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSample { user_position: *user, channel })
}

/// RRH placement strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// `√N × √N` grid with one RRH at the center of each grid cell.
    Grid,
    /// Co-located circular array, e.g. a centralized massive MIMO base station.
    Circular { center: Position2D, diameter: f64 },
}

/// How the per-axis cluster spread numbers are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpreadKind {
    StdDev,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cluster {
    pub mean: (f64, f64),
    pub spread: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n: usize,
    pub k: usize,
    pub layout: Layout,
    pub roi: Roi,
    pub wavelength: f64,
    pub gamma: f64,
    pub clusters: Vec<Cluster>,
    pub spread_kind: SpreadKind,
    pub min_scatter_rrh_dist: f64,
    pub min_user_rrh_dist: f64,
    pub noise_std: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 16,
            k: 100,
            layout: Layout::Grid,
            roi: Roi::default(),
            wavelength: 0.125,
            gamma: 3.0,
            clusters: vec![
                Cluster { mean: (0.0, -60.0), spread: (100.0, 1.0) },
                Cluster { mean: (60.0, 0.0), spread: (1.0, 100.0) },
                Cluster { mean: (0.0, 60.0), spread: (100.0, 1.0) },
            ],
            spread_kind: SpreadKind::StdDev,
            min_scatter_rrh_dist: 0.5,
            min_user_rrh_dist: 0.5,
            noise_std: 0.0,
        }
    }
}

/// Grid of `n` RRHs, one per cell of a `√n × √n` partition of the ROI.
pub fn place_grid(roi: &Roi, n: usize) -> Result<Vec<Position2D>> {
    let side = (n as f64).sqrt().round() as usize;
    if n == 0 || side * side != n {
        return Err(Error::NonSquareN(n));
    }
    let dx = roi.width() / side as f64;
    let dy = roi.height() / side as f64;
    let mut out = Vec::with_capacity(n);
    for row in 0..side {
        for col in 0..side {
            out.push(Position2D::new(
                roi.min_x + (col as f64 + 0.5) * dx,
                roi.min_y + (row as f64 + 0.5) * dy,
            ));
        }
    }
    Ok(out)
}

/// `n` points equally spaced on a circle, starting at angle 0 and going counter-clockwise.
pub fn place_circular_array(center: Position2D, diameter: f64, n: usize) -> Result<Vec<Position2D>> {
    if !(diameter > 0.0) || n == 0 {
        return Err(Error::InvalidConfig(format!(
            "circular array needs diameter > 0 and N >= 1 (got {diameter}, {n})"
        )));
    }
    let r = 0.5 * diameter;
    Ok((0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            Position2D::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect())
}

/// Builds a scenario deterministically from `(config, seed)`.
///
/// Scatterers are assigned to clusters round-robin and drawn from per-axis
/// Gaussians; draws closer than `min_scatter_rrh_dist` to any RRH are
/// rejected and redrawn.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    let rrhs = match config.layout {
        Layout::Grid => place_grid(&config.roi, config.n)?,
        Layout::Circular { center, diameter } => place_circular_array(center, diameter, config.n)?,
    };
    if config.k > 0 && config.clusters.is_empty() {
        return Err(Error::InvalidConfig("K > 0 requires at least one cluster".into()));
    }
    let normals = config
        .clusters
        .iter()
        .map(|c| {
            let (sx, sy) = match config.spread_kind {
                SpreadKind::StdDev => c.spread,
                SpreadKind::Variance => (c.spread.0.sqrt(), c.spread.1.sqrt()),
            };
            let nx = Normal::new(c.mean.0, sx)
                .map_err(|e| Error::InvalidConfig(format!("cluster spread: {e}")))?;
            let ny = Normal::new(c.mean.1, sy)
                .map_err(|e| Error::InvalidConfig(format!("cluster spread: {e}")))?;
            Ok((nx, ny))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scatterers = Vec::with_capacity(config.k);
    for k in 0..config.k {
        let (nx, ny) = &normals[k % normals.len()];
        let mut attempts = 0;
        let position = loop {
            if attempts == MAX_REDRAWS {
                return Err(Error::ExhaustedRedraws(MAX_REDRAWS));
            }
            attempts += 1;
            let p = Position2D::new(nx.sample(&mut rng), ny.sample(&mut rng));
            if rrhs.iter().all(|q| q.distance(&p) > config.min_scatter_rrh_dist) {
                break p;
            }
        };
        let phase_shift = rng.gen_range(0.0..2.0 * PI);
        scatterers.push(Scatterer { position, phase_shift, amplitude_gain: config.gamma });
    }
    Scenario::new(
        rrhs,
        scatterers,
        config.roi,
        config.wavelength,
        config.gamma,
        config.min_user_rrh_dist,
        seed,
    )?
    .with_noise_std(config.noise_std)
}

/// Channel features handed to the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// `|h_n|` per RRH, width N.
    Magnitude,
    /// Interleaved `(Re h_n, Im h_n)`, width 2N.
    ComplexSplit,
}

impl FeatureMode {
    pub fn width(self, n: usize) -> usize {
        match self {
            FeatureMode::Magnitude => n,
            FeatureMode::ComplexSplit => 2 * n,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureMode::Magnitude => 0,
            FeatureMode::ComplexSplit => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureMode::Magnitude),
            1 => Some(FeatureMode::ComplexSplit),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Magnitude => "magnitude",
            FeatureMode::ComplexSplit => "complex_split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "magnitude" => Some(FeatureMode::Magnitude),
            "complex_split" => Some(FeatureMode::ComplexSplit),
            _ => None,
        }
    }
}

pub fn channel_features(channel: &[Complex64], mode: FeatureMode) -> Vec<f64> {
    match mode {
        FeatureMode::Magnitude => channel.iter().map(|h| h.norm()).collect(),
        FeatureMode::ComplexSplit => channel.iter().flat_map(|h| [h.re, h.im]).collect(),
    }
}

/// User positions paired with channel features, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub feature_mode: FeatureMode,
    pub positions: Vec<Position2D>,
    pub features: Array2<f64>,
}

impl Dataset {
    pub fn new(n: usize, feature_mode: FeatureMode, positions: Vec<Position2D>, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != positions.len() || features.ncols() != feature_mode.width(n) {
            return Err(Error::ShapeMismatch(format!(
                "{} positions with a {}x{} feature matrix for N={n} ({})",
                positions.len(),
                features.nrows(),
                features.ncols(),
                feature_mode.name()
            )));
        }
        Ok(Self { n, feature_mode, positions, features })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n: self.n,
            feature_mode: self.feature_mode,
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.select(ndarray::Axis(0), indices),
        }
    }

    /// Targets as an `R × 2` matrix.
    pub fn targets(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), 2), |(i, j)| {
            if j == 0 {
                self.positions[i].x
            } else {
                self.positions[i].y
            }
        })
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws a user position uniformly over the ROI, redrawing until it keeps
/// the minimum distance to every RRH.
pub fn draw_user<R: Rng>(scenario: &Scenario, rng: &mut R) -> Result<Position2D> {
    let roi = scenario.roi;
    for _ in 0..MAX_REDRAWS {
        let p = Position2D::new(rng.gen_range(roi.min_x..roi.max_x), rng.gen_range(roi.min_y..roi.max_y));
        if scenario.check_user(&p).is_ok() {
            return Ok(p);
        }
    }
    Err(Error::ExhaustedRedraws(MAX_REDRAWS))
}

fn generate_sample(scenario: &Scenario, mode: FeatureMode, seed: u64, index: usize) -> Result<(Position2D, Vec<f64>)> {
    let mut rng = sample_rng(seed, index);
    let user = draw_user(scenario, &mut rng)?;
    let mut sample = channel_vector(&user, scenario)?;
    if scenario.noise_std > 0.0 {
        let noise = Normal::new(0.0, scenario.noise_std / 2f64.sqrt()).expect("finite std");
        for h in &mut sample.channel {
            *h += Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    Ok((user, channel_features(&sample.channel, mode)))
}

/// Generates `r` samples on the current thread.
pub fn generate_dataset(scenario: &Scenario, r: usize, mode: FeatureMode, seed: u64) -> Result<Dataset> {
    generate_dataset_with_workers(scenario, r, mode, seed, 1)
}

/// Generates `r` samples with `workers` threads. Each sample has its own RNG
/// stream keyed by `(seed, index)`, so the output does not depend on `workers`.
pub fn generate_dataset_with_workers(
    scenario: &Scenario,
    r: usize,
    mode: FeatureMode,
    seed: u64,
    workers: usize,
) -> Result<Dataset> {
    if r == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let samples: Vec<(Position2D, Vec<f64>)> = if workers <= 1 {
        (0..r).map(|i| generate_sample(scenario, mode, seed, i)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..r)
                .into_par_iter()
                .map(|i| generate_sample(scenario, mode, seed, i))
                .collect::<Result<_>>()
        })?
    };
    let width = mode.width(scenario.num_rrhs());
    let mut features = Array2::zeros((r, width));
    let mut positions = Vec::with_capacity(r);
    for (i, (p, f)) in samples.into_iter().enumerate() {
        positions.push(p);
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
    }
    Dataset::new(scenario.num_rrhs(), mode, positions, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn p(x: f64, y: f64) -> Position2D {
        Position2D::new(x, y)
    }

    #[test]
    fn los_unit_distance_unit_wavelength() {
        let h = los_coefficient(&p(0.0, 0.0), &p(1.0, 0.0), 1.0).unwrap();
        assert_abs_diff_eq!(h.re, 0.079_577_471_545_947_67, epsilon = 1e-15);
        assert_abs_diff_eq!(h.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn los_half_turn_phase() {
        let h = los_coefficient(&p(0.0, 0.0), &p(1.0, 0.0), 2.0).unwrap();
        assert_abs_diff_eq!(h.re, -0.159_154_943_091_895_34, epsilon = 1e-15);
        assert_abs_diff_eq!(h.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn los_rejects_coincident_points() {
        assert!(matches!(
            los_coefficient(&p(1.0, 1.0), &p(1.0, 1.0), 1.0),
            Err(Error::ZeroDistance { .. })
        ));
    }

    #[test]
    fn los_magnitude_decreasing() {
        let a = p(0.0, 0.0);
        let mags: Vec<f64> = (1..50)
            .map(|i| los_coefficient(&a, &p(0.3 * i as f64, 0.0), 0.125).unwrap().norm())
            .collect();
        assert!(mags.windows(2).all(|w| w[1] < w[0]));
    }

    fn scatterer(x: f64, y: f64, phase: f64) -> Scatterer {
        Scatterer { position: p(x, y), phase_shift: phase, amplitude_gain: 1.0 }
    }

    #[test]
    fn scatter_term_examples() {
        let u = scatter_term(&p(0.0, 0.0), &scatterer(1.0, 0.0, 0.0), &p(2.0, 0.0), 1.0).unwrap();
        assert_abs_diff_eq!(u.re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.im, 0.0, epsilon = 1e-12);
        let u = scatter_term(&p(0.0, 0.0), &scatterer(1.0, 0.0, PI), &p(2.0, 0.0), 1.0).unwrap();
        assert_abs_diff_eq!(u.re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.im, 0.0, epsilon = 1e-12);
        // 40-digit reference: e^{i(0.7 + 112π)} / 12
        let u = scatter_term(&p(0.0, 0.0), &scatterer(0.0, 3.0, 0.7), &p(4.0, 3.0), 0.125).unwrap();
        assert_abs_diff_eq!(u.re, 0.063_736_848_940_374_04, epsilon = 1e-13);
        assert_abs_diff_eq!(u.im, 0.053_684_807_269_807_59, epsilon = 1e-13);
    }

    #[test]
    fn scatter_term_zero_segment() {
        let s = scatterer(1.0, 0.0, 0.0);
        assert!(scatter_term(&p(1.0, 0.0), &s, &p(2.0, 0.0), 1.0).is_err());
        assert!(scatter_term(&p(0.0, 0.0), &s, &p(1.0, 0.0), 1.0).is_err());
    }

    fn small_scenario(gamma: f64) -> Scenario {
        let cfg = ScenarioConfig { n: 4, k: 5, gamma, ..Default::default() };
        generate_scenario(&cfg, 11).unwrap()
    }

    #[test]
    fn gamma_zero_reduces_to_los() {
        let sc = small_scenario(0.0);
        let user = p(3.0, -7.0);
        for q in sc.rrh_positions() {
            let h = channel_coefficient(&user, q, &sc).unwrap();
            assert_eq!(h, los_coefficient(&user, q, sc.wavelength()).unwrap());
        }
    }

    #[test]
    fn no_scatterers_reduces_to_los() {
        let sc = Scenario::new(vec![p(1.0, 2.0)], vec![], Roi::default(), 0.125, 3.0, 0.5, 0).unwrap();
        let user = p(-4.0, 9.0);
        let q = sc.rrh_positions()[0];
        assert_eq!(channel_coefficient(&user, &q, &sc).unwrap(), los_coefficient(&user, &q, 0.125).unwrap());
    }

    #[test]
    fn channel_vector_single_rrh() {
        let sc = Scenario::new(vec![p(1.0, 2.0)], vec![scatterer(30.0, 60.0, 1.0)], Roi::default(), 0.125, 1.2, 0.5, 0)
            .unwrap();
        let user = p(-4.0, 9.0);
        let v = channel_vector(&user, &sc).unwrap();
        assert_eq!(v.channel.len(), 1);
        assert_eq!(v.channel[0], channel_coefficient(&user, &sc.rrh_positions()[0], &sc).unwrap());
    }

    #[test]
    fn channel_vector_min_distance() {
        let sc = small_scenario(1.2);
        let q = sc.rrh_positions()[2];
        let err = channel_vector(&q.translated(0.3, 0.0), &sc).unwrap_err();
        assert!(matches!(err, Error::MinDistanceViolation { rrh: 2, .. }));
    }

    #[test]
    fn grid_sixteen() {
        let g = place_grid(&Roi::default(), 16).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], p(-37.5, -37.5));
        assert_eq!(g[15], p(37.5, 37.5));
        for i in 0..16 {
            for j in 0..i {
                assert_ne!(g[i], g[j]);
            }
        }
        assert!(matches!(place_grid(&Roi::default(), 15), Err(Error::NonSquareN(15))));
    }

    #[test]
    fn circular_array_quarters() {
        let pts = place_circular_array(p(0.0, 0.0), 1.5, 4).unwrap();
        let expect = [p(0.75, 0.0), p(0.0, 0.75), p(-0.75, 0.0), p(0.0, -0.75)];
        for (a, b) in pts.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-15);
            assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-15);
        }
        assert_eq!(place_circular_array(p(0.0, 0.0), 1.5, 1).unwrap(), vec![p(0.75, 0.0)]);
    }

    #[test]
    fn circular_array_spacing() {
        let pts = place_circular_array(p(2.0, -1.0), 1.5, 64).unwrap();
        // chord for a 2π/64 arc on r = 0.75
        let chord = 2.0 * 0.75 * (PI / 64.0).sin();
        let arc = PI * 1.5 / 64.0;
        for i in 0..64 {
            let d = pts[i].distance(&pts[(i + 1) % 64]);
            assert_abs_diff_eq!(d, chord, epsilon = 1e-12);
            assert!((d - arc).abs() / arc < 1e-3);
        }
    }

    #[test]
    fn scenario_generation_is_deterministic() {
        let cfg = ScenarioConfig::default();
        let a = generate_scenario(&cfg, 42).unwrap();
        let b = generate_scenario(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scatterers().len(), 100);
        assert_ne!(a, generate_scenario(&cfg, 43).unwrap());
    }

    #[test]
    fn scenario_respects_scatterer_distance() {
        let cfg = ScenarioConfig { n: 64, ..Default::default() };
        let sc = generate_scenario(&cfg, 3).unwrap();
        for s in sc.scatterers() {
            assert!((0.0..2.0 * PI).contains(&s.phase_shift));
            for q in sc.rrh_positions() {
                assert!(q.distance(&s.position) > 0.5);
            }
        }
    }

    #[test]
    fn scenario_redraw_cap() {
        // one tight cluster sitting on an RRH with a huge exclusion radius
        let cfg = ScenarioConfig {
            n: 1,
            k: 1,
            clusters: vec![Cluster { mean: (0.0, 0.0), spread: (0.01, 0.01) }],
            min_scatter_rrh_dist: 10.0,
            ..Default::default()
        };
        assert!(matches!(generate_scenario(&cfg, 0), Err(Error::ExhaustedRedraws(1000))));
    }

    #[test]
    fn dataset_shapes() {
        let sc = small_scenario(1.2);
        let d = generate_dataset(&sc, 1, FeatureMode::Magnitude, 5).unwrap();
        assert_eq!(d.features.ncols(), 4);
        assert!(d.features.iter().all(|&v| v > 0.0));
        let d = generate_dataset(&sc, 1, FeatureMode::ComplexSplit, 5).unwrap();
        assert_eq!(d.features.ncols(), 8);
    }

    #[test]
    fn dataset_worker_count_invariant() {
        let sc = small_scenario(3.0);
        let a = generate_dataset_with_workers(&sc, 100, FeatureMode::Magnitude, 9, 1).unwrap();
        let b = generate_dataset_with_workers(&sc, 100, FeatureMode::Magnitude, 9, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn awgn_off_by_default() {
        let sc = small_scenario(1.2);
        let d = generate_dataset(&sc, 3, FeatureMode::ComplexSplit, 1).unwrap();
        for (i, pos) in d.positions.iter().enumerate() {
            let v = channel_vector(pos, &sc).unwrap();
            assert_eq!(d.features.row(i).to_vec(), channel_features(&v.channel, FeatureMode::ComplexSplit));
        }
    }
}
