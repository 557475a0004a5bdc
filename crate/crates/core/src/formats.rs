//! Binary dataset (`DASL`) and model (`DASM`) files, plus the dataset
//! metadata sidecar. All binary fields are little-endian.

use std::fmt::Write as _;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::channel_sim::{Dataset, FeatureMode, Layout, Position2D, ScenarioConfig, Scenario, SpreadKind};
use crate::error::{Error, Result};
use crate::nn::{Activation, FeatureScaler, Layer, Mlp, TargetScaler};
use crate::selector::{SelectorParams, TemperatureSchedule};
use crate::training::{TrainedLud, TrainedRsd};

pub const DATASET_MAGIC: &[u8; 4] = b"DASL";
pub const MODEL_MAGIC: &[u8; 4] = b"DASM";
pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = concat!("dasloc ", env!("CARGO_PKG_VERSION"));

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(format_err(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; count];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_f64s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(format!("{what} {v} does not fit in u32")))
}

pub fn write_dataset<W: Write>(w: &mut W, dataset: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(to_u32(dataset.n, "N")?)?;
    w.write_u32::<LE>(to_u32(dataset.len(), "R")?)?;
    w.write_u8(dataset.feature_mode.code())?;
    w.write_all(&[0u8; 3])?;
    for (p, row) in dataset.positions.iter().zip(dataset.features.outer_iter()) {
        w.write_f64::<LE>(p.x)?;
        w.write_f64::<LE>(p.y)?;
        write_f64s(w, row.iter().copied())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    read_magic(r, DATASET_MAGIC)?;
    let n = r.read_u32::<LE>()? as usize;
    let count = r.read_u32::<LE>()? as usize;
    let mode = FeatureMode::from_code(r.read_u8()?).ok_or_else(|| format_err("unknown feature mode"))?;
    let mut pad = [0u8; 3];
    r.read_exact(&mut pad)?;
    let width = mode.width(n);
    let mut positions = Vec::with_capacity(count);
    let mut features = Array2::zeros((count, width));
    for i in 0..count {
        let xy = read_f64s(r, 2)?;
        positions.push(Position2D::new(xy[0], xy[1]));
        let f = read_f64s(r, width)?;
        features.row_mut(i).assign(&Array1::from(f));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes after the last record"));
    }
    Dataset::new(n, mode, positions, features)
}

/// Human-readable `key=value` description of how a dataset was generated.
pub fn dataset_sidecar(config: &ScenarioConfig, scenario: &Scenario, dataset: &Dataset, dataset_seed: u64) -> String {
    let mut s = String::new();
    let roi = scenario.roi();
    let _ = writeln!(s, "generator_version={GENERATOR_VERSION}");
    let _ = writeln!(s, "format_version={FORMAT_VERSION}");
    let _ = writeln!(s, "scenario_seed={}", scenario.seed());
    let _ = writeln!(s, "dataset_seed={dataset_seed}");
    let _ = writeln!(s, "n={}", scenario.num_rrhs());
    let _ = writeln!(s, "k={}", scenario.scatterers().len());
    let _ = writeln!(s, "r={}", dataset.len());
    let _ = writeln!(s, "feature_mode={}", dataset.feature_mode.name());
    let _ = writeln!(s, "wavelength={}", scenario.wavelength());
    let _ = writeln!(s, "gamma={}", scenario.gamma());
    let _ = writeln!(s, "roi={},{},{},{}", roi.min_x, roi.min_y, roi.max_x, roi.max_y);
    let _ = writeln!(s, "min_user_rrh_dist={}", scenario.min_user_rrh_dist());
    let _ = writeln!(s, "min_scatter_rrh_dist={}", config.min_scatter_rrh_dist);
    let _ = writeln!(s, "noise_std={}", scenario.noise_std());
    match config.layout {
        Layout::Grid => {
            let _ = writeln!(s, "layout=grid");
        }
        Layout::Circular { center, diameter } => {
            let _ = writeln!(s, "layout=circular");
            let _ = writeln!(s, "array_center={},{}", center.x, center.y);
            let _ = writeln!(s, "array_diameter={diameter}");
        }
    }
    let spread = match config.spread_kind {
        SpreadKind::StdDev => "std",
        SpreadKind::Variance => "variance",
    };
    let _ = writeln!(s, "spread_kind={spread}");
    for (i, c) in config.clusters.iter().enumerate() {
        let _ = writeln!(s, "cluster.{i}={},{},{},{}", c.mean.0, c.mean.1, c.spread.0, c.spread.1);
    }
    for (i, q) in scenario.rrh_positions().iter().enumerate() {
        let _ = writeln!(s, "rrh.{i}={},{}", q.x, q.y);
    }
    for (i, sc) in scenario.scatterers().iter().enumerate() {
        let _ = writeln!(
            s,
            "scatterer.{i}={},{},{},{}",
            sc.position.x, sc.position.y, sc.phase_shift, sc.amplitude_gain
        );
    }
    s
}

/// A model file holds either stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Rsd(TrainedRsd),
    Lud(TrainedLud),
}

const KIND_RSD: u8 = 0;
const KIND_LUD: u8 = 1;

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> Result<()> {
    let widths = mlp.widths();
    w.write_u32::<LE>(to_u32(mlp.layers().len(), "layer count")?)?;
    for &wd in &widths {
        w.write_u32::<LE>(to_u32(wd, "layer width")?)?;
    }
    for l in mlp.layers() {
        w.write_u8(l.activation.tag())?;
        w.write_f64::<LE>(l.dropout)?;
    }
    for l in mlp.layers() {
        write_f64s(w, l.weights.iter().copied())?;
        write_f64s(w, l.biases.iter().copied())?;
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let count = r.read_u32::<LE>()? as usize;
    if count == 0 {
        return Err(format_err("network without layers"));
    }
    let widths = (0..=count).map(|_| Ok(r.read_u32::<LE>()? as usize)).collect::<Result<Vec<_>>>()?;
    let meta = (0..count)
        .map(|_| {
            let act = Activation::from_tag(r.read_u8()?).ok_or_else(|| format_err("unknown activation tag"))?;
            Ok((act, r.read_f64::<LE>()?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for (i, (activation, dropout)) in meta.into_iter().enumerate() {
        let (fi, fo) = (widths[i], widths[i + 1]);
        let weights = Array2::from_shape_vec((fi, fo), read_f64s(r, fi * fo)?)
            .map_err(|e| format_err(e.to_string()))?;
        let biases = Array1::from(read_f64s(r, fo)?);
        layers.push(Layer { weights, biases, activation, dropout });
    }
    Mlp::from_layers(layers)
}

fn write_scalers<W: Write>(w: &mut W, scaler: &FeatureScaler, target: &TargetScaler) -> Result<()> {
    w.write_u32::<LE>(to_u32(scaler.dim(), "scaler width")?)?;
    write_f64s(w, scaler.reference.iter().copied())?;
    write_f64s(w, scaler.mean.iter().copied())?;
    write_f64s(w, scaler.std.iter().copied())?;
    w.write_u32::<LE>(to_u32(scaler.constant_dims.len(), "constant dims")?)?;
    for &d in &scaler.constant_dims {
        w.write_u32::<LE>(to_u32(d, "dim")?)?;
    }
    write_f64s(w, target.center.iter().chain(&target.half_range).copied())
}

fn read_scalers<R: Read>(r: &mut R) -> Result<(FeatureScaler, TargetScaler)> {
    let dim = r.read_u32::<LE>()? as usize;
    let reference = read_f64s(r, dim)?;
    let mean = read_f64s(r, dim)?;
    let std = read_f64s(r, dim)?;
    let nc = r.read_u32::<LE>()? as usize;
    let constant_dims = (0..nc).map(|_| Ok(r.read_u32::<LE>()? as usize)).collect::<Result<Vec<_>>>()?;
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(format_err("feature scaler with non-positive std"));
    }
    if reference.iter().any(|&a| !(a >= 0.0)) {
        return Err(format_err("feature scaler with negative compression reference"));
    }
    let t = read_f64s(r, 4)?;
    Ok((
        FeatureScaler { reference, mean, std, constant_dims },
        TargetScaler { center: [t[0], t[1]], half_range: [t[2], t[3]] },
    ))
}

fn write_indices<W: Write>(w: &mut W, indices: &[usize]) -> Result<()> {
    w.write_u32::<LE>(to_u32(indices.len(), "index count")?)?;
    for &i in indices {
        w.write_u32::<LE>(to_u32(i, "index")?)?;
    }
    Ok(())
}

fn read_indices<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let count = r.read_u32::<LE>()? as usize;
    (0..count).map(|_| Ok(r.read_u32::<LE>()? as usize)).collect()
}

/// Layout after the common header (`magic`, `version u32`, `kind u8`, 3 pad):
/// `N u32`, `feature_mode u8`, 3 pad, `seed u64`, `mc_passes u32`,
/// `best_epoch u32`, network, feature scaler, target scaling, selected
/// indices, then a selector flag (`u8`) followed for RSD models by the
/// `M × N` logits and the temperature schedule.
pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    match model {
        Model::Rsd(m) => {
            let sel = crate::selector::hard_select_quiet(&m.selector);
            w.write_u8(KIND_RSD)?;
            w.write_all(&[0u8; 3])?;
            w.write_u32::<LE>(to_u32(m.selector.n(), "N")?)?;
            w.write_u8(FeatureMode::Magnitude.code())?;
            w.write_all(&[0u8; 3])?;
            w.write_u64::<LE>(0)?;
            w.write_u32::<LE>(0)?;
            w.write_u32::<LE>(to_u32(m.best_epoch, "best epoch")?)?;
            write_mlp(w, &m.trunk)?;
            write_scalers(w, &m.scaler, &m.target_scaler)?;
            write_indices(w, &sel.indices)?;
            w.write_u8(1)?;
            w.write_u32::<LE>(to_u32(m.selector.m(), "M")?)?;
            w.write_u32::<LE>(to_u32(m.selector.n(), "N")?)?;
            write_f64s(w, m.selector.logits().iter().copied())?;
            w.write_f64::<LE>(m.schedule.tau_start)?;
            w.write_f64::<LE>(m.schedule.tau_end)?;
            w.write_u32::<LE>(to_u32(m.schedule.total_epochs, "epochs")?)?;
        }
        Model::Lud(m) => {
            w.write_u8(KIND_LUD)?;
            w.write_all(&[0u8; 3])?;
            w.write_u32::<LE>(to_u32(m.n, "N")?)?;
            w.write_u8(m.feature_mode.code())?;
            w.write_all(&[0u8; 3])?;
            w.write_u64::<LE>(m.seed)?;
            w.write_u32::<LE>(to_u32(m.mc_passes, "mc passes")?)?;
            w.write_u32::<LE>(to_u32(m.best_epoch, "best epoch")?)?;
            write_mlp(w, &m.trunk)?;
            write_scalers(w, &m.scaler, &m.target_scaler)?;
            write_indices(w, &m.selected_indices)?;
            w.write_u8(0)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    read_magic(r, MODEL_MAGIC)?;
    let kind = r.read_u8()?;
    let mut pad = [0u8; 3];
    r.read_exact(&mut pad)?;
    let n = r.read_u32::<LE>()? as usize;
    let mode = FeatureMode::from_code(r.read_u8()?).ok_or_else(|| format_err("unknown feature mode"))?;
    r.read_exact(&mut pad)?;
    let seed = r.read_u64::<LE>()?;
    let mc_passes = r.read_u32::<LE>()? as usize;
    let best_epoch = r.read_u32::<LE>()? as usize;
    let trunk = read_mlp(r)?;
    let (scaler, target_scaler) = read_scalers(r)?;
    let selected_indices = read_indices(r)?;
    let has_selector = r.read_u8()? == 1;
    match kind {
        KIND_RSD => {
            if !has_selector {
                return Err(format_err("RSD model without selector block"));
            }
            let m = r.read_u32::<LE>()? as usize;
            let sn = r.read_u32::<LE>()? as usize;
            let logits = Array2::from_shape_vec((m, sn), read_f64s(r, m * sn)?).map_err(|e| format_err(e.to_string()))?;
            let tau_start = r.read_f64::<LE>()?;
            let tau_end = r.read_f64::<LE>()?;
            let epochs = r.read_u32::<LE>()? as usize;
            if sn != n || trunk.input_width() != m {
                return Err(format_err("selector shape does not match the network"));
            }
            Ok(Model::Rsd(TrainedRsd {
                selector: SelectorParams::new(logits)?,
                trunk,
                scaler,
                target_scaler,
                schedule: TemperatureSchedule::new(tau_start, tau_end, epochs)?,
                history: Vec::new(),
                best_epoch,
            }))
        }
        KIND_LUD => {
            if has_selector {
                return Err(format_err("LUD model with a selector block"));
            }
            if let Some(&bad) = selected_indices.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange { index: bad, len: n });
            }
            let lud = TrainedLud {
                trunk,
                scaler,
                target_scaler,
                selected_indices,
                n,
                feature_mode: mode,
                mc_passes,
                seed,
                history: Vec::new(),
                best_epoch,
            };
            if lud.input_columns().len() != lud.trunk.input_width() || lud.trunk.output_width() != 4 {
                return Err(format_err("LUD network shape does not match its selection"));
            }
            Ok(Model::Lud(lud))
        }
        other => Err(format_err(format!("unknown model kind {other}"))),
    }
}

/// One index per line.
pub fn write_index_list<W: Write>(w: &mut W, indices: &[usize]) -> Result<()> {
    for i in indices {
        writeln!(w, "{i}")?;
    }
    Ok(())
}

pub fn read_index_list(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::ConfigLine { line: n + 1, msg: format!("not an index: {l:?}") })
        })
        .collect()
}
