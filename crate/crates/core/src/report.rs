//! CSV reports and static SVG figures.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::evaluation::{ErrorMap, MethodSummary};
use crate::training::EpochRecord;

pub fn write_ecdf_csv<W: Write>(w: &mut W, points: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "error,fraction")?;
    for (e, f) in points {
        writeln!(w, "{e},{f}")?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(w: &mut W, rows: &[MethodSummary]) -> Result<()> {
    writeln!(w, "method,M,seed_count,rmse_mean,ci95,unique_selected,p50,p90")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.method.name(),
            r.m,
            r.seed_count,
            r.rmse_mean,
            r.ci95,
            r.unique_selected,
            r.p50,
            r.p90
        )?;
    }
    Ok(())
}

pub fn write_selection_freq_csv<W: Write>(w: &mut W, counts: &[(usize, usize)]) -> Result<()> {
    writeln!(w, "rrh_index,count")?;
    for (i, c) in counts {
        writeln!(w, "{i},{c}")?;
    }
    Ok(())
}

pub fn write_error_map_csv<W: Write>(w: &mut W, map: &ErrorMap) -> Result<()> {
    writeln!(w, "cell_x,cell_y,norm_error,norm_uncertainty")?;
    for c in &map.cells {
        writeln!(w, "{},{},{},{}", c.cell_x, c.cell_y, c.norm_error, c.norm_uncertainty)?;
    }
    Ok(())
}

pub fn write_history_csv<W: Write>(w: &mut W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,tau")?;
    for r in history {
        let tau = r.tau.map(|t| t.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, tau)?;
    }
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_open(s: &mut String) {
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let _ = write!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 8.0);
    let _ = write!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{y_label}</text>"#, H / 2.0, H / 2.0);
}

/// ECDF step curves, one per labelled series.
pub fn ecdf_svg(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let x_max = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.0))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y * (H - 2.0 * PAD);
    let mut s = String::new();
    svg_open(&mut s);
    axes(&mut s, &format!("error [m] (max {x_max:.2})"), "ECDF");
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = format!("M{} {}", sx(0.0), sy(0.0));
        for &(x, y) in pts {
            let _ = write!(d, " H{:.2} V{:.2}", sx(x), sy(y));
        }
        let _ = write!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#,
            W - PAD - 90.0,
            PAD + 14.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of selection counts.
pub fn frequency_svg(counts: &[(usize, usize)]) -> String {
    let max = counts.iter().map(|c| c.1).max().unwrap_or(1).max(1) as f64;
    let slot = (W - 2.0 * PAD) / counts.len().max(1) as f64;
    let mut s = String::new();
    svg_open(&mut s);
    axes(&mut s, "RRH index", "count");
    for (k, &(idx, c)) in counts.iter().enumerate() {
        let h = c as f64 / max * (H - 2.0 * PAD);
        let x = PAD + k as f64 * slot;
        let _ = write!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            x + 0.1 * slot,
            H - PAD - h,
            0.8 * slot,
            PALETTE[0]
        );
        let _ = write!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{idx}</text>"#, x + 0.5 * slot, H - PAD + 12.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Side-by-side heatmaps of normalized error and uncertainty.
pub fn error_map_svg(map: &ErrorMap) -> String {
    let panel = (W - 3.0 * PAD / 2.0) / 2.0;
    let cw = panel / map.cols as f64;
    let ch = (H - 2.0 * PAD) / map.rows as f64;
    let mut s = String::new();
    svg_open(&mut s);
    for (p, title) in ["normalized error", "normalized uncertainty"].iter().enumerate() {
        let x0 = PAD / 2.0 + p as f64 * (panel + PAD / 2.0);
        let _ = write!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{title}</text>"#, x0 + panel / 2.0, PAD - 8.0);
        for c in &map.cells {
            let v = if p == 0 { c.norm_error } else { c.norm_uncertainty };
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = write!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb(255,{shade},{shade})"/>"#,
                x0 + c.cell_x as f64 * cw,
                H - PAD - (c.cell_y as f64 + 1.0) * ch,
                cw,
                ch
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
