//! Merges the reward curves of several training runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{io_err, load_config, write_file, CliError, ReportArgs, CURVE_CSV_HEADER};

/// One evaluation point of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub run: String,
    pub algorithm: String,
    pub scenario: String,
    pub seed: u64,
    pub step: usize,
    pub reward_mean: f64,
    pub reward_hw: f64,
    /// The remaining columns of the curve row, verbatim.
    pub rest: String,
}

pub const REPORT_CSV_HEADER: &str = "run,algorithm,scenario,seed";

/// Points of `eval.csv` in run directory `dir`.
pub fn read_curve(dir: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let cfg = load_config(&dir.join("config.toml"))?;
    let path = dir.join("eval.csv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |m: String| CliError::Other(format!("{}: {m}", path.display()));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == CURVE_CSV_HEADER => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let run = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.splitn(5, ',').collect();
            if cols.len() < 5 {
                return Err(bad(format!("short row {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            Ok(CurvePoint {
                run: run.clone(),
                algorithm: cfg.algorithm.name().to_string(),
                scenario: cfg.env.scenario.clone(),
                seed: cfg.seed,
                step: cols[0].parse().map_err(|e| bad(format!("{:?}: {e}", cols[0])))?,
                reward_mean: num(cols[2])?,
                reward_hw: num(cols[3])?,
                rest: format!("{},{},{},{}", cols[1], cols[2], cols[3], cols[4]),
            })
        })
        .collect()
}

pub fn to_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("# reward-report v1\n{REPORT_CSV_HEADER},{CURVE_CSV_HEADER}\n");
    for p in points {
        writeln!(s, "{},{},{},{},{},{}", p.run, p.algorithm, p.scenario, p.seed, p.step, p.rest).unwrap();
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean reward against steps, one polyline per run.
pub fn to_svg(points: &[CurvePoint]) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let mut runs: Vec<&str> = points.iter().map(|p| p.run.as_str()).collect();
    runs.dedup();
    let xmax = points.iter().map(|p| p.step as f64).fold(1.0, f64::max);
    let lo = points.iter().map(|p| p.reward_mean).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.reward_mean).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    s.push('\n');
    writeln!(
        s,
        r#"<rect width="{w}" height="{h}" fill="white"/><line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    )
    .unwrap();
    writeln!(s, r#"<text x="{pad}" y="{}">{lo:.2}</text><text x="{pad}" y="{}">{hi:.2}</text>"#, h - pad + 14.0, pad - 4.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{xmax} steps</text>"#, w - pad, h - pad + 14.0).unwrap();
    for (k, run) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = points
            .iter()
            .filter(|p| p.run == *run)
            .map(|p| format!("{:.1},{:.1}", sx(p.step as f64), sy(p.reward_mean)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{run}</text>"#, w - pad - 120.0, pad + 14.0 * (k as f64 + 1.0)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_report(a: &ReportArgs) -> Result<String, CliError> {
    let mut points = Vec::new();
    for dir in &a.runs {
        points.extend(read_curve(dir)?);
    }
    let csv = to_csv(&points);
    if let Some(p) = &a.plot {
        write_file(p, to_svg(&points))?;
    }
    match &a.out {
        Some(p) => {
            write_file(p, &csv)?;
            Ok(format!("wrote {} ({} points)\n", p.display(), points.len()))
        }
        None => Ok(csv),
    }
}
