use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{StudyError, StudyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = StudyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(StudyError::Config(format!("unknown report format '{s}'"))),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StudyError + '_ {
    move |e| StudyError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(e: csv::Error) -> StudyError {
    StudyError::Io(e.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// `method,mean,bias,rel_bias_pct,emp_sd,mean_se,coverage,mse,n_converged`,
/// with `NA` for methods that produced no metrics.
pub fn write_summary_csv<W: Write>(r: &StudyReport, out: W) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "mean",
        "bias",
        "rel_bias_pct",
        "emp_sd",
        "mean_se",
        "coverage",
        "mse",
        "n_converged",
    ])
    .map_err(csv_err)?;
    for s in &r.summaries {
        let m = s.metrics.as_ref();
        w.write_record([
            s.method.to_string(),
            opt(m.map(|m| m.mean)),
            opt(m.map(|m| m.bias)),
            opt(m.and_then(|m| m.rel_bias_pct)),
            opt(m.map(|m| m.emp_sd)),
            opt(m.map(|m| m.mean_se)),
            opt(m.map(|m| m.coverage)),
            opt(m.map(|m| m.mse)),
            s.n_converged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| StudyError::Io(e.to_string()))
}

pub fn write_replicates_csv<W: Write>(r: &StudyReport, out: W) -> Result<(), StudyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate",
        "method",
        "gamma_hat",
        "se_total",
        "ci_lo",
        "ci_hi",
        "converged",
        "error",
    ])
    .map_err(csv_err)?;
    for row in &r.rows {
        let e = row.result.as_ref();
        w.write_record([
            row.replicate.to_string(),
            row.method.to_string(),
            opt(e.map(|e| e.gamma_hat)),
            opt(e.map(|e| e.se_total)),
            opt(e.map(|e| e.ci95.0)),
            opt(e.map(|e| e.ci95.1)),
            e.is_some_and(|e| e.converged).to_string(),
            row.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| StudyError::Io(e.to_string()))
}

/// Reads a report written by [`emit_report`] in JSON form: either a single
/// report or an array of them.
pub fn read_report(path: &Path) -> Result<Vec<StudyReport>, StudyError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| StudyError::Io(format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| StudyError::Io(format!("{}: {e}", path.display())))
}

/// Writes `reports` into `dir` and returns the files created. CSV gives a
/// summary and a per-replicate file per scenario, JSON a single
/// `report.json`, SVG a single `report.svg` with one panel per scenario.
pub fn emit_report(reports: &[StudyReport], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, StudyError> {
    if reports.is_empty() || reports.iter().any(|r| r.summaries.is_empty()) {
        return Err(StudyError::EmptyReport);
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let create = |name: String| -> Result<(PathBuf, std::io::BufWriter<std::fs::File>), StudyError> {
        let p = dir.join(name);
        let f = std::fs::File::create(&p).map_err(io_err(&p))?;
        Ok((p, std::io::BufWriter::new(f)))
    };
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            for r in reports {
                let suffix = if reports.len() == 1 {
                    String::new()
                } else {
                    format!("_{}", r.scenario)
                };
                let (p, f) = create(format!("summary{suffix}.csv"))?;
                write_summary_csv(r, f)?;
                written.push(p);
                let (p, f) = create(format!("replicates{suffix}.csv"))?;
                write_replicates_csv(r, f)?;
                written.push(p);
            }
        }
        ReportFormat::Json => {
            let (p, mut f) = create("report.json".into())?;
            let text = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(reports)
            }
            .map_err(|e| StudyError::Io(e.to_string()))?;
            f.write_all(text.as_bytes()).map_err(io_err(&p))?;
            f.flush().map_err(io_err(&p))?;
            written.push(p);
        }
        ReportFormat::Svg => {
            let (p, mut f) = create("report.svg".into())?;
            f.write_all(render_svg(reports).as_bytes()).map_err(io_err(&p))?;
            f.flush().map_err(io_err(&p))?;
            written.push(p);
        }
    }
    Ok(written)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

struct BoxStats {
    q1: f64,
    median: f64,
    q3: f64,
    lo: f64,
    hi: f64,
    outliers: Vec<f64>,
}

fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let fence = 1.5 * (q3 - q1);
    let inside: Vec<f64> = v
        .iter()
        .copied()
        .filter(|x| *x >= q1 - fence && *x <= q3 + fence)
        .collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        lo: inside.first().copied().unwrap_or(q1),
        hi: inside.last().copied().unwrap_or(q3),
        outliers: v
            .iter()
            .copied()
            .filter(|x| *x < q1 - fence || *x > q3 + fence)
            .collect(),
    })
}

const PANEL_H: f64 = 340.0;
const PLOT_TOP: f64 = 40.0;
const PLOT_H: f64 = 230.0;
const GROUP_W: f64 = 90.0;
const MARGIN_L: f64 = 60.0;
const PANELS_PER_ROW: usize = 4;

/// Box plots of the estimates, one panel per scenario and one box per
/// method, with the truth as a dashed line and coverage and MSE×1000
/// printed under each box.
pub fn render_svg(reports: &[StudyReport]) -> String {
    let max_methods = reports.iter().map(|r| r.summaries.len()).max().unwrap_or(1).max(1);
    let panel_w = MARGIN_L + GROUP_W * max_methods as f64 + 20.0;
    let cols = reports.len().clamp(1, PANELS_PER_ROW);
    let rows = reports.len().div_ceil(PANELS_PER_ROW).max(1);
    let (width, height) = (panel_w * cols as f64, PANEL_H * rows as f64);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, r) in reports.iter().enumerate() {
        let ox = panel_w * (k % PANELS_PER_ROW) as f64;
        let oy = PANEL_H * (k / PANELS_PER_ROW) as f64;
        let groups: Vec<(String, Vec<f64>, String)> = r
            .summaries
            .iter()
            .map(|sm| {
                let vals: Vec<f64> = r.estimates(sm.method).iter().map(|e| e.gamma_hat).collect();
                let note = match &sm.metrics {
                    Some(m) => format!("CR={:.2} MSE={:.2}", m.coverage, 1000.0 * m.mse),
                    None => "no estimates".to_string(),
                };
                (sm.method.to_string(), vals, note)
            })
            .collect();
        let mut lo = r.gamma_true;
        let mut hi = r.gamma_true;
        for (_, v, _) in &groups {
            for x in v {
                lo = lo.min(*x);
                hi = hi.max(*x);
            }
        }
        let pad = 0.05 * (hi - lo).max(0.02);
        let (lo, hi) = (lo - pad, hi + pad);
        let y = |v: f64| oy + PLOT_TOP + PLOT_H * (hi - v) / (hi - lo);

        let _ = writeln!(s, r#"<g class="panel" data-scenario="{}">"#, xml_escape(&r.scenario));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" font-weight="bold">Scenario {} (γ = {})</text>"#,
            ox + MARGIN_L,
            oy + 22.0,
            xml_escape(&r.scenario),
            r.gamma_true
        );
        let x_end = ox + MARGIN_L + GROUP_W * groups.len() as f64;
        let _ = writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333"/>"##,
            ox + MARGIN_L,
            oy + PLOT_TOP,
            ox + MARGIN_L,
            oy + PLOT_TOP + PLOT_H
        );
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
                ox + MARGIN_L - 4.0,
                y(v) + 4.0,
                v
            );
        }
        let _ = writeln!(
            s,
            r##"<line class="truth" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#c00" stroke-dasharray="5,4"/>"##,
            ox + MARGIN_L,
            y(r.gamma_true),
            x_end,
            y(r.gamma_true)
        );
        for (j, (name, vals, note)) in groups.iter().enumerate() {
            let cx = ox + MARGIN_L + GROUP_W * (j as f64 + 0.5);
            let _ = writeln!(s, r#"<g class="method" data-method="{name}">"#);
            if let Some(b) = box_stats(vals) {
                let hw = GROUP_W * 0.25;
                let _ = writeln!(
                    s,
                    r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#333"/>"##,
                    y(b.hi),
                    y(b.lo)
                );
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="#333"/>"##,
                    cx - hw,
                    y(b.q3),
                    2.0 * hw,
                    (y(b.q1) - y(b.q3)).max(0.5)
                );
                let _ = writeln!(
                    s,
                    r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#000" stroke-width="2"/>"##,
                    cx - hw,
                    y(b.median),
                    cx + hw,
                    y(b.median)
                );
                for o in &b.outliers {
                    let _ = writeln!(
                        s,
                        r##"<circle cx="{cx:.1}" cy="{:.1}" r="2" fill="none" stroke="#555"/>"##,
                        y(*o)
                    );
                }
            }
            let base = oy + PLOT_TOP + PLOT_H;
            let _ = writeln!(
                s,
                r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-weight="bold">{name}</text>"#,
                base + 16.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="9">{note}</text>"#,
                base + 30.0
            );
            let _ = writeln!(s, "</g>");
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
