//! Aggregation of stored runs into tables (CSV, JSON, LaTeX) and SVG plots.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Method, StoredRun};

/// Mean and sample standard deviation over repetitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// `n - 1` normalized; zero for a single run.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }

    /// Scales mean and spread, e.g. to percent.
    pub fn scaled(self, factor: f64) -> Summary {
        Summary { mean: self.mean * factor, std: self.std * factor, n: self.n }
    }
}

/// Results of one `(method, M)` cell over all its runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub memory_size: usize,
    pub runs: usize,
    pub avg_incremental_accuracy: Summary,
    pub end_accuracy: Summary,
    pub forgetting: Option<Summary>,
    pub balancedness: Summary,
    pub cka_seen: Option<Summary>,
    pub cka_unseen: Option<Summary>,
}

/// Groups complete runs by `(method, M)`; partial runs are skipped.
pub fn aggregate(runs: &[StoredRun]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(Method, usize), Vec<&StoredRun>> = BTreeMap::new();
    for run in runs {
        if run.report.metrics.is_some() {
            groups.entry((run.report.method, run.report.memory_size)).or_default().push(run);
        } else {
            log::warn!("skipping partial run {}", run.dir.display());
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no complete runs to aggregate".into()));
    }
    Ok(groups
        .into_iter()
        .map(|((method, memory_size), runs)| {
            let metrics: Vec<_> = runs.iter().filter_map(|r| r.report.metrics.as_ref()).collect();
            let pick = |f: &dyn Fn(&crate::metrics::MetricsReport) -> Option<f64>| {
                Summary::of(&metrics.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
            };
            AggregateRow {
                method,
                memory_size,
                runs: runs.len(),
                avg_incremental_accuracy: pick(&|m| Some(m.avg_incremental_accuracy)).expect("non-empty group"),
                end_accuracy: pick(&|m| Some(m.end_accuracy)).expect("non-empty group"),
                forgetting: pick(&|m| m.forgetting),
                balancedness: pick(&|m| Some(m.balancedness)).expect("non-empty group"),
                cka_seen: pick(&|m| m.cka.seen),
                cka_unseen: pick(&|m| m.cka.unseen),
            }
        })
        .collect())
}

#[derive(Serialize)]
struct CsvRow {
    method: Method,
    memory_size: usize,
    runs: usize,
    a_mean: f64,
    a_std: f64,
    e_mean: f64,
    e_std: f64,
    f_mean: Option<f64>,
    f_std: Option<f64>,
    beta_mean: f64,
    beta_std: f64,
    cka_seen_mean: Option<f64>,
    cka_unseen_mean: Option<f64>,
}

pub fn write_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(CsvRow {
            method: r.method,
            memory_size: r.memory_size,
            runs: r.runs,
            a_mean: r.avg_incremental_accuracy.mean,
            a_std: r.avg_incremental_accuracy.std,
            e_mean: r.end_accuracy.mean,
            e_std: r.end_accuracy.std,
            f_mean: r.forgetting.map(|s| s.mean),
            f_std: r.forgetting.map(|s| s.std),
            beta_mean: r.balancedness.mean,
            beta_std: r.balancedness.std,
            cka_seen_mean: r.cka_seen.map(|s| s.mean),
            cka_unseen_mean: r.cka_unseen.map(|s| s.mean),
        })
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))
}

pub fn write_json<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

/// A `mean ± std` row of the end-accuracy table, values in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyTableRow {
    pub method: String,
    pub cells: Vec<Option<(f64, f64)>>,
}

/// Row layout of the LaTeX renderers.
#[derive(Clone, Debug, PartialEq)]
pub struct LatexStyle {
    pub indent: String,
    /// Text after the last cell.
    pub row_end: String,
}

impl LatexStyle {
    pub fn accuracy_table() -> Self {
        LatexStyle { indent: String::new(), row_end: "\\\\".into() }
    }

    pub fn forgetting_table() -> Self {
        LatexStyle { indent: " ".repeat(8), row_end: " \\\\".into() }
    }
}

/// Values as displayed, so bolding follows what the reader sees.
fn displayed(v: f64, decimals: usize) -> String {
    format!("{v:.decimals$}")
}

fn bold(s: String, on: bool) -> String {
    if on {
        format!("\\textbf{{{s}}}")
    } else {
        s
    }
}

/// Renders `Method & m $\pm$ s & ... \\` rows with one decimal, bolding the
/// column maxima and writing `-` for missing cells.
pub fn render_accuracy_rows(rows: &[AccuracyTableRow], style: &LatexStyle) -> Vec<String> {
    let columns = rows.iter().map(|r| r.cells.len()).max().unwrap_or(0);
    let best: Vec<Option<String>> = (0..columns)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.cells.get(c).copied().flatten())
                .map(|(m, _)| m)
                .max_by(f64::total_cmp)
                .map(|m| displayed(m, 1))
        })
        .collect();
    rows.iter()
        .map(|r| {
            let cells: Vec<String> = (0..columns)
                .map(|c| match r.cells.get(c).copied().flatten() {
                    None => "-".to_string(),
                    Some((m, s)) => {
                        let text = format!("{} $\\pm$ {}", displayed(m, 1), displayed(s, 1));
                        bold(text, best[c].as_deref() == Some(displayed(m, 1).as_str()))
                    }
                })
                .collect();
            format!("{}{} & {}{}", style.indent, r.method, cells.join(" & "), style.row_end)
        })
        .collect()
}

/// Renders `Method & 0.197 \\` rows with three decimals, bolding the minimum.
pub fn render_forgetting_rows(rows: &[(String, f64)], style: &LatexStyle) -> Vec<String> {
    let best = rows.iter().map(|r| r.1).min_by(f64::total_cmp).map(|v| displayed(v, 3));
    rows.iter()
        .map(|(name, v)| {
            let text = displayed(*v, 3);
            let on = best.as_deref() == Some(text.as_str());
            format!("{}{} & {}{}", style.indent, name, bold(text, on), style.row_end)
        })
        .collect()
}

/// `(a) SCR. $\beta=0.737$ (b) ...` for confusion-matrix panels.
pub fn render_balancedness_caption(panels: &[(String, f64)]) -> String {
    panels
        .iter()
        .enumerate()
        .map(|(i, (name, beta))| format!("({}) {}. $\\beta={}$", (b'a' + i as u8) as char, name, displayed(*beta, 3)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// End-accuracy rows (percent) with one column per memory size.
pub fn accuracy_table(rows: &[AggregateRow]) -> (Vec<usize>, Vec<AccuracyTableRow>) {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.memory_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    let table = methods
        .into_iter()
        .map(|m| AccuracyTableRow {
            method: m.to_string(),
            cells: sizes
                .iter()
                .map(|&s| {
                    rows.iter().find(|r| r.method == m && r.memory_size == s).map(|r| {
                        let e = r.end_accuracy.scaled(100.0);
                        (e.mean, e.std)
                    })
                })
                .collect(),
        })
        .collect();
    (sizes, table)
}

/// LaTeX fragments for a set of aggregated rows.
pub fn render_latex(rows: &[AggregateRow]) -> String {
    let (sizes, table) = accuracy_table(rows);
    let mut out = String::new();
    out.push_str(&format!(
        "% end accuracy (%), columns M = {}\n",
        sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    ));
    for line in render_accuracy_rows(&table, &LatexStyle::accuracy_table()) {
        out.push_str(&line);
        out.push('\n');
    }
    let forgetting: Vec<(String, f64)> = rows
        .iter()
        .filter_map(|r| r.forgetting.map(|f| (format!("{} (M={})", r.method, r.memory_size), f.mean)))
        .collect();
    if !forgetting.is_empty() {
        out.push_str("% forgetting\n");
        for line in render_forgetting_rows(&forgetting, &LatexStyle::forgetting_table()) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out.push_str("% balancedness\n");
    let betas: Vec<(String, f64)> = rows.iter().map(|r| (r.method.to_string(), r.balancedness.mean)).collect();
    out.push_str(&render_balancedness_caption(&betas));
    out.push('\n');
    out
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidArgument(format!("plot: {e}"))
}

/// Heatmap of a confusion matrix (rows: true class, columns: prediction).
pub fn plot_confusion(matrix: &[Vec<u64>], path: &Path) -> Result<()> {
    let n = matrix.len();
    if n == 0 || matrix.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
    }
    let cell = 32u32;
    let side = cell * n as u32;
    let root = SVGBackend::new(path, (side + 2 * cell, side + 2 * cell)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (i, row) in matrix.iter().enumerate() {
        let total = row.iter().sum::<u64>().max(1) as f64;
        for (j, &v) in row.iter().enumerate() {
            let shade = 255 - (v as f64 / total * 255.0).round() as u8;
            let (x, y) = (cell * (j as u32 + 1), cell * (i as u32 + 1));
            root.draw(&Rectangle::new(
                [(x as i32, y as i32), ((x + cell) as i32, (y + cell) as i32)],
                RGBColor(shade, shade, 255).filled(),
            ))
            .map_err(plot_err)?;
            root.draw(&Text::new(v.to_string(), (x as i32 + 4, y as i32 + cell as i32 / 2), ("sans-serif", 12)))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

/// Line plot of `series` (name, points) against a 1-based index.
fn plot_lines(series: &[(String, Vec<f64>)], path: &Path, y_range: std::ops::Range<f64>) -> Result<()> {
    let len = series.iter().map(|s| s.1.len()).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let root = SVGBackend::new(path, (480, 320)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let area = root.margin(20, 20, 20, 20);
    let (w, h) = area.dim_in_pixel();
    let to_px = |i: usize, v: f64| -> (i32, i32) {
        let x = if len > 1 { i as f64 / (len - 1) as f64 } else { 0.5 };
        let y = (v - y_range.start) / (y_range.end - y_range.start);
        ((x * w as f64) as i32, ((1.0 - y.clamp(0.0, 1.0)) * h as f64) as i32)
    };
    area.draw(&PathElement::new(vec![(0, 0), (0, h as i32), (w as i32, h as i32)], BLACK)).map_err(plot_err)?;
    for (si, (_, values)) in series.iter().enumerate() {
        let color = Palette99::pick(si).to_rgba();
        let points: Vec<(i32, i32)> = values.iter().enumerate().map(|(i, &v)| to_px(i, v)).collect();
        area.draw(&PathElement::new(points.clone(), color.stroke_width(2))).map_err(plot_err)?;
        for p in points {
            area.draw(&Circle::new(p, 3, color.filled())).map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

/// Normalized eigenvalue spectrum.
pub fn plot_scree(eigenvalues: &[f64], path: &Path) -> Result<()> {
    let top = eigenvalues.iter().copied().fold(0.0, f64::max);
    plot_lines(&[("eigenvalue".into(), eigenvalues.to_vec())], path, 0.0..top.max(f64::MIN_POSITIVE))
}

/// Mean accuracy over seen classes after each stage, one line per run.
pub fn plot_accuracy(runs: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    plot_lines(runs, path, 0.0..1.0)
}
