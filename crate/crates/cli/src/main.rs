use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sdaf_core::harness::{self, ExperimentConfig, Method, StoredRun};
use sdaf_core::ncm::Metric;
use sdaf_core::report;

#[derive(Parser)]
#[command(name = "sdaf", version, about = "Class-incremental online continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configured experiment.
    Run(RunArgs),
    /// Aggregate finished runs into a table.
    Report(ReportArgs),
    /// Render an SVG plot from a results directory.
    Plot(PlotArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (.toml or .json).
    #[arg(long)]
    config: PathBuf,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of incremental stages T.
    #[arg(long)]
    stages: Option<usize>,
    /// Incoming stream batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    class_order_seed: Option<u64>,
    #[arg(long, value_enum)]
    ncm_metric: Option<MetricArg>,
    /// Override the configured method (e.g. SDAF, ER, SCR).
    #[arg(long)]
    method: Option<Method>,
    /// Number of seed repetitions.
    #[arg(long)]
    seed_count: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mahalanobis,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Mahalanobis => Metric::Mahalanobis,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Run directories, or parents of run directories.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Write the table here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write LaTeX table rows to this file.
    #[arg(long)]
    latex: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Confusion,
    Scree,
    Accuracy,
}

#[derive(clap::Args)]
struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Defaults to `<in>/<kind>.svg`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(t) = args.stages {
        cfg.stages = t;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = args.class_order_seed {
        cfg.seeds.class_order = s;
    }
    if let Some(m) = args.ncm_metric {
        cfg.ncm_metric = m.into();
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(n) = args.seed_count {
        cfg.seed_count = n;
    }
    cfg.validate()?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let results = harness::run_configured(&cfg, base, Some(&args.out))?;
    for (i, r) in results.iter().enumerate() {
        println!(
            "{} run {}: A={:.4} E={:.4} F={} beta={:.4}",
            cfg.method,
            i,
            r.report.avg_incremental_accuracy,
            r.report.end_accuracy,
            r.report.forgetting.map_or("-".to_string(), |f| format!("{f:.4}")),
            r.report.balancedness
        );
    }
    Ok(())
}

fn load_runs(inputs: &[PathBuf]) -> Result<Vec<StoredRun>> {
    let mut runs = Vec::new();
    for dir in inputs {
        let found = StoredRun::discover(dir).with_context(|| format!("reading {}", dir.display()))?;
        if found.is_empty() {
            bail!("no runs found in {}", dir.display());
        }
        runs.extend(found);
    }
    Ok(runs)
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let rows = report::aggregate(&load_runs(&args.inputs)?)?;
    let mut sink: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    match args.format {
        Format::Csv => report::write_csv(&rows, &mut sink)?,
        Format::Json => {
            report::write_json(&rows, &mut sink)?;
            writeln!(sink)?;
        }
    }
    if let Some(p) = &args.latex {
        fs::write(p, report::render_latex(&rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn plot_cmd(args: PlotArgs) -> Result<()> {
    let runs = load_runs(std::slice::from_ref(&args.input))?;
    let name = match args.kind {
        PlotKind::Confusion => "confusion",
        PlotKind::Scree => "scree",
        PlotKind::Accuracy => "accuracy",
    };
    let out = args.output.unwrap_or_else(|| args.input.join(format!("{name}.svg")));
    match args.kind {
        PlotKind::Confusion => report::plot_confusion(&runs[0].confusion()?, &out)?,
        PlotKind::Scree => report::plot_scree(&runs[0].scree()?, &out)?,
        PlotKind::Accuracy => {
            let series: Vec<(String, Vec<f64>)> = runs
                .iter()
                .map(|r| {
                    let means = r.accuracy.rows.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
                    (r.dir.display().to_string(), means)
                })
                .collect();
            report::plot_accuracy(&series, &out)?;
        }
    }
    println!("{}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Report(a) => report_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}
