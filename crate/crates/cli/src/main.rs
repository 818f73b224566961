use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use team_cli::classify::{cmd_classify, ClassifyConfig};
use team_cli::config::RunFlags;
use team_cli::run::{cmd_run, render_text};
use team_cli::simulate::{cmd_simulate, SimulateConfig};
use team_core::sim::PipelineConfig;

/// Multi-layer aggregation-tree FDR testing for two-sample density differences.
#[derive(Parser, Debug)]
#[command(name = "team", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test where cohort 2's density exceeds cohort 1's.
    Run(RunArgs),
    /// Replicate a simulation setting and score FDP and misses.
    Simulate(SimulateArgs),
    /// Count, per event, the sub-analyses whose rejected region holds it.
    Classify(ClassifyArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Delimited table with a cohort column (or cohort 1 with --input2).
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Cohort 2 table for two-file input.
    #[arg(long)]
    input2: Option<PathBuf>,
    /// One character, or "tab".
    #[arg(long)]
    delimiter: Option<String>,
    #[arg(long)]
    cohort_column: Option<String>,
    #[arg(long)]
    sample_column: Option<String>,
    /// Quantile-normalize each channel across samples first.
    #[arg(long)]
    quantile_normalize: bool,
    #[arg(long)]
    alpha: Option<f64>,
    /// sequential or adaptive.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    bins_per_dim: Option<usize>,
    /// Pooled points wanted per leaf; sets the resolution instead of --bins-per-dim.
    #[arg(long)]
    target_bin_count: Option<f64>,
    #[arg(long)]
    max_layers: Option<usize>,
    #[arg(long)]
    min_rejections: Option<usize>,
    #[arg(long)]
    rejection_ratio: Option<f64>,
    /// Comma-separated markers for one sub-analysis; repeat for more.
    #[arg(long)]
    dims: Vec<String>,
    /// Swap the cohort labels: test where cohort 1 exceeds cohort 2.
    #[arg(long)]
    flip_cohorts: bool,
    /// Recorded in the summary; the analysis itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// S1, S2, S3 or S4.
    setting: Option<String>,
    /// JSON description of a custom setting.
    #[arg(long, conflicts_with = "setting")]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    bins_per_dim: Option<usize>,
    #[arg(long, visible_alias = "layers")]
    max_layers: Option<usize>,
    #[arg(long, short, default_value = "team-sim")]
    out: PathBuf,
    /// Write zero timings so repeated runs give identical files.
    #[arg(long)]
    omit_timing: bool,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// Leaf table written by `run`; repeat once per sub-analysis.
    #[arg(long = "table", required = true)]
    tables: Vec<PathBuf>,
    /// Events to classify; needs every marker the tables use.
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value = ",")]
    delimiter: String,
    #[arg(long, short, default_value = "team-classes")]
    out: PathBuf,
}

impl From<RunArgs> for RunFlags {
    fn from(a: RunArgs) -> Self {
        RunFlags {
            config: a.config,
            input: a.input,
            input2: a.input2,
            delimiter: a.delimiter,
            cohort_column: a.cohort_column,
            sample_column: a.sample_column,
            quantile_normalize: a.quantile_normalize,
            alpha: a.alpha,
            scheme: a.scheme,
            bins_per_dim: a.bins_per_dim,
            target_bin_count: a.target_bin_count,
            max_layers: a.max_layers,
            min_rejections: a.min_rejections,
            rejection_ratio: a.rejection_ratio,
            dims: a.dims,
            flip_cohorts: a.flip_cohorts,
            seed: a.seed,
            out: a.out,
        }
    }
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run(args) => {
            let config = RunFlags::from(args).resolve()?;
            let report = cmd_run(&config)?;
            print!("{}", render_text(&report));
        }
        Command::Simulate(args) => {
            let config = SimulateConfig {
                setting: args.setting,
                spec: args.spec,
                reps: args.reps,
                seed: args.seed,
                pipeline: PipelineConfig {
                    alpha: args.alpha,
                    bins_per_dim: args.bins_per_dim,
                    max_layers: args.max_layers,
                },
                out: args.out,
                omit_timing: args.omit_timing,
            };
            let summary = cmd_simulate(&config)?;
            println!(
                "{:>5} {:>8} {:>8} {:>10} {:>8}",
                "layer", "FDP", "sd", "missed", "sd"
            );
            for s in summary {
                println!(
                    "{:>5} {:>8.4} {:>8.4} {:>10.2} {:>8.2}",
                    s.layer, s.mean_fdp, s.sd_fdp, s.mean_false_negatives, s.sd_false_negatives
                );
            }
        }
        Command::Classify(args) => {
            let delimiter = match args.delimiter.as_str() {
                "tab" => b'\t',
                d if d.len() == 1 => d.as_bytes()[0],
                d => {
                    return Err(team_cli::config::config_error(format!(
                        "bad delimiter {d:?}"
                    )))
                }
            };
            let report = cmd_classify(&ClassifyConfig {
                tables: args.tables,
                events: args.events,
                delimiter,
                out: args.out,
            })?;
            println!(
                "{} events, {} sub-analyses",
                report.events,
                report.tables.len()
            );
            for share in &report.by_class {
                println!(
                    "{:<15} {:>9} {:>8.3}%",
                    share.class.as_str(),
                    share.events,
                    share.percent
                );
            }
            if report.flagged > 0 {
                println!(
                    "{} events found in exactly two regions were counted as nonfunctional",
                    report.flagged
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(team_cli::exit_code(&err) as u8)
        }
    }
}
