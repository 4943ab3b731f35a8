use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use hivetrack::config::PipelineConfig;
use hivetrack::pipeline;

#[derive(Parser, Debug)]
#[command(name = "hivetrack", version, about = "Track many near-identical animals from per-frame detections")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// INI file with pipeline parameters; see the defaults below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, split into named substreams per stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Override one parameter, e.g. `--set joiner.stall_limit=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Link detections into track fragments and residual singles.
    Fragments {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join fragments into trajectories using the frames.
    Join {
        /// Directory holding fragments.csv and residuals.csv.
        #[arg(long)]
        fragments: PathBuf,
        /// Directory of frame_%06d.pgm images.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trajectories against a bundle's ground truth.
    Eval {
        #[arg(long)]
        trajectories: PathBuf,
        /// Bundle directory with truth.csv, false_positives.csv and manifest.txt.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw trajectories into a grayscale overlay, darker for faster ones.
    Plot {
        #[arg(long)]
        trajectories: PathBuf,
        /// Output PGM file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Run every stage into one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        cfg.merge_ini_str(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let workers = cli.common.workers;
    match cli.command {
        Command::Synth { out } => {
            pipeline::run_synth(&cfg, workers, &out)?;
        }
        Command::Fragments { detections, out } => {
            let set = pipeline::run_fragments(&cfg, &detections, &out)?;
            println!("{} fragments, {} residual singles", set.fragments.len(), set.residuals.len());
        }
        Command::Join { fragments, frames, out } => {
            let outcome = pipeline::run_join(&cfg, &fragments, &frames, workers, &out)?;
            println!("{} trajectories", outcome.trajectories.len());
        }
        Command::Eval { trajectories, bundle, out } => {
            let report = pipeline::run_eval(&cfg, &trajectories, &bundle, &out)?;
            print_summary(&report);
        }
        Command::Plot { trajectories, out, width, height } => {
            let (w, h) = cfg.plot_size();
            pipeline::run_plot(&trajectories, width.unwrap_or(w), height.unwrap_or(h), &out)?;
        }
        Command::Pipeline { out } => {
            let report = pipeline::run_pipeline(&cfg, workers, &out)?;
            print_summary(&report);
            println!("run directory: {}", out.display());
        }
    }
    Ok(())
}

fn print_summary(report: &hivetrack::metrics::EvalReport) {
    for (k, v) in &report.summary {
        println!("{k} = {v:.4}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let defaults = format!("Defaults (INI, also accepted by --config):\n\n{}", PipelineConfig::default().to_ini());
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
