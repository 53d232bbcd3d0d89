use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsk_cli::{commands, CliError, Layout, RunConfig};

#[derive(Parser)]
#[command(name = "dsk", version, about = "Unpaired statistical downscaling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Run directory (defaults to `runs/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the HF and LF datasets and their coarse views.
    GenData(Common),
    /// Fit the entropic transport map between LF and coarsened HF fields.
    FitOt(Common),
    /// Train the diffusion denoiser on HF fields.
    TrainDenoiser(Common),
    /// Debias held-out LF conditions and draw conditional samples.
    Sample(Common),
    /// Cubic and BCSD baselines.
    Baseline(Common),
    /// Metrics for every method in the run, or for one file pair.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predicted samples (.dsnp); prints their metrics as JSON
        #[arg(long, requires = "reference")]
        pred: Option<PathBuf>,
        /// Reference samples (.dsnp) for `--pred`
        #[arg(long = "ref", requires = "pred")]
        reference: Option<PathBuf>,
    },
    /// Collate the metrics into a comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Accept metrics from differing configs or missing methods.
        #[arg(long)]
        force: bool,
    },
}

fn setup(c: &Common) -> Result<(RunConfig, Layout), CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let root = c.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    log::info!("run {} in {} (config {})", cfg.name, root.display(), &cfg.hash()[..12]);
    Ok((cfg, Layout::new(root)))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => setup(&c).and_then(|(cfg, l)| commands::gen_data(&cfg, &l)),
        Command::FitOt(c) => setup(&c).and_then(|(cfg, l)| commands::fit_ot(&cfg, &l)),
        Command::TrainDenoiser(c) => setup(&c).and_then(|(cfg, l)| commands::train_denoiser(&cfg, &l)),
        Command::Sample(c) => setup(&c).and_then(|(cfg, l)| commands::sample(&cfg, &l)),
        Command::Baseline(c) => setup(&c).and_then(|(cfg, l)| commands::baseline(&cfg, &l)),
        Command::Evaluate { common, pred, reference } => {
            let (cfg, layout) = setup(&common)?;
            match (pred, reference) {
                (Some(p), Some(r)) => {
                    let report = commands::evaluate_files(&cfg, &p, &r)?;
                    println!("{}", serde_json::to_string_pretty(&report).expect("metrics serialize"));
                }
                _ => {
                    for m in commands::evaluate(&cfg, &layout)? {
                        println!("{} -> {}", m.label(), layout.metrics(m).display());
                    }
                }
            }
            Ok(())
        }
        Command::Report { common, force } => {
            let (_, layout) = setup(&common)?;
            let rows = commands::report(&layout, force)?;
            print!("{}", commands::format_table(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSK_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
