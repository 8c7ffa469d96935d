use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recodiff_cli::commands::{self, EvaluateArgs, InputKind, PhantomGenArgs, ReconstructArgs, Weights};
use recodiff_cli::{CliError, ExperimentConfig, Method};
use recodiff_core::phantoms::PhantomKind;
use recodiff_core::ScheduleStrategy;

/// Sparse-view CT reconstruction with cold-diffusion sampling.
///
/// Set RECO_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "recodiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset with a manifest.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length; taken from the config geometry when omitted.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value = "random")]
        kind: PhantomKind,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the restorer and write checkpoints and the training log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Reconstruct one image or sinogram.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "image")]
        input_kind: InputKind,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        views: usize,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "ema")]
        weights: Weights,
        /// Test only: replace the restorer by the reference image.
        #[arg(long)]
        oracle_restorer: bool,
        /// Save every intermediate state as state_t{t}.pgm.
        #[arg(long)]
        dump_states: bool,
    },
    /// Compute metrics for methods and view settings over a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        weights: Option<Weights>,
    },
    /// Print a view schedule built from its endpoints.
    Schedule {
        #[arg(long)]
        full: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value = "geometric")]
        strategy: ScheduleStrategy,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. For train it replaces the config output; for
    /// reconstruct and evaluate it only redirects results, and weights are
    /// still read from the config output.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("RECO_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("RECO_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::PhantomGen { out, count, seed, size, kind, force, config } => {
            let size = match (size, config) {
                (Some(s), _) => s,
                (None, Some(path)) => ExperimentConfig::load(&path)?.geometry.image_size,
                (None, None) => return Err(CliError::Config("either --size or --config is required".into())),
            };
            let entries = commands::phantom_gen(&PhantomGenArgs { out: out.clone(), count, seed, size, kind, force })?;
            println!("wrote {} phantoms to {}", entries.len(), out.display());
        }
        Command::Train { common, iterations } => {
            let mut cfg = common.load()?;
            if let Some(out) = common.out {
                cfg.output = out;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let summary = commands::train(&cfg)?;
            match summary.final_restore_loss {
                Some(loss) => println!(
                    "trained {} iterations, final restore loss {loss:.6e}, output in {}",
                    summary.iterations,
                    summary.out.display()
                ),
                None => println!("wrote initial checkpoint to {}", summary.out.display()),
            }
        }
        Command::Reconstruct {
            common,
            input,
            input_kind,
            method,
            views,
            reference,
            checkpoint,
            weights,
            oracle_restorer,
            dump_states,
        } => {
            let cfg = common.load()?;
            let args = ReconstructArgs {
                input,
                input_kind,
                method,
                views,
                out: common.out.clone(),
                reference,
                checkpoint,
                weights,
                oracle: oracle_restorer,
                dump_states,
            };
            let s = commands::reconstruct(&cfg, &args)?;
            println!("wrote {} (NFE {})", s.output.display(), s.nfe);
            if let Some(m) = s.metrics {
                println!("RMSE {:.2} HU, PSNR {:.2} dB, SSIM {:.2}%", m.rmse_hu, m.psnr_db, m.ssim_pct());
            }
        }
        Command::Evaluate { common, dataset, methods, views, checkpoint, weights } => {
            let cfg = common.load()?;
            let args = EvaluateArgs { dataset, methods, views, out: common.out.clone(), checkpoint, weights };
            let (_, summary) = commands::evaluate(&cfg, &args)?;
            println!(
                "{:>6} {:>6} {:>10} {:>10} {:>9} {:>4}",
                "views", "method", "RMSE[HU]", "PSNR[dB]", "SSIM[%]", "NFE"
            );
            for s in summary {
                println!(
                    "{:>6} {:>6} {:>10.2} {:>10.2} {:>9.2} {:>4}",
                    s.views,
                    s.method.name(),
                    s.rmse_hu,
                    s.psnr_db,
                    s.ssim_pct,
                    s.nfe
                );
            }
        }
        Command::Schedule { full, target, steps, strategy } => {
            let s = commands::schedule_levels(full, target, steps, strategy)?;
            println!("levels = {:?}", s.levels());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
