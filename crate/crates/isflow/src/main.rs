use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use isflow::cli::{
    cmd_estimate, cmd_fidelity, cmd_fit_weights, cmd_kl, cmd_pipeline, cmd_sample_rom, cmd_train,
    run_toy_ellipse, run_toy_rotation, CliError, ExperimentConfig, ProblemConfig, ToyKind,
};

/// Flow-driven importance sampling for threshold-exceedance probabilities.
#[derive(Parser)]
#[command(name = "isflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the KL spectrum of the exponential covariance kernel as CSV.
    Kl {
        /// Correlation length of the kernel.
        #[arg(long)]
        lc: f64,
        /// Number of modes.
        #[arg(long, visible_alias = "M")]
        modes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the reduced-order model (with fine-model error estimates).
    SampleRom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accept, truncate, and weight a raw sample CSV.
    FitWeights {
        #[arg(long)]
        config: PathBuf,
        /// Raw dataset CSV from sample-rom.
        #[arg(long)]
        data: PathBuf,
        /// Weighted dataset CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON sidecar with the fitted weight constants.
        #[arg(long)]
        meta: PathBuf,
    },
    /// Train the flow on a weighted dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        history_out: PathBuf,
    },
    /// Monte Carlo + importance-sampling estimates for a trained model.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Raw dataset CSV (for the fidelity counts in the report).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarse/fine agreement counts for a raw dataset.
    Fidelity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a toy experiment (rotation or ellipse).
    Toy {
        /// Which toy: rotation | ellipse.
        #[arg(long)]
        which: ToyKind,
        /// Optional config; a built-in one is used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
        /// Depth sweep for the ellipse toy, e.g. 2,4,8,16.
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        /// Seed for the built-in config (ignored when --config is given).
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Full elliptic run: sample-rom, fit-weights, train, estimate.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Kl { lc, modes, out } => cmd_kl(lc, modes, &out),
        Command::SampleRom { config, out } => {
            let config = ExperimentConfig::from_file(&config)?;
            cmd_sample_rom(&config, &out)
        }
        Command::FitWeights {
            config,
            data,
            out,
            meta,
        } => {
            let config = ExperimentConfig::from_file(&config)?;
            cmd_fit_weights(&config, &data, &out, &meta)
        }
        Command::Train {
            config,
            data,
            meta,
            model_out,
            history_out,
        } => {
            let config = ExperimentConfig::from_file(&config)?;
            cmd_train(&config, &data, &meta, &model_out, &history_out)
        }
        Command::Estimate {
            config,
            model,
            data,
            out,
        } => {
            let config = ExperimentConfig::from_file(&config)?;
            cmd_estimate(&config, &model, &data, &out)
        }
        Command::Fidelity { config, data, out } => {
            let config = ExperimentConfig::from_file(&config)?;
            cmd_fidelity(&config, &data, &out)
        }
        Command::Toy {
            which,
            config,
            outdir,
            depths,
            seed,
        } => {
            let config = match config {
                Some(path) => ExperimentConfig::from_file(&path)?,
                None => match which {
                    ToyKind::Rotation => ExperimentConfig::default_rotation(seed),
                    ToyKind::Ellipse => ExperimentConfig::default_ellipse(seed),
                },
            };
            match which {
                ToyKind::Rotation => {
                    if !matches!(config.problem, ProblemConfig::ToyRotation) {
                        return Err(CliError::Config(
                            "config problem kind does not match --which rotation".into(),
                        ));
                    }
                    let final_ce = run_toy_rotation(&config, &outdir)?;
                    println!("final cross entropy: {final_ce:.4}");
                }
                ToyKind::Ellipse => {
                    if !matches!(config.problem, ProblemConfig::ToyEllipse { .. }) {
                        return Err(CliError::Config(
                            "config problem kind does not match --which ellipse".into(),
                        ));
                    }
                    let depths = depths.unwrap_or_else(|| vec![config.flow.depth]);
                    let reports = run_toy_ellipse(&config, &outdir, &depths)?;
                    for r in &reports {
                        println!(
                            "L={}: mc {:.4} (sigma {:.4}), is {:.4} (sigma_w {:.4}), ratio {:.4}%",
                            r.depth,
                            r.mc.estimate,
                            r.mc.std_dev,
                            r.is.estimate,
                            r.is.std_dev,
                            100.0 * r.n_is_over_n_mc
                        );
                    }
                }
            }
            Ok(())
        }
        Command::Pipeline { config, outdir } => {
            let config = ExperimentConfig::from_file(&config)?;
            let artifacts = cmd_pipeline(&config, &outdir)?;
            if let Ok(text) = std::fs::read_to_string(&artifacts.report_json) {
                println!("{text}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ISFLOW_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
