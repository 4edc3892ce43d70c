use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesiondet::config::RunConfig;
use lesiondet::dataset::{Split, DEFAULT_MALIGNANT_FRACTION};
use lesiondet::training::TrainOptions;
use lesiondet_cli::{commands, exit_code};

#[derive(Parser)]
#[command(name = "lesiondet", version, about = "Soft-tissue lesion candidate detection pipeline")]
struct Cli {
    /// Seed for every random choice (overrides the configuration file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SplitArgs {
    /// Split to process.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Split file written by `train`; recomputed from the seed if omitted.
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a JSON-lines manifest.
    Synth {
        #[arg(long, default_value_t = 60)]
        n_exams: usize,
        #[arg(long, default_value_t = DEFAULT_MALIGNANT_FRACTION)]
        malignant_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write preprocessed images and breast masks for every manifest entry.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the u-net on the training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        split_file: Option<PathBuf>,
        /// Continue from `<out_model>.last` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Write probability maps for the images of a split.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract candidates and compute image- and exam-based FROC curves.
    Froc {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out_prefix: PathBuf,
        /// Logarithmic false-positive axis in the SVG.
        #[arg(long)]
        log_x: bool,
    },
    /// Render FROC CSV files to an SVG plot.
    Plot {
        #[arg(long = "csv", required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_x: bool,
    },
}

fn run(cli: Cli) -> lesiondet::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(lesiondet::Error::InvalidArgument("--threads must be at least 1".into()));
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth {
            n_exams,
            malignant_fraction,
            out,
        } => {
            let manifest = commands::cmd_synth(&cfg, n_exams, malignant_fraction, &out)?;
            println!("wrote {}", manifest.display());
        }
        Command::Preprocess { manifest, out } => {
            let n = commands::cmd_preprocess(&cfg, &manifest, &out)?;
            println!("preprocessed {n} images into {}", out.display());
        }
        Command::Train {
            manifest,
            out_model,
            split_file,
            resume,
        } => {
            let opts = TrainOptions {
                resume,
                stop_after: None,
            };
            let report = commands::cmd_train(&cfg, &manifest, &out_model, split_file.as_deref(), &opts)?;
            for r in &report.history {
                println!(
                    "epoch {:>3}  train {:.5}  val {:.5}  lr {}",
                    r.epoch, r.train_loss, r.val_loss, r.lr
                );
            }
            println!(
                "best validation loss {:.5} at epoch {}; model {}",
                report.best_val_loss,
                report.best_epoch,
                out_model.display()
            );
        }
        Command::Infer {
            model,
            manifest,
            split,
            out,
        } => {
            let ids = commands::cmd_infer(&cfg, &model, &manifest, split.split, split.split_file.as_deref(), &out)?;
            println!("wrote {} probability maps to {}", ids.len(), out.display());
        }
        Command::Froc {
            maps,
            manifest,
            split,
            out_prefix,
            log_x,
        } => {
            let out = commands::cmd_froc(
                &cfg,
                &maps,
                &manifest,
                split.split,
                split.split_file.as_deref(),
                &out_prefix,
                log_x,
            )?;
            for line in &out.summary {
                println!("{line}");
            }
        }
        Command::Plot { csvs, out, log_x } => {
            commands::cmd_plot(&csvs, &out, log_x)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_options_follow_the_subcommand() {
        let cli = Cli::try_parse_from(["lesiondet", "infer", "--model", "m", "--manifest", "x", "--out", "o", "--seed", "7"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        match cli.command {
            Command::Infer { split, .. } => {
                assert_eq!(split.split, Split::Test);
                assert!(split.split_file.is_none());
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn plot_requires_a_csv() {
        assert!(Cli::try_parse_from(["lesiondet", "plot", "--out", "f.svg"]).is_err());
    }
}
