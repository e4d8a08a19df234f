use std::path::PathBuf;
use std::process::ExitCode;

use aldr_core::config::SEED_ENV;
use aldr_core::dataset::SyntheticConfig;
use aldr_core::evaluator::format_report;
use aldr_core::pipeline::{self, EvalOptions, GenerateOptions};
use aldr_core::{Ablation, Error, ErrorClass, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aldr", version, about = "Speaker-feature disentanglement: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: WAVs, manifest, nuisance labels and a trial list.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        speakers: usize,
        #[arg(long)]
        nuisance: usize,
        #[arg(long)]
        utts: usize,
        /// Falls back to ALDR_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = aldr_core::audio::DEFAULT_SAMPLE_RATE)]
        sample_rate: u32,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.ablation.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trial list and write report.txt, det.csv and scores.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to manifest.txt next to the trial list.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Add speaker and nuisance linear probes on both feature branches.
        #[arg(long)]
        probe: bool,
    },
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            out,
            speakers,
            nuisance,
            utts,
            seed,
            sample_rate,
            force,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.ok_or_else(|| Error::Config(format!("--seed not given and {SEED_ENV} not set")))?,
            };
            let mut synthetic = SyntheticConfig::new(speakers, nuisance, utts);
            synthetic.sample_rate = sample_rate;
            let manifest = pipeline::generate(&GenerateOptions {
                out: out.clone(),
                synthetic,
                seed,
                force,
            })?;
            println!(
                "wrote {} utterances from {} speakers to {}",
                manifest.len(),
                manifest.num_speakers(),
                out.display()
            );
        }
        Command::Train {
            config,
            ablation,
            resume,
        } => {
            let mut rc = RunConfig::load(&config)?;
            if let Some(name) = ablation {
                rc.train.ablation = Ablation::parse(&name)?;
            }
            let t = pipeline::train_run(&rc, resume.as_deref())?;
            if let Some(h) = t.history.last() {
                println!(
                    "finished {} epochs ({} steps); last L_p {:.4}, held-out speaker accuracy {:.3}",
                    t.progress.global_epoch, t.progress.step, h.mean_l_p, h.speaker_accuracy
                );
            }
            println!("checkpoints in {}", rc.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            trials,
            out,
            manifest,
            probe,
        } => {
            let o = pipeline::eval_run(&EvalOptions {
                checkpoint,
                trials,
                out,
                manifest,
                probe,
            })?;
            print!("{}", format_report(&o.report, &o.probes));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Other => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
