use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use erba::checkpoint::{load_checkpoint, save_checkpoint};
use erba::config::TrainConfig;
use erba::dataset::parse_dataset;
use erba::eval::{evaluate, format_metrics, predict, write_predictions};
use erba::gradcheck::{run_gradcheck, TOLERANCE};
use erba::synth::{gen_synth, write_synth, SynthSpec};
use erba::train::{select, train};

#[derive(Parser)]
#[command(version, about = "Staged multimodal enzyme-kinetics regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted structure.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print z-space metrics of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Warn when the checkpoint was trained under a different configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Append predictions to a dataset table.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a micro batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenSynth { spec, seed, out } => {
            let spec = SynthSpec::load(&spec)?;
            let data = gen_synth(&spec, seed)?;
            write_synth(&out, &data)?;
            println!("wrote {} samples to {}", data.records.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            workers,
        } => {
            let mut config = TrainConfig::load(&config)?;
            if let Some(w) = workers {
                config.workers = w;
            }
            config.validate()?;
            let records = parse_dataset(&data)?;
            let trained = train(&config, &records)?;
            save_checkpoint(&out, &config, &trained.store)?;
            if let Some(last) = trained.log.epochs.last() {
                println!("final_task_loss={}", last.task);
            }
        }
        Command::Eval { ckpt, data, config } => {
            let ck = load_checkpoint(&ckpt)?;
            if let Some(path) = config {
                let current = TrainConfig::load(&path)?;
                if !ck.matches(&current) {
                    log::warn!("{} was trained under a different configuration", ckpt.display());
                }
            }
            let records = parse_dataset(&data)?;
            let selected = select(&ck.config, &records);
            if selected.is_empty() {
                bail!("no samples for the checkpoint's endpoint in {}", data.display());
            }
            let report = evaluate(&ck.model, &ck.store, &selected, ck.config.workers)?;
            print!("{}", format_metrics(&report));
        }
        Command::Predict { ckpt, data, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let records = parse_dataset(&data)?;
            let all: Vec<_> = records.iter().collect();
            let preds = predict(&ck.model, &ck.store, &all, ck.config.workers)?;
            write_predictions(&out, &all, &preds)?;
        }
        Command::Gradcheck { config } => {
            let config = TrainConfig::load(&config)?;
            let reports = run_gradcheck(&config).context("gradient check failed to run")?;
            let mut ok = true;
            for r in &reports {
                let w = &r.worst;
                println!(
                    "{}\tparam={}\tmax_rel_error={:.3e}\tworst=({}, {})\tanalytic={:e}\tnumeric={:e}",
                    r.module, w.name, w.max_rel_error, w.worst.0, w.worst.1, w.analytic, w.numeric
                );
                ok &= w.max_rel_error < TOLERANCE;
            }
            if !ok {
                eprintln!("relative error at or above {TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
