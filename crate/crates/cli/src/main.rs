use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mafnet_cli::{
    ablation_csv, cmd_ablate, cmd_eval, cmd_export_attention, cmd_gen, cmd_gradcheck, cmd_train,
    gradcheck_verdict, load_config, Axis, CliError, Split,
};

#[derive(Parser)]
#[command(
    name = "mafnet",
    version,
    about = "Audio-visual attention fusion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-cell dataset.
    Gen {
        /// SyntheticSpec JSON; the built-in four-class spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, then write report.csv and checkpoint.mafc to output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Finite-difference gradient suite over ops and all model variants.
    Gradcheck {
        /// Number of random seeds for the op-level checks.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Also write per-case results here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train one model per variant along an axis and print test accuracies as CSV.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention scores of one dataset record as CSV.
    ExportAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { spec, out } => {
            let ds = cmd_gen(spec.as_deref(), &out)?;
            eprintln!("wrote {} records to {}", ds.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let o = cmd_train(&cfg)?;
            println!(
                "best epoch {} of {}, val accuracy {:.4}, test accuracy {:.4}",
                o.report.best_epoch,
                o.report.epochs.len(),
                o.report.best_val_accuracy,
                o.test_accuracy
            );
            eprintln!("report: {}", o.report_path.display());
            eprintln!("checkpoint: {}", o.checkpoint_path.display());
        }
        Command::Eval {
            config,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&config)?;
            println!("{:.6}", cmd_eval(&cfg, &checkpoint, split)?);
        }
        Command::Gradcheck { seeds, csv } => {
            let r = cmd_gradcheck(seeds)?;
            if let Some(path) = &csv {
                std::fs::write(path, r.to_csv()).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            let worst = r.worst().expect("suite has cases");
            println!(
                "{} cases, worst {} at {:.3e}, {:.1}s",
                r.cases.len(),
                worst.name,
                worst.max_rel_error,
                r.elapsed.as_secs_f64()
            );
            gradcheck_verdict(&r)?;
        }
        Command::Ablate { axis, config, out } => {
            let cfg = load_config(&config)?;
            let csv = ablation_csv(&cmd_ablate(&cfg, axis)?);
            match out {
                Some(path) => {
                    std::fs::write(&path, csv).map_err(|source| CliError::Io { path, source })?
                }
                None => print!("{csv}"),
            }
        }
        Command::ExportAttention {
            config,
            checkpoint,
            record,
        } => {
            let cfg = load_config(&config)?;
            print!("{}", cmd_export_attention(&cfg, &checkpoint, record)?);
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
