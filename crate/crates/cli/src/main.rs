use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, ValueEnum};
use lightattn_cli::commands::{cmd_bench, cmd_curve, cmd_gradcheck, cmd_params, cmd_train};
use lightattn_cli::{exit_code, ExperimentConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    /// Train one model; write per-step metrics, a checkpoint and a summary.
    Train,
    /// Learning curves over growing block prefixes, per variant and fold.
    Curve,
    /// Finite-difference gradient checks for every op and variant.
    Gradcheck,
    /// Parameter counts per attention variant.
    Params,
    /// Attention score-tensor size and time versus length and heads.
    Bench,
}

#[derive(Debug, Parser)]
#[command(name = "lightattn", version, about = "Light transformer encoder experiments")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel jobs; 1 gives the reference ordering of work.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global()?;

    match cli.command {
        Command::Train => {
            let r = cmd_train(&cfg)?;
            let m = r.outcome.final_metrics;
            println!(
                "intent_f1_micro={:.4} intent_f1_macro={:.4} speaker_acc={:.4} metrics={}",
                m.intent_f1_micro,
                m.intent_f1_macro,
                m.speaker_accuracy,
                r.metrics_csv.display()
            );
        }
        Command::Curve => {
            let r = cmd_curve(&cfg)?;
            for ((variant, k), f1) in r.summary() {
                println!("{variant:>12} blocks={k:<4} intent_f1={f1:.4}");
            }
        }
        Command::Gradcheck => {
            let r = cmd_gradcheck(&cfg)?;
            for row in &r.rows {
                println!("{:<40} {:.3e}", row.name, row.report.max_rel_error);
            }
        }
        Command::Params => {
            let r = cmd_params(&cfg)?;
            println!("{:>12} {:>12} {:>12} {:>10}", "variant", "encoder", "layers", "extras");
            for row in &r.rows {
                println!(
                    "{:>12} {:>12} {:>12} {:>10}",
                    row.variant.name(),
                    row.encoder_params,
                    row.layer_stack_params,
                    row.position_extras
                );
            }
        }
        Command::Bench => {
            let r = cmd_bench(&cfg)?;
            println!("wrote {} rows to {}", r.rows.len(), r.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
