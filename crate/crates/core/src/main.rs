use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ravn::cli::{eval_dir, run_ablate, run_eval, run_plot, run_train};
use ravn::config::load_config;
use ravn::eval::Split;

#[derive(Parser)]
#[command(name = "ravn", version, about = "Reliability-aware audio-visual navigation testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Heard,
    Unheard,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant; writes train_log.csv and checkpoint.bin.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the heard and/or unheard split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
    },
    /// Train and evaluate all four variants over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render trajectory SVGs from a stored evaluation.
    Plot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let mut updates = 0usize;
            let out = run_train(&cfg, |row| {
                updates += 1;
                if updates.is_multiple_of(10) {
                    eprintln!(
                        "step {:>9}  sr_recent {:.2}  l_total {:.4}",
                        row.step, row.sr_recent, row.loss.l_total
                    );
                }
            })?;
            eprintln!(
                "trained {} updates; checkpoint at {}",
                out.log.len(),
                cfg.out_dir.join("checkpoint.bin").display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&config)?;
            let splits: &[Split] = match split {
                SplitArg::Heard => &[Split::Heard],
                SplitArg::Unheard => &[Split::Unheard],
                SplitArg::Both => &Split::ALL,
            };
            cfg.echo()?;
            let dir = eval_dir(&cfg);
            let report = run_eval(&cfg, &checkpoint, splits, &dir)?;
            for m in &report.splits {
                println!(
                    "{:<8} n={:<4} SR {:6.2}  SPL {:6.2}  SNA {:6.2}",
                    m.split, m.episodes, m.sr, m.spl, m.sna
                );
            }
            eprintln!("report written to {}", dir.display());
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let rows = run_ablate(&cfg, |v, s| eprintln!("training {v} (seed {s})"))?;
            for row in &rows {
                let (h, u) = row.mean();
                println!(
                    "{:<8} heard SR {:6.2} SPL {:6.2} SNA {:6.2} | unheard SR {:6.2} SPL {:6.2} SNA {:6.2}",
                    row.variant, h[0], h[1], h[2], u[0], u[1], u[2]
                );
            }
        }
        Command::Plot { records, maps, out } => {
            let n = run_plot(&records, &maps, &out)?;
            eprintln!("wrote {n} SVGs to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
