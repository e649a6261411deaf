use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tcc_cli::commands::{self, GRADCHECK_TOLERANCE};
use tcc_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "tcc", version, about = "Condensed-context feature pyramid refinement: training, evaluation, FLOPs and traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parameter checkpoint to start from (train) or to evaluate (eval, trace).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic benchmark; writes metrics.csv and checkpoint.tcc.
    Train,
    /// Print the benchmark recall of a checkpoint.
    Eval,
    /// Write analytical FLOPs reports for none / conv3x3 / tcc refinement.
    Flops,
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Write the condensed-context trace of one scene.
    Trace,
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let ckpt = cli.checkpoint.as_deref();
    match cli.command {
        Command::Train => {
            let o = commands::cmd_train(&cfg, &out, ckpt)?;
            if let Some(last) = o.metrics.last() {
                println!("step {} loss {} recall {}", last.step, last.loss, last.recall);
            }
            println!("wrote {} and {}", o.metrics_path.display(), o.checkpoint_path.display());
        }
        Command::Eval => println!("recall {}", commands::cmd_eval(&cfg, ckpt)?),
        Command::Flops => {
            let s = commands::cmd_flops(&cfg, &out)?;
            println!("total flops: none {} conv3x3 {} tcc {}", s.none.total_flops, s.conv3x3.total_flops, s.tcc.total_flops);
            println!("refinement delta: conv3x3 {} tcc {} ratio {:.4}", s.conv_delta, s.tcc_delta, s.ratio);
            println!("reports in {}", out.join("flops").display());
        }
        Command::Gradcheck => {
            let rows = commands::cmd_gradcheck(cfg.seed)?;
            print!("{}", commands::render_gradcheck(&rows));
            return Ok(rows.iter().all(|r| r.max_rel_error < GRADCHECK_TOLERANCE));
        }
        Command::Trace => {
            let (path, records) = commands::cmd_trace(&cfg, ckpt, &out)?;
            println!("wrote {} records to {}", records.len(), display(&path));
        }
    }
    Ok(true)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
