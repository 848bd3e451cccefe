use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covsem::agents::{policy_from_checkpoint, Algorithm};
use covsem::harness::{
    emit_slot_heatmap, evaluate_checkpoint, run_sweep, train_all, Experiment, ExperimentConfig, HarnessError, SweepAxis,
};
use covsem::neural::Checkpoint;

#[derive(Parser)]
#[command(name = "covsem", version, about = "Covert semantic transmission experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed and write curves, metrics and checkpoints.
    Train(Common),
    /// Evaluate a saved checkpoint greedily.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate across values of G, N or the attacker count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Per-slot transmission and monitoring frequencies of a greedy policy,
    /// trained first unless a checkpoint is given.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Single training seed, replacing the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, Algorithm, PathBuf), HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.clone();
        }
        let algorithm = self.algorithm.unwrap_or(cfg.agent.algorithm);
        cfg.agent.algorithm = algorithm;
        let out = cfg.run.out_dir.clone();
        Ok((cfg, algorithm, out))
    }
}

/// Writes the experiment and reports diverged runs. Returns whether all
/// runs finished cleanly.
fn finish(exp: &Experiment, out: &Path) -> Result<bool, HarnessError> {
    exp.write(out)?;
    let diverged = exp.divergences();
    for (seed, msg) in &diverged {
        eprintln!("seed {seed} diverged: {msg}");
    }
    for s in &exp.skipped {
        eprintln!("skipped {} = {}: {}", exp.axis.map_or("", SweepAxis::name), s.axis_value, s.reason);
    }
    println!("{} run(s) written to {}", exp.runs.len(), out.display());
    Ok(diverged.is_empty())
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, algorithm, out) = common.resolve()?;
            finish(&train_all(&cfg, algorithm)?, &out)
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, _, out) = common.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let s = evaluate_checkpoint(&cfg, &ckpt, &out)?;
            println!(
                "{}: return {:.4}, E_U {:.4}, E_A {:.4}, private {:.3}, delivered {:.1}%",
                ckpt.algorithm, s.mean_return, s.e_user, s.e_attacker, s.private_prob, s.delivery_pct
            );
            Ok(true)
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, algorithm, out) = common.resolve()?;
            finish(&run_sweep(&cfg, algorithm, axis, &values)?, &out)
        }
        Command::Heatmap { common, checkpoint } => {
            let (mut cfg, algorithm, out) = common.resolve()?;
            let scenario = cfg.scenario()?;
            let (policy, clean) = match checkpoint {
                Some(path) => (policy_from_checkpoint(&Checkpoint::load(&path)?, &scenario)?, true),
                None => {
                    cfg.run.seeds.truncate(1);
                    let exp = train_all(&cfg, algorithm)?;
                    let clean = finish(&exp, &out)?;
                    (policy_from_checkpoint(&exp.runs[0].checkpoint, &scenario)?, clean)
                }
            };
            let rows = emit_slot_heatmap(&cfg, policy.as_ref(), &out)?;
            println!("{} slot rows written to {}", rows.len(), out.join("heatmap.csv").display());
            Ok(clean)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
