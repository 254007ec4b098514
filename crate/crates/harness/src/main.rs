use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mflb_core::kv::KvMap;
use mflb_core::policy::PolicyCheckpoint;
use mflb_harness::records::{self, EpochRow, ReplicationRow, ScalingRecord, SummaryRow, TrainRow};
use mflb_harness::{
    compare, evaluate_policy_finite, evaluate_policy_mfc, scaling_study, Error, ExperimentConfig, Result,
};

#[derive(Parser)]
#[command(name = "mflb", version, about = "Mean-field load balancing under synchronization delay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an upper-level policy with PPO on the mean-field MDP.
    Train(Common),
    /// Roll out policies on the mean-field MDP.
    EvalMfc(Common),
    /// Monte Carlo evaluation of policies on the finite system.
    EvalFinite(Common),
    /// System-size study per policy and delay, with the mean-field limit.
    Sweep(Common),
    /// All policies side by side over delays and system sizes.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "MFLB_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "MFLB_OUT")]
    out: Option<PathBuf>,
    /// Policy to evaluate: mf_jsq, mf_rnd or learned:<checkpoint>. Repeatable.
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// Worker threads for replications; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut kv = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::File { path: path.clone(), source })?;
                KvMap::parse(&text)?
            }
            None => KvMap::new(),
        };
        if !self.overrides.is_empty() {
            kv.merge(&KvMap::parse(&self.overrides.join("\n"))?);
        }
        let mut cfg = ExperimentConfig::from_kv(&kv)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if !self.policies.is_empty() {
            cfg.policies = self.policies.iter().map(|p| p.parse()).collect::<Result<_>>()?;
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out).map_err(|source| Error::File { path: cfg.out.clone(), source })?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => c.resolve().and_then(|cfg| train(&cfg)),
        Command::EvalMfc(c) => c.resolve().and_then(|cfg| eval(&cfg, false)),
        Command::EvalFinite(c) => c.resolve().and_then(|cfg| eval(&cfg, true)),
        Command::Sweep(c) => c.resolve().and_then(|cfg| sweep(&cfg)),
        Command::Compare(c) => c.resolve().and_then(|cfg| run_compare(&cfg)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let log_path = cfg.out.join("train_log.csv");
    let best_path = cfg.out.join("best.ckpt");
    let mut log = records::writer(&log_path)?;
    let checkpoint = |policy: &mflb_core::UpperPolicy, path: &Path| {
        PolicyCheckpoint { config: cfg.system.clone(), policy: policy.clone() }.save(path)
    };
    let mut best_so_far = f64::NEG_INFINITY;
    let outcome = mflb_core::train(&cfg.system, &cfg.ppo, cfg.seed, |report, _, best| {
        log.serialize(TrainRow {
            iteration: report.iteration,
            timesteps: report.timesteps,
            mean_return: report.mean_return,
            best_return: report.best_return,
            mean_kl: report.diagnostics.mean_kl,
            clip_fraction: report.diagnostics.clip_fraction,
        })
        .map_err(std::io::Error::from)?;
        log.flush()?;
        if report.best_return > best_so_far {
            best_so_far = report.best_return;
            checkpoint(best, &best_path)?;
        }
        log::info!(
            "iteration {} ({} steps): train {:.4} eval {:.4} best {:.4} kl {:.4} clip {:.3}{} [{:.0}s]",
            report.iteration,
            report.timesteps,
            report.mean_return,
            report.eval_return,
            report.best_return,
            report.diagnostics.mean_kl,
            report.diagnostics.clip_fraction,
            if report.diagnostics.aborted { " (update rolled back)" } else { "" },
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    // Covers the zero-iteration case, where the observer never runs.
    checkpoint(&outcome.best, &best_path)?;
    checkpoint(&outcome.final_policy, &cfg.out.join("final.ckpt"))?;
    log::info!("best deterministic return {:.4}; wrote {}", outcome.best_return, cfg.out.display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, finite: bool) -> Result<()> {
    let delta_t = cfg.system.delta_t;
    let horizon = cfg.horizon_for(delta_t);
    let size = finite.then_some((cfg.system.num_queues, cfg.system.num_clients));
    let (mut summary, mut reps, mut epochs) = (Vec::new(), Vec::new(), Vec::new());
    for spec in &cfg.policies {
        let policy = spec.load(&cfg.system)?;
        let eval = if finite {
            evaluate_policy_finite(&*policy, &cfg.system, horizon, cfg.replications, cfg.seed, cfg.threads)?
        } else {
            evaluate_policy_mfc(&*policy, &cfg.system, horizon, cfg.replications, cfg.seed, cfg.threads)?
        };
        log::info!(
            "{spec}: {:.4} ± {:.4} drops/queue over {horizon} epochs, return {:.4} ({:.1}s)",
            eval.drops_per_queue.mean,
            eval.drops_per_queue.half_width,
            eval.discounted_return.mean,
            eval.wall_clock_secs
        );
        let label = spec.to_string();
        summary.push(SummaryRow::new(&label, delta_t, size, &eval));
        reps.extend(ReplicationRow::all(&label, delta_t, &eval));
        epochs.extend(EpochRow::all(&label, &eval));
    }
    let prefix = if finite { "finite" } else { "mfc" };
    records::write_rows(&cfg.out.join(format!("{prefix}_summary.csv")), &summary)?;
    records::write_rows(&cfg.out.join(format!("{prefix}_replications.csv")), &reps)?;
    records::write_rows(&cfg.out.join(format!("{prefix}_epochs.csv")), &epochs)
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let mut rows = Vec::new();
    for &delta_t in &cfg.delta_ts {
        let template = cfg.system_at(delta_t, cfg.system.num_queues, cfg.system.num_clients)?;
        for spec in &cfg.policies {
            let policy = spec.load(&template)?;
            let study = scaling_study(
                &*policy,
                &template,
                &cfg.sizes(),
                cfg.horizon_for(delta_t),
                cfg.replications,
                cfg.seed,
                cfg.threads,
            )?;
            let label = spec.to_string();
            rows.extend(study.iter().map(|r| ScalingRecord::new(&label, delta_t, r)));
        }
    }
    records::write_rows(&cfg.out.join("sweep.csv"), &rows)
}

fn run_compare(cfg: &ExperimentConfig) -> Result<()> {
    let rows: Vec<SummaryRow> = compare(cfg)?.iter().map(SummaryRow::from_entry).collect();
    records::write_rows(&cfg.out.join("compare.csv"), &rows)
}
