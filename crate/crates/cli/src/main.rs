//! `rgfm`: two-stage pretraining over multi-graph pools, few-shot and
//! link evaluation, robustness sweeps, and the numerical oracle suites.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on an
//! infeasible memory budget.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rgfm_core::pipeline::{
    self, Checkpoint, PerturbKind, RoutingEpoch, RunConfig, RunReport,
};
use rgfm_core::{oracle, RgfmError};

#[derive(Parser)]
#[command(name = "rgfm", version, about = "Adaptive-hop graph-of-graphs foundation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the worker pool size.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, RgfmError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(t) = self.threads {
            cfg.threads = t.max(1);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained (stage-2) checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Override shots per class.
    #[arg(long)]
    shots: Option<usize>,
    /// Override the number of evaluation seeds (uses 0..N).
    #[arg(long)]
    seeds: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl EvalArgs {
    fn load(&self) -> Result<(RunConfig, Checkpoint), RgfmError> {
        let mut cfg = self.config.load()?;
        if let Some(s) = self.shots {
            cfg.shots = s;
        }
        if let Some(n) = self.seeds {
            if n == 0 {
                return Err(RgfmError::Config("--seeds must be at least 1".into()));
            }
            cfg.seeds = (0..n as u64).collect();
        }
        let ckpt = Checkpoint::load(&self.ckpt)?;
        Ok((cfg, ckpt))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: candidate expert determination, subgraph caching, and
    /// contrastive encoder pretraining on the source graphs.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long, default_value = "checkpoints/stage1.ckpt")]
        out: PathBuf,
    },
    /// Stage 2: GoG construction, expert routing and fusion training.
    Stage2 {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Checkpoint output path.
        #[arg(long, default_value = "checkpoints/stage2.ckpt")]
        out: PathBuf,
        /// Write the routing trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// K-shot node classification on the held-out target.
    EvalNode {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Link prediction AUC-ROC on the held-out target.
    EvalLink {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Node accuracy under evaluation-time perturbations.
    Robustness {
        #[command(flatten)]
        eval: EvalArgs,
        /// Perturbation kind: edge_drop or node_mask.
        #[arg(long)]
        kind: String,
        /// Comma-separated perturbation levels.
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        levels: String,
    },
    /// Numerical verification suites.
    Oracle {
        /// Which suite: noise, gog-error, or excess-risk.
        which: String,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Number of random configurations.
        #[arg(long)]
        configs: Option<usize>,
        /// Monte-Carlo samples per configuration (gog-error).
        #[arg(long, default_value_t = 100_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print one target center's GoG dump.
    InspectGog {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        center: usize,
    },
}

fn write_json<T: serde::Serialize>(path: &Option<PathBuf>, value: &T) -> Result<(), RgfmError> {
    if let Some(path) = path {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    }
    Ok(())
}

fn print_report(report: &RunReport) {
    print!("{}", report.text_table());
}

fn save_trace(path: &Option<PathBuf>, trace: &[RoutingEpoch]) -> Result<(), RgfmError> {
    if let Some(path) = path {
        std::fs::write(path, pipeline::routing_trace_csv(trace))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), RgfmError> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = config.load()?;
            let result = pipeline::run_pretrain(&cfg)?;
            result.checkpoint.save(&out)?;
            if let (Some(first), Some(last)) =
                (result.loss_trace.first(), result.loss_trace.last())
            {
                println!(
                    "stage1 done: {} epochs, loss {first:.4} -> {last:.4}",
                    result.loss_trace.len()
                );
            }
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Stage2 { config, ckpt, out, trace } => {
            let cfg = config.load()?;
            let stage1 = Checkpoint::load(&ckpt)?;
            let result = pipeline::run_stage2(&cfg, &stage1)?;
            result.checkpoint.save(&out)?;
            save_trace(&trace, &result.routing_trace)?;
            if let Some(last) = result.routing_trace.last() {
                println!(
                    "stage2 done: {} epochs, final conf {:.3}, m {}",
                    result.routing_trace.len(),
                    last.conf,
                    last.m_effective
                );
            }
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::EvalNode { eval } => {
            let (cfg, ckpt) = eval.load()?;
            let report = pipeline::eval_node(&cfg, &ckpt)?;
            print_report(&report);
            write_json(&eval.json, &report)
        }
        Command::EvalLink { eval } => {
            let (cfg, ckpt) = eval.load()?;
            let report = pipeline::eval_link(&cfg, &ckpt)?;
            print_report(&report);
            write_json(&eval.json, &report)
        }
        Command::Robustness { eval, kind, levels } => {
            let (cfg, ckpt) = eval.load()?;
            let kind: PerturbKind = kind.parse()?;
            let levels = parse_levels(&levels)?;
            let series = pipeline::robustness_sweep(&cfg, &ckpt, kind, &levels)?;
            println!("level   accuracy    std");
            for (level, report) in &series {
                println!("{level:<7} {:<11.4} {:.4}", report.mean, report.std);
            }
            write_json(&eval.json, &series)
        }
        Command::Oracle { which, json, configs, mc_samples, seed } => match which.as_str() {
            "noise" => {
                let r = oracle::noise_fusion_suite(configs.unwrap_or(200), seed)?;
                println!(
                    "noise-fusion: {} ({} configs, worst gap {:.3e})",
                    pass_str(r.pass),
                    r.configs,
                    r.worst_gap
                );
                write_json(&json, &r)
            }
            "gog-error" => {
                let r = oracle::gog_error_suite(configs.unwrap_or(50), mc_samples, seed)?;
                println!(
                    "gog-error: {} ({} configs, {} separated, worst MC dev {:.2} se, worst Abel gap {:.2e})",
                    pass_str(r.pass),
                    r.configs,
                    r.separated_configs,
                    r.worst_mc_sigma,
                    r.worst_abel_gap
                );
                write_json(&json, &r)
            }
            "excess-risk" => {
                let r = oracle::excess_risk_suite(configs.unwrap_or(100), seed)?;
                println!(
                    "excess-risk: {} (argmin {}, R = {:.5})",
                    pass_str(r.pass),
                    r.fixture.0,
                    r.fixture.1
                );
                write_json(&json, &r)
            }
            other => Err(RgfmError::Config(format!(
                "unknown oracle {other:?} (expected noise, gog-error, or excess-risk)"
            ))),
        },
        Command::InspectGog { config, ckpt, center } => {
            let cfg = config.load()?;
            let ckpt = Checkpoint::load(&ckpt)?;
            print!("{}", pipeline::inspect_gog(&cfg, &ckpt, center)?);
            Ok(())
        }
    }
}

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn parse_levels(text: &str) -> Result<Vec<f64>, RgfmError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| RgfmError::Config(format!("bad level {t:?}")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
