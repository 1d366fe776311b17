use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use shield_cli::{
    cmd_diagnose, cmd_evaluate, cmd_gen_dataset, cmd_judge, cmd_precompute_bias, cmd_sweep,
    default_grid, Mode, RunConfig,
};
use shield_core::evalkit::JudgeClient;

#[derive(Parser)]
#[command(name = "shield", version, about = "Hallucination mitigation on a toy vision-language model")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// vanilla, shield, vcd_noise or ablation.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Any config key, as `key=value`. May be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write scenes and per-split existence questions.
    GenDataset,
    /// Estimate the inherent bias and cache it.
    PrecomputeBias,
    /// Run a mode over the dataset and write the report.
    Evaluate,
    /// Token-norm ratios, noise probe and attack curve.
    Diagnose,
    /// Evaluate once per parameter value.
    Sweep {
        /// alpha, beta, K or lr.
        #[arg(long)]
        param: String,
        /// Comma-separated values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Score four systems' descriptions with the external judge.
    Judge,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenDataset => {
            for p in cmd_gen_dataset(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::PrecomputeBias => {
            println!("wrote {}", cmd_precompute_bias(&cfg)?.display());
        }
        Command::Evaluate => {
            print!("{}", cmd_evaluate(&cfg)?.table);
        }
        Command::Diagnose => {
            let r = cmd_diagnose(&cfg)?;
            println!("ratio bins (width {}):", r.bin_width);
            for b in &r.ratio_bins {
                println!("  [{:.1}, {:.1})  {:>4} images  {:>6.2}% hallucinated", b.lo, b.hi, b.count, 100.0 * b.rate);
            }
            println!("noise probe ({} images):", r.noise_trials);
            for (o, n) in &r.noise_probe {
                println!("  {o:<10} {n}");
            }
            println!("attack curve:");
            for p in &r.attack_curve {
                println!("  step {:>3}  F1 {:.4}", p.step, p.f1);
            }
        }
        Command::Sweep { param, values } => {
            let values = if values.is_empty() { default_grid(param)? } else { values.clone() };
            print!("{}", cmd_sweep(&cfg, param, &values)?.1);
        }
        Command::Judge => {
            let s = cmd_judge(&cfg, &JudgeClient::from_env()?)?;
            println!("{:<20} {:>12} {:>12}", "system", "correctness", "detailedness");
            for (k, name) in s.systems.iter().enumerate() {
                println!("{name:<20} {:>12.2} {:>12.2}", s.correctness[k], s.detailedness[k]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
