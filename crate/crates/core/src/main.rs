use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use molf::check::run_all;
use molf::fusion::{fuse_network, verify_fusion};
use molf::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use molf::harness::config::{resolve_seed, RunConfig, SEED_ENV};
use molf::harness::trace::export_traces;
use molf::harness::train::train_run;
use molf::numerics::Rng;
use molf::Result;

const FUSION_TOLERANCE: f64 = 1e-9;
const FUSION_PROBES: usize = 100;

#[derive(Parser)]
#[command(name = "molf", version, about = "Routed FFT/LoRA fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a flat key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides MOLF_SEED and the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold every adapter of a checkpoint into its base weight.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the winner grid and summary of a run directory.
    Trace {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the built-in oracle suite.
    Check,
}

fn train(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<bool> {
    let mut cfg = RunConfig::load(&config)?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.seed = resolve_seed(seed, env.as_deref(), cfg.seed)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let summary = train_run(&cfg)?;
    println!("run directory: {}", summary.run_dir.display());
    println!("final train loss: {:.6e}", summary.final_train_loss);
    if let Some(p) = summary.final_population_loss {
        println!("final population loss: {p:.6e}");
    }
    for (class, frac) in &summary.class_fractions {
        println!("{class} selection fraction: {frac:.4}");
    }
    println!("checkpoint: {}", summary.final_checkpoint.display());
    Ok(true)
}

fn fuse(ckpt: PathBuf, out: PathBuf) -> Result<bool> {
    let loaded = load_checkpoint(&ckpt)?;
    let mut rng = Rng::new(0);
    let mut ok = true;
    for m in &loaded.network.modules {
        let report = verify_fusion(m, FUSION_PROBES, &mut rng, FUSION_TOLERANCE, false)?;
        println!(
            "{}: max relative deviation {:.3e} ({})",
            report.module,
            report.max_relative_deviation,
            if report.passed { "ok" } else { "FAILED" }
        );
        ok &= report.passed;
    }
    if !ok {
        eprintln!("fusion verification failed; nothing written");
        return Ok(false);
    }
    let fused = Checkpoint {
        step: loaded.step,
        network: fuse_network(&loaded.network)?,
        optimizer: None,
    };
    save_checkpoint(&fused, &out)?;
    println!("fused checkpoint: {}", out.display());
    Ok(true)
}

fn trace(run: PathBuf) -> Result<bool> {
    let export = export_traces(&run)?;
    println!(
        "{} records, {} modules, {} traced steps",
        export.records,
        export.modules.len(),
        export.steps.len()
    );
    for sel in &export.selection {
        let fr: Vec<String> = sel.fractions.iter().map(|f| format!("{f:.3}")).collect();
        println!(
            "{}: fractions [{}] commitment {:.3}",
            sel.module,
            fr.join(", "),
            sel.commitment
        );
    }
    Ok(true)
}

fn check() -> Result<bool> {
    let mut ok = true;
    for c in run_all() {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, seed, out } => train(config, seed, out),
        Command::Fuse { ckpt, out } => fuse(ckpt, out),
        Command::Trace { run } => trace(run),
        Command::Check => check(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
