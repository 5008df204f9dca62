use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spatial_causal::catalog::run_catalog;
use spatial_causal::experiment::{ExperimentConfig, Pipeline};
use spatial_causal::par::Exec;
use spatial_causal::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "spatial-causal", version, about = "Seeded spatial causal-effect experiments")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single seed; overrides `run.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic grids, manifest and ground truth.
    Gen,
    /// Train a model and write its checkpoint and loss trace.
    Train,
    /// Estimate effects, plus error tables when ground truth exists.
    Effects,
    /// Write R² and MAE metrics on the evaluation units.
    Eval,
    /// Check tape gradients against finite differences.
    Gradcheck,
    /// Run every stage for every seed and write report.json.
    Report,
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.run.seeds = vec![seed];
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    Ok(Pipeline::new(cfg, exec))
}

fn run(cli: &Cli) -> Result<bool> {
    if let Command::Gradcheck = cli.command {
        let entries = run_catalog(cli.seed.unwrap_or(0))?;
        let mut ok = true;
        for e in &entries {
            let verdict = if e.report.passed { "pass" } else { "FAIL" };
            println!("{}\t{:.3e}\t{verdict}", e.name, e.report.max_rel_error);
            ok &= e.report.passed;
        }
        println!("{} op kinds checked", entries.len());
        return Ok(ok);
    }
    let p = pipeline(cli)?;
    match cli.command {
        Command::Gen => {
            for &s in p.seeds() {
                p.gen(s)?;
                println!("seed {s}: {}", p.layout.data_dir(s).display());
            }
        }
        Command::Train => {
            for &s in p.seeds() {
                let t = p.train(s)?;
                let last = t.epochs.last().map_or(f64::NAN, |e| e.train_mse);
                println!("seed {s}: {} epochs, best {}, train mse {last:.6}", t.epochs.len(), t.best_epoch);
            }
        }
        Command::Effects => {
            let mut all = Vec::new();
            for &s in p.seeds() {
                let v = p.effects(s)?;
                for variant in &v {
                    println!("{}", p.layout.effects_csv(s, variant.weighted).display());
                }
                all.push((s, v));
            }
            p.write_errors(&all)?;
        }
        Command::Eval => {
            for &s in p.seeds() {
                let m = p.eval(s)?;
                let show = |k: &str| m.get(k).map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("seed {s}: r2_all {} mae_all {}", show("r2_all"), show("mae_all"));
            }
        }
        Command::Report => {
            let r = p.run_all()?;
            println!("config {}", r.config_hash);
            for (name, s) in &r.summary {
                println!(
                    "{name}: de {:.4}±{:.4} ie {:.4}±{:.4} te {:.4}±{:.4}",
                    s.mean.de, s.std.de, s.mean.ie, s.std.ie, s.mean.te, s.std.te
                );
            }
            println!("{:.1} s", r.wall_clock_secs);
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}\t{e}", e.code());
            ExitCode::from(1)
        }
    }
}
