use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lensmimo_harness::experiments::{run_fairness, run_robustness, run_sweep, run_timing};
use lensmimo_harness::output::{read_manifest, Artifacts};
use lensmimo_harness::train::{gen_channels, train_drl, train_joint, train_unfold};
use lensmimo_harness::{HarnessError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "lensmimo", version, about = "Beam selection and precoding experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// Run config (TOML), or a run manifest (JSON) whose embedded config is replayed.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set system.n_rf=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the train and test channel datasets.
    GenChannels(Common),
    /// Alternating agent + unfolding training.
    TrainJoint(Common),
    /// Unfolding network alone on selector-induced channels.
    TrainUnfold(Common),
    /// Agent alone with a WMMSE terminal reward.
    TrainDrl(Common),
    EvalSweep(Common),
    EvalFairness(Common),
    EvalRobustness(Common),
    EvalTiming(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    if c.config.extension().is_some_and(|e| e == "json") {
        let m = read_manifest(&c.config)?;
        return RunConfig::from_toml_str(&m.config_toml, &c.overrides);
    }
    RunConfig::load(&c.config, &c.overrides)
}

fn report(a: &Artifacts) {
    println!("wrote {}", a.csv.display());
    println!("wrote {}", a.manifest.display());
}

fn show(p: &Path) {
    println!("wrote {}", p.display());
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::GenChannels(c) => gen_channels(&load(&c)?)?.iter().for_each(|p| show(p)),
        Verb::TrainJoint(c) => {
            let r = train_joint(&load(&c)?)?;
            if let Some(m) = r.outcome.metrics.last() {
                println!("episode {} pipeline rate {:.3} bit/s/Hz, {} invalid", m.episode, m.pipeline_rate / std::f64::consts::LN_2, m.test_invalid);
            }
            report(&r.artifacts);
        }
        Verb::TrainUnfold(c) => {
            let r = train_unfold(&load(&c)?)?;
            println!("unfolding {:.3} bit/s/Hz vs WMMSE {:.3}", r.test_rate_bits, r.wmmse_rate_bits);
            report(&r.artifacts);
        }
        Verb::TrainDrl(c) => report(&train_drl(&load(&c)?)?.artifacts),
        Verb::EvalSweep(c) => {
            let (records, a) = run_sweep(&load(&c)?)?;
            for r in &records {
                println!("{:<18} {:>8} {:>10.3} ± {:.3}", r.scheme.id(), r.point, r.mean_rate_bits, r.std_rate_bits);
            }
            report(&a);
        }
        Verb::EvalFairness(c) => {
            let (records, a) = run_fairness(&load(&c)?)?;
            for r in &records {
                println!("{:<18} fairness {:.3}", r.scheme.id(), r.fairness_index());
            }
            report(&a);
        }
        Verb::EvalRobustness(c) => {
            let (records, a) = run_robustness(&load(&c)?)?;
            for r in &records {
                println!("{:<18} err {:<5} {:>8.3} (degradation {:.4})", r.scheme.id(), r.error, r.mean_rate_bits, r.degradation);
            }
            report(&a);
        }
        Verb::EvalTiming(c) => {
            let (records, a) = run_timing(&load(&c)?)?;
            for r in &records {
                println!("{:<18} {:>8} {:.3e} s  {}", r.scheme.id(), r.point, r.mean_seconds, r.complexity);
            }
            report(&a);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: i32 = HarnessError::exit_code(&e);
            ExitCode::from(code as u8)
        }
    }
}
