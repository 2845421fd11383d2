use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use alps::harness::{
    execute, prepare_output_dir, preset, scaling_experiment, write_scaling_csv, RunConfig, Sampler,
    ScalingExperimentConfig,
};
use alps::targets::{zellner_iterate, Convergence};
use alps::{Error, Result};

#[derive(Parser)]
#[command(name = "alps", version, about = "Annealed leap-point sampler with PT and LAIS baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (benchmark20, sur_coarse, sur_fine, gaussian1d)
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run ALPS
    Run(Common),
    /// Run the parallel-tempering baseline
    Pt(Common),
    /// Run the single-level Laplace independence sampler
    Lais(Common),
    /// Leap acceptance against dimension on an iid product target
    Scaling {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iterated Zellner estimation on a SUR data set
    SurFit {
        /// Config whose target is sur_grunfeld or sur_csv; Grunfeld 1935-1949 by default
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, value_enum, default_value = "max-abs")]
        rule: Rule,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Rule {
    MaxAbs,
    RelativeL2,
}

fn load(config: &Option<PathBuf>, name: &Option<String>) -> Result<RunConfig> {
    match (config, name) {
        (Some(_), Some(_)) => Err(Error::Config("give either --config or --preset, not both".into())),
        (Some(p), None) => RunConfig::from_path(p),
        (None, Some(n)) => preset(n),
        (None, None) => Err(Error::Config("one of --config or --preset is required".into())),
    }
}

fn run_sampler(c: Common, sampler: Sampler) -> Result<()> {
    let mut cfg = load(&c.config, &c.preset)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = c.out {
        cfg.output_dir = Some(o);
    }
    let out = execute(&cfg, sampler)?;
    let st = &out.diagnostics.stats;
    println!(
        "{} sweeps in {:.2}s; leap rate {:.4}; modes registered {}",
        out.first_coordinate.len(),
        out.diagnostics.total_seconds,
        st.leap.rate(),
        out.registry.as_ref().map_or(0, |r| r.len())
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => run_sampler(c, Sampler::Alps),
        Command::Pt(c) => run_sampler(c, Sampler::Pt),
        Command::Lais(c) => run_sampler(c, Sampler::Lais),
        Command::Scaling { config, seed, out } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<ScalingExperimentConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => ScalingExperimentConfig::new(seed.unwrap_or(1)),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = &out {
                prepare_output_dir(dir)?;
            }
            let rows = scaling_experiment(&cfg)?;
            write_scaling_csv(&rows, std::io::stdout())?;
            if let Some(dir) = &out {
                write_scaling_csv(&rows, fs::File::create(dir.join("scaling.csv"))?)?;
            }
            Ok(())
        }
        Command::SurFit {
            config,
            preset: name,
            tol,
            rule,
            max_iter,
            out,
        } => {
            let cfg = if config.is_none() && name.is_none() {
                preset("sur_fine")?
            } else {
                load(&config, &name)?
            };
            if let Some(dir) = &out {
                prepare_output_dir(dir)?;
            }
            let data = match &cfg.target {
                alps::harness::TargetSpec::SurGrunfeld { years } => alps::targets::grunfeld(*years)?,
                alps::harness::TargetSpec::SurCsv { path, years, sha256 } => {
                    alps::targets::load_sur_csv(path, *years, sha256.as_deref())?
                }
                _ => return Err(Error::Config("sur-fit needs a sur_grunfeld or sur_csv target".into())),
            };
            let rule = match rule {
                Rule::MaxAbs => Convergence::MaxAbs,
                Rule::RelativeL2 => Convergence::RelativeL2,
            };
            let fit = zellner_iterate(&data, tol, max_iter, rule)?;
            let ssr: f64 = data.residuals(fit.theta.as_slice()).iter().map(|r| r.norm_squared()).sum();
            let v = json!({
                "converged": fit.converged,
                "iterations": fit.iterations,
                "profile_loglik": fit.trajectory.last(),
                "ssr": ssr,
                "theta": fit.theta.as_slice(),
                "trajectory": fit.trajectory,
            });
            let text = serde_json::to_string_pretty(&v)?;
            println!("{text}");
            if let Some(dir) = &out {
                fs::write(dir.join("sur_fit.json"), text + "\n")?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) | Error::Data(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
