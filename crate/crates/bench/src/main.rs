use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vrsplit::solver::GammaPolicy;
use vrsplit::{AsyncConfig, CatalystConfig, DelayModel};
use vrsplit_bench::{
    protocol_config, run_experiment, BenchError, ExperimentConfig, Family, GeneratorSpec,
};

#[derive(Parser)]
#[command(
    name = "vrsplit",
    version,
    about = "Variance-reduced forward-backward experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Quadratic,
    BoyanSaddle,
    TwoPlayerGame,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Quadratic => Family::Quadratic,
            FamilyArg::BoyanSaddle => Family::BoyanSaddle,
            FamilyArg::TwoPlayerGame => Family::TwoPlayerGame,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance as JSON.
    Gen {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 10.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment config.
    Run {
        config: PathBuf,
        /// 3 replicates and a budget of 20n.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Step size for every entry ("auto" or a number).
        #[arg(long)]
        gamma: Option<String>,
        /// Wrap every entry in Catalyst.
        #[arg(long)]
        catalyst: bool,
        #[arg(long)]
        sigma: Option<String>,
        #[arg(long)]
        inner_stop: Option<String>,
        /// Run every entry in the delayed-read simulation.
        #[arg(long = "async")]
        asynchronous: bool,
        #[arg(long, default_value_t = 0)]
        tau: usize,
        #[arg(long, default_value = "uniform")]
        delay_model: String,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        sync_epochs: bool,
    },
    /// Run the standard scheme comparison on one problem family.
    Protocol {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_gamma(s: &str) -> Result<GammaPolicy, BenchError> {
    if s == "auto" {
        return Ok(GammaPolicy::Auto);
    }
    s.parse::<f64>()
        .ok()
        .filter(|g| g.is_finite() && *g > 0.0)
        .map(GammaPolicy::Value)
        .ok_or_else(|| BenchError::Config(format!("invalid step size {s:?}")))
}

fn read_config(path: &Path) -> Result<ExperimentConfig, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}

fn execute(
    config: ExperimentConfig,
    base: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<bool, BenchError> {
    let dir = out
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let report = run_experiment(&config, base)?;
    report.write(&dir, config.per_replicate)?;
    for e in &report.entries {
        match (&e.error, e.final_mean()) {
            (Some(msg), _) => println!("{:<16} FAILED: {msg}", e.label),
            (None, Some(m)) => println!("{:<16} final mean log10 dist_sq = {m:.4}", e.label),
            (None, None) => {}
        }
    }
    println!("results written to {}", dir.display());
    Ok(report.all_ran())
}

fn dispatch(cli: Cli) -> Result<bool, BenchError> {
    match cli.command {
        Command::Gen {
            family,
            n,
            d,
            kappa,
            lambda,
            seed,
            out,
        } => {
            let spec = GeneratorSpec {
                family: family.into(),
                n,
                d,
                kappa_target: kappa,
                lambda_reg: lambda,
                seed,
            };
            let json = spec.generate()?.to_json()?;
            match out {
                Some(path) => {
                    fs::write(&path, json).map_err(|source| BenchError::Io { path, source })?
                }
                None => println!("{json}"),
            }
            Ok(true)
        }
        Command::Run {
            config,
            quick,
            seed,
            out,
            gamma,
            catalyst,
            sigma,
            inner_stop,
            asynchronous,
            tau,
            delay_model,
            sync_epochs,
        } => {
            let mut cfg = read_config(&config)?;
            if quick {
                cfg = cfg.quick();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let gamma = gamma.as_deref().map(parse_gamma).transpose()?;
            let mut cat = CatalystConfig::default();
            if let Some(s) = &sigma {
                cat.sigma = s.parse()?;
            }
            if let Some(s) = &inner_stop {
                cat.inner_stop = s.parse()?;
            }
            let mut async_cfg = AsyncConfig::new(tau, delay_model.parse::<DelayModel>()?);
            async_cfg.sync_at_epoch = sync_epochs;
            for entry in &mut cfg.entries {
                if let Some(g) = gamma {
                    entry.run.gamma = g;
                }
                if catalyst {
                    entry.catalyst = Some(cat.clone());
                }
                if asynchronous {
                    entry.async_config = Some(async_cfg.clone());
                }
            }
            let base = config.parent().map(Path::to_path_buf);
            execute(cfg, base.as_deref(), out)
        }
        Command::Protocol { family, quick, out } => {
            let mut cfg = protocol_config(family.into());
            if quick {
                cfg = cfg.quick();
            }
            execute(cfg, None, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
