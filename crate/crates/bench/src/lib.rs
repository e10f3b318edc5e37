//! Configuration-driven experiments: multi-scheme, multi-seed runs resampled onto a
//! common grid of operator evaluations per `n`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vrsplit::catalyst::run_catalyst;
use vrsplit::problems::{exact_solution, gen_boyan_saddle, gen_quadratic, gen_two_player_game};
use vrsplit::{
    run_async, run_sarah, run_vr, AsyncConfig, CatalystConfig, EpochSchedule, FiniteSumProblem,
    ProbSchedule, RunConfig, Scheme, Trace,
};

pub mod stats;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Solver(#[from] vrsplit::Error),
    #[error("{0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Quadratic,
    BoyanSaddle,
    TwoPlayerGame,
}

fn default_kappa() -> f64 {
    10.0
}

fn default_lambda() -> f64 {
    0.1
}

/// Parameters of a generated problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_kappa")]
    pub kappa_target: f64,
    #[serde(default = "default_lambda")]
    pub lambda_reg: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<FiniteSumProblem> {
        Ok(match self.family {
            Family::Quadratic => gen_quadratic(self.n, self.d, self.kappa_target, self.seed)?,
            Family::BoyanSaddle => gen_boyan_saddle(self.n, self.d, self.lambda_reg, self.seed)?,
            Family::TwoPlayerGame => gen_two_player_game(self.n, self.d, self.seed)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSource {
    Generate(GeneratorSpec),
    Fixture { fixture: PathBuf },
}

impl ProblemSource {
    /// Builds the problem; fixture paths are taken relative to `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<FiniteSumProblem> {
        let problem = match self {
            ProblemSource::Generate(spec) => spec.generate()?,
            ProblemSource::Fixture { fixture } => {
                let path = match base {
                    Some(dir) if fixture.is_relative() => dir.join(fixture),
                    _ => fixture.clone(),
                };
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                FiniteSumProblem::from_json(&text)?
            }
        };
        if problem.known_solution().is_some() {
            return Ok(problem);
        }
        let x = exact_solution(&problem)?.x;
        Ok(problem.with_known_solution(x)?)
    }
}

/// One line of the experiment: a scheme with its run settings and optional wrappers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub scheme: Scheme,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalyst: Option<CatalystConfig>,
    #[serde(default, rename = "async", skip_serializing_if = "Option::is_none")]
    pub async_config: Option<AsyncConfig>,
}

impl ExperimentEntry {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            label: None,
            scheme,
            run: RunConfig::default(),
            catalyst: None,
            async_config: None,
        }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn name(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.scheme.name().to_string())
    }
}

fn default_replicates() -> usize {
    10
}

fn default_budget() -> f64 {
    50.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSource,
    pub entries: Vec<ExperimentEntry>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Evaluation budget in multiples of `n`.
    #[serde(default = "default_budget")]
    pub budget: f64,
    /// Base seed; replicate `r` runs with `seed + r·0x9E3779B97F4A7C15`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Also write every replicate's resampled column.
    #[serde(default)]
    pub per_replicate: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(BenchError::Config("replicates must be at least 1".into()));
        }
        if !(self.budget >= 1.0) || !self.budget.is_finite() {
            return Err(BenchError::Config(
                "budget must be at least 1 (multiples of n)".into(),
            ));
        }
        if self.entries.is_empty() {
            return Err(BenchError::Config("the experiment has no entries".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config documents always serialize")
    }

    /// Applies the `--quick` protocol: 3 replicates and a budget of 20n.
    pub fn quick(mut self) -> Self {
        self.replicates = 3;
        self.budget = 20.0;
        self
    }
}

pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    base.wrapping_add((replicate as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs one entry once, bounded by `budget · n` evaluations.
pub fn run_entry(
    problem: &FiniteSumProblem,
    entry: &ExperimentEntry,
    budget: f64,
    seed: u64,
) -> Result<Trace> {
    let mut run = entry.run.clone();
    run.seed = seed;
    run.op_eval_budget = Some(budget);
    run.max_iterations = usize::MAX;
    let n = problem.n();
    let x0 = run.start_point(problem)?;
    let trace = match (&entry.scheme, &entry.catalyst, &entry.async_config) {
        (Scheme::Sarah { m }, None, None) => {
            let gamma = run.resolve_gamma(&entry.scheme, problem)?;
            let per_epoch = n + 2 * m.saturating_sub(1);
            let epochs = ((budget * n as f64) / per_epoch as f64).floor().max(1.0) as usize;
            run_sarah(problem, *m, gamma, &x0, epochs, seed)?.1
        }
        (scheme, Some(cat), None) => {
            let mut cat = cat.clone();
            cat.outer_loops = usize::MAX - 1;
            run_catalyst(problem, scheme, &run, &cat)?.1
        }
        (scheme, None, Some(a)) => run_async(problem, scheme, &run, a)?.1,
        (scheme, None, None) => run_vr(problem, scheme, &run)?.1,
        (_, Some(_), Some(_)) => {
            return Err(BenchError::Config(
                "an entry cannot be both Catalyst-wrapped and asynchronous".into(),
            ))
        }
    };
    Ok(trace)
}

/// The grid `0, 1, …, ⌊budget⌋` (plus `budget` itself when fractional) in units of `n`.
pub fn grid(budget: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=budget.floor() as usize).map(|i| i as f64).collect();
    if budget.fract() > 0.0 {
        g.push(budget);
    }
    g
}

fn log_dist(d: f64) -> f64 {
    d.max(f64::MIN_POSITIVE).log10()
}

/// Step-resamples `log₁₀ dist_sq` onto `grid`. Each point takes the last row recorded at
/// or before it; the first and last points carry the first and last recorded values.
pub fn resample(trace: &Trace, n: usize, grid: &[f64]) -> Result<Vec<f64>> {
    let rows: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .map(|r| {
            r.dist_sq
                .map(|d| (r.op_evals as f64 / n as f64, log_dist(d)))
                .ok_or_else(|| BenchError::Config("trace has no distance column".into()))
        })
        .collect::<Result<_>>()?;
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f.1, l.1),
        _ => return Err(BenchError::Config("empty trace".into())),
    };
    let mut out = Vec::with_capacity(grid.len());
    let mut j = 0;
    for (idx, &g) in grid.iter().enumerate() {
        if idx == 0 {
            out.push(first);
            continue;
        }
        if idx + 1 == grid.len() {
            out.push(last);
            continue;
        }
        while j + 1 < rows.len() && rows[j + 1].0 <= g {
            j += 1;
        }
        out.push(if rows[j].0 <= g { rows[j].1 } else { first });
    }
    Ok(out)
}

/// Aggregated result of one entry across replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryResult {
    pub label: String,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub replicates: Vec<Vec<f64>>,
    pub error: Option<String>,
}

impl EntryResult {
    pub fn final_mean(&self) -> Option<f64> {
        self.mean.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub grid: Vec<f64>,
    pub replicates: usize,
    pub entries: Vec<EntryResult>,
}

impl ExperimentReport {
    pub fn all_ran(&self) -> bool {
        self.entries.iter().all(|e| e.error.is_none())
    }

    pub fn entry(&self, label: &str) -> Option<&EntryResult> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn entry_csv(&self, entry: &EntryResult, per_replicate: bool) -> String {
        let mut s = format!(
            "# mean of log10(dist_sq) over {} replicates; x = op_evals / n\n",
            self.replicates
        );
        s.push_str("op_evals_per_n,mean_log10_dist_sq,se");
        if per_replicate {
            for r in 0..entry.replicates.len() {
                let _ = write!(s, ",rep_{r}");
            }
        }
        s.push('\n');
        for (i, g) in self.grid.iter().enumerate() {
            let _ = write!(s, "{g:?},{:?},{:?}", entry.mean[i], entry.se[i]);
            if per_replicate {
                for rep in &entry.replicates {
                    let _ = write!(s, ",{:?}", rep[i]);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn combined_csv(&self) -> String {
        let ok: Vec<&EntryResult> = self.entries.iter().filter(|e| e.error.is_none()).collect();
        let mut s = format!(
            "# mean of log10(dist_sq) over {} replicates; x = op_evals / n\n",
            self.replicates
        );
        s.push_str("op_evals_per_n");
        for e in &ok {
            let _ = write!(s, ",{}", e.label);
        }
        s.push('\n');
        for (i, g) in self.grid.iter().enumerate() {
            let _ = write!(s, "{g:?}");
            for e in &ok {
                let _ = write!(s, ",{:?}", e.mean[i]);
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<label>.csv` per successful entry plus `combined.csv` into `dir`.
    pub fn write(&self, dir: &Path, per_replicate: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for e in self.entries.iter().filter(|e| e.error.is_none()) {
            let path = dir.join(format!("{}.csv", e.label));
            fs::write(&path, self.entry_csv(e, per_replicate)).map_err(io_err(&path))?;
        }
        let path = dir.join("combined.csv");
        fs::write(&path, self.combined_csv()).map_err(io_err(&path))
    }
}

fn unique_labels(entries: &[ExperimentEntry]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::with_capacity(entries.len());
    for e in entries {
        let base: String = e
            .name()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "-_+.".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let mut label = base.clone();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{base}-{k}");
            k += 1;
        }
        labels.push(label);
    }
    labels
}

/// Runs every entry × replicate in parallel; results are merged in entry order so the
/// output never depends on scheduling.
pub fn run_experiment(config: &ExperimentConfig, base: Option<&Path>) -> Result<ExperimentReport> {
    config.validate()?;
    let problem = config.problem.load(base)?;
    let n = problem.n();
    let grid = grid(config.budget);
    let labels = unique_labels(&config.entries);
    let jobs: Vec<(usize, usize)> = (0..config.entries.len())
        .flat_map(|e| (0..config.replicates).map(move |r| (e, r)))
        .collect();
    let outcomes: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(e, r)| {
            let seed = replicate_seed(config.seed, r);
            let trace = run_entry(&problem, &config.entries[e], config.budget, seed)?;
            resample(&trace, n, &grid)
        })
        .collect();
    let mut entries = Vec::with_capacity(config.entries.len());
    let mut outcomes = outcomes.into_iter();
    for label in labels {
        let mut reps = Vec::with_capacity(config.replicates);
        let mut error = None;
        for _ in 0..config.replicates {
            match outcomes.next().expect("one outcome per job") {
                Ok(v) => reps.push(v),
                Err(e) if error.is_none() => error = Some(e.to_string()),
                Err(_) => {}
            }
        }
        if let Some(msg) = &error {
            warn!("entry {label} failed: {msg}");
            entries.push(EntryResult {
                label,
                mean: vec![],
                se: vec![],
                replicates: vec![],
                error,
            });
            continue;
        }
        let (mean, se) = (0..grid.len())
            .map(|i| stats::mean_se(&reps.iter().map(|r| r[i]).collect::<Vec<_>>()))
            .unzip();
        info!("entry {label} done");
        entries.push(EntryResult {
            label,
            mean,
            se,
            replicates: reps,
            error: None,
        });
    }
    Ok(ExperimentReport {
        grid,
        replicates: config.replicates,
        entries,
    })
}

/// The experiment settings for one problem family: epoch `2n` for SVRG and SARAH, a
/// doubling SVRG++, halving SVRG-rand with the `8n` cap, SAGD with `q = 1/(2n)`, SAGA, and
/// the hybrid whose first `n/2` proxies follow SAGA. SARAH is included only when `A = 0`.
pub fn protocol_config(family: Family) -> ExperimentConfig {
    let (n, d) = match family {
        Family::Quadratic => (64, 8),
        Family::BoyanSaddle => (64, 4),
        Family::TwoPlayerGame => (64, 4),
    };
    let spec = GeneratorSpec {
        family,
        n,
        d,
        kappa_target: default_kappa(),
        lambda_reg: default_lambda(),
        seed: 0,
    };
    let mut entries = vec![
        ExperimentEntry::new(Scheme::svrg(2 * n)),
        ExperimentEntry::new(Scheme::Svrg {
            epochs: EpochSchedule::Doubling { initial: 2 * n },
        })
        .labeled("svrg++"),
        ExperimentEntry::new(Scheme::SvrgRand {
            p: ProbSchedule::halving_default(n),
        }),
        ExperimentEntry::new(Scheme::SagaSvrgRand {
            s1: (0..n / 2).collect(),
            p: ProbSchedule::halving_default(n),
        }),
        ExperimentEntry::new(Scheme::Sagd {
            q: 1.0 / (2 * n) as f64,
        }),
        ExperimentEntry::new(Scheme::Saga),
    ];
    if family != Family::TwoPlayerGame {
        entries.push(ExperimentEntry::new(Scheme::Sarah { m: 2 * n }));
    }
    ExperimentConfig {
        problem: ProblemSource::Generate(spec),
        entries,
        replicates: 10,
        budget: default_budget(),
        seed: 0,
        output: None,
        per_replicate: false,
    }
}
