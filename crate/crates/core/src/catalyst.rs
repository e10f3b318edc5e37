//! Catalyst outer loop: repeatedly solve the shifted problem `0 ∈ A(x) + B(x) + σ(x − x̄)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{usage, Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::operators::{Component, FiniteSumProblem};
use crate::problems::exact_solution;
use crate::proxy::Scheme;
use crate::solver::{svrg_epoch_length, RunConfig, Trace, TraceRow, VrRun};

/// `σ`: a fixed value or [`optimal_sigma`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SigmaPolicy {
    #[default]
    Auto,
    Value(f64),
}

/// How each inner run decides it is done.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerStop {
    /// Stop on the squared-distance criterion against the exact auxiliary solution.
    Oracle,
    /// A fixed number of inner iterations.
    Budget(usize),
    /// A fixed number derived from the inner scheme's linear rate.
    BudgetAuto,
}

impl fmt::Display for InnerStop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InnerStop::Oracle => write!(f, "oracle"),
            InnerStop::Budget(k) => write!(f, "budget:{k}"),
            InnerStop::BudgetAuto => write!(f, "budget:auto"),
        }
    }
}

impl FromStr for InnerStop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(InnerStop::Oracle),
            "budget:auto" => Ok(InnerStop::BudgetAuto),
            _ => match s.strip_prefix("budget:").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(InnerStop::Budget(k)),
                _ => usage(format!(
                    "inner stop must be oracle, budget:auto or budget:<k>, got {s:?}"
                )),
            },
        }
    }
}

impl FromStr for SigmaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(SigmaPolicy::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(SigmaPolicy::Value(v)),
            _ => usage(format!(
                "sigma must be auto or a nonnegative number, got {s:?}"
            )),
        }
    }
}

impl Serialize for InnerStop {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InnerStop {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

impl Serialize for SigmaPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SigmaPolicy::Auto => s.serialize_str("auto"),
            SigmaPolicy::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for SigmaPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v >= 0.0 => Ok(SigmaPolicy::Value(v)),
            Repr::Num(v) => Err(serde::de::Error::custom(format!(
                "sigma must be >= 0, got {v}"
            ))),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_outer_loops() -> usize {
    50
}

fn default_inner_stop() -> InnerStop {
    InnerStop::BudgetAuto
}

fn default_oracle_cap() -> usize {
    10_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalystConfig {
    #[serde(default)]
    pub sigma: SigmaPolicy,
    #[serde(default = "default_outer_loops")]
    pub outer_loops: usize,
    #[serde(default = "default_inner_stop")]
    pub inner_stop: InnerStop,
    /// Safety cap on inner iterations in oracle mode.
    #[serde(default = "default_oracle_cap")]
    pub max_inner_iterations: usize,
}

impl Default for CatalystConfig {
    fn default() -> Self {
        Self {
            sigma: SigmaPolicy::Auto,
            outer_loops: default_outer_loops(),
            inner_stop: default_inner_stop(),
            max_inner_iterations: default_oracle_cap(),
        }
    }
}

/// Folds `σ(x − x̄)` into every component; `μ' = μ + σ`, `L' = L + σ`.
pub fn shifted_problem(
    problem: &FiniteSumProblem,
    sigma: f64,
    x_bar: &Vector,
) -> Result<FiniteSumProblem> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return usage(format!("sigma must be nonnegative, got {sigma}"));
    }
    if x_bar.len() != problem.dim() {
        return usage("x_bar has the wrong dimension");
    }
    if sigma == 0.0 {
        return Ok(problem.with_parts(problem.components().to_vec(), problem.mu(), problem.lip()));
    }
    let d = problem.dim();
    let components = problem
        .components()
        .iter()
        .map(|c| match c {
            Component::Affine { m, b } => Component::Affine {
                m: m + Matrix::identity(d, d) * sigma,
                b: b - x_bar * sigma,
            },
            Component::Callback(f) => {
                let f = Arc::clone(f);
                let x_bar = x_bar.clone();
                Component::Callback(Arc::new(move |x: &Vector| f(x) + (x - &x_bar) * sigma))
            }
        })
        .collect();
    Ok(problem.with_parts(components, problem.mu() + sigma, problem.lip() + sigma))
}

/// The regularization that minimizes the Catalyst complexity bound.
pub fn optimal_sigma(scheme: &Scheme, problem: &FiniteSumProblem) -> f64 {
    let kappa = problem.kappa();
    let mu = problem.mu();
    match scheme {
        Scheme::Gd => (kappa - 1.0) * mu,
        _ => {
            let n = problem.n() as f64;
            if kappa * kappa < n {
                warn!(
                    "kappa^2 = {} < n = {n}; Catalyst is not expected to help",
                    kappa * kappa
                );
            }
            mu * (((kappa - 1.0).powi(2) - 2.0).max(0.0) / (n + 1.0)).sqrt()
        }
    }
}

/// Per-iteration linear-rate estimate used to size inner budgets.
pub fn linear_rate_estimate(scheme: &Scheme, problem: &FiniteSumProblem) -> f64 {
    rate_for(scheme, problem.kappa(), problem.n())
}

fn rate_for(scheme: &Scheme, kappa: f64, n: usize) -> f64 {
    let k2 = kappa * kappa;
    match scheme {
        Scheme::Gd => 1.0 - 1.0 / k2,
        Scheme::Svrg { .. } => 0.75f64.powf(1.0 / svrg_epoch_length(kappa) as f64),
        Scheme::Sarah { m } => 0.75f64.powf(1.0 / *m as f64),
        _ => (1.0 - 1.0 / (7.0 * k2)).max(1.0 - 1.0 / (2.0 * n as f64)),
    }
}

/// Inner iterations `⌈log(4(1+σ/μ)²) / −log(rate)⌉`, with the rate taken at the
/// auxiliary condition number `(L+σ)/(μ+σ)`.
pub fn inner_budget(scheme: &Scheme, problem: &FiniteSumProblem, sigma: f64) -> usize {
    let kappa = (problem.lip() + sigma) / (problem.mu() + sigma);
    let rate = rate_for(scheme, kappa, problem.n());
    let target = (4.0 * (1.0 + sigma / problem.mu()).powi(2)).ln();
    (target / -rate.ln()).ceil().max(1.0) as usize
}

fn outer_seed(seed: u64, outer: usize) -> u64 {
    seed.wrapping_add((outer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs Catalyst around `scheme`. Rows are recorded at every outer-loop boundary against
/// cumulative evaluations, inner runs included. The inner step follows `config.gamma`
/// evaluated on each auxiliary problem.
pub fn run_catalyst(
    problem: &FiniteSumProblem,
    scheme: &Scheme,
    config: &RunConfig,
    catalyst: &CatalystConfig,
) -> Result<(Vector, Trace)> {
    if matches!(scheme, Scheme::Sarah { .. }) {
        return usage("Catalyst inner loops use the proxy framework; SARAH is not supported");
    }
    if catalyst.inner_stop == InnerStop::Oracle
        && !(problem.is_affine() && problem.resolvent().is_linear())
    {
        return usage("oracle inner stopping needs affine components and a linear A");
    }
    let sigma = match catalyst.sigma {
        SigmaPolicy::Auto => optimal_sigma(scheme, problem),
        SigmaPolicy::Value(s) if s >= 0.0 => s,
        SigmaPolicy::Value(s) => return usage(format!("sigma must be nonnegative, got {s}")),
    };
    let mu = problem.mu();
    let n = problem.n();
    let x_star = problem.known_solution();
    let report_gamma = mu / (problem.lip() * problem.lip());
    let budget = config
        .op_eval_budget
        .map(|b| (b * n as f64).floor() as usize);
    let fixed_budget = match catalyst.inner_stop {
        InnerStop::Budget(k) => Some(k),
        InnerStop::BudgetAuto => Some(inner_budget(scheme, problem, sigma)),
        InnerStop::Oracle => None,
    };
    let shrink = 4.0 * (1.0 + sigma / mu).powi(2);

    let mut x_check = config.start_point(problem)?;
    let d0 = x_star.map(|s| linalg::dist_sq(&x_check, s));
    let mut op_evals = 0usize;
    let mut trace = Trace::default();
    let row = |outer: usize, evals: usize, x: &Vector| -> Result<TraceRow> {
        let d = x_star.map(|s| linalg::dist_sq(x, s));
        Ok(TraceRow {
            k: outer,
            op_evals: evals,
            dist_sq: d,
            residual: Some(problem.fixed_point_residual(report_gamma, x)?),
            lyapunov: d,
            epoch_boundary: true,
            op_norm_sq: None,
        })
    };
    for outer in 0..=catalyst.outer_loops {
        trace.rows.push(row(outer, op_evals, &x_check)?);
        let reached = match (
            config.stop_ratio,
            d0,
            trace.rows.last().and_then(|r| r.dist_sq),
        ) {
            (Some(r), Some(d0), Some(d)) => outer > 0 && d <= r * d0,
            _ => false,
        };
        let exhausted = budget.is_some_and(|b| op_evals + n + 2 > b);
        if outer == catalyst.outer_loops || reached || exhausted {
            break;
        }
        let aux = shifted_problem(problem, sigma, &x_check)?;
        let gamma = config.resolve_gamma(scheme, &aux)?;
        let mut run = VrRun::new(
            &aux,
            scheme,
            gamma,
            x_check.clone(),
            outer_seed(config.seed, outer),
        )?;
        let remaining = budget.map(|b| b - op_evals);
        let affordable = |run: &VrRun<'_>| remaining.is_none_or(|r| run.op_evals() + 2 <= r);
        match fixed_budget {
            Some(iters) => {
                for _ in 0..iters {
                    if !affordable(&run) {
                        break;
                    }
                    run.step()?;
                }
            }
            None => {
                let aux_star = exact_solution(&aux)?.x;
                let floor = (f64::EPSILON * (1.0 + aux_star.norm())).powi(2);
                let target = (linalg::dist_sq(&x_check, &aux_star) / shrink).max(floor);
                let mut iters = 0usize;
                while linalg::dist_sq(run.x(), &aux_star) > target && affordable(&run) {
                    if iters >= catalyst.max_inner_iterations {
                        warn!("oracle inner loop hit its cap of {iters} iterations");
                        break;
                    }
                    run.step()?;
                    iters += 1;
                }
            }
        }
        op_evals += run.op_evals();
        x_check = run.x().clone();
    }
    Ok((x_check, trace))
}
