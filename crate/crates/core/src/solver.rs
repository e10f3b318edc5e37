//! Synchronous drivers: deterministic forward-backward splitting, the variance-reduced
//! loop, SARAH, and the step-size and rate formulas.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{usage, Error, Result};
use crate::linalg::{self, Vector};
use crate::operators::FiniteSumProblem;
use crate::proxy::{
    estimate, estimator, ProxyEffect, ProxyEngine, ProxyTable, Scheme, SchemeConstants,
    SolutionCache,
};

/// Step size: a fixed value or the per-scheme recommendation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum GammaPolicy {
    #[default]
    Auto,
    Value(f64),
}

/// Lyapunov weight: a fixed value or `γ^1.5`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum RhoPolicy {
    #[default]
    GammaPow15,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NumOrWord {
    Num(f64),
    Word(String),
}

impl Serialize for GammaPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GammaPolicy::Auto => NumOrWord::Word("auto".into()).serialize(s),
            GammaPolicy::Value(v) => NumOrWord::Num(*v).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for GammaPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrWord::deserialize(d)? {
            NumOrWord::Num(v) => Ok(GammaPolicy::Value(v)),
            NumOrWord::Word(w) if w == "auto" => Ok(GammaPolicy::Auto),
            NumOrWord::Word(w) => Err(serde::de::Error::custom(format!(
                "gamma must be a number or \"auto\", got {w:?}"
            ))),
        }
    }
}

impl Serialize for RhoPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RhoPolicy::GammaPow15 => NumOrWord::Word("gamma^1.5".into()).serialize(s),
            RhoPolicy::Value(v) => NumOrWord::Num(*v).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for RhoPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrWord::deserialize(d)? {
            NumOrWord::Num(v) => Ok(RhoPolicy::Value(v)),
            NumOrWord::Word(w) if w == "gamma^1.5" => Ok(RhoPolicy::GammaPow15),
            NumOrWord::Word(w) => Err(serde::de::Error::custom(format!(
                "rho must be a number or \"gamma^1.5\", got {w:?}"
            ))),
        }
    }
}

impl RhoPolicy {
    pub fn value(&self, gamma: f64) -> f64 {
        match self {
            RhoPolicy::GammaPow15 => gamma.powf(1.5),
            RhoPolicy::Value(v) => *v,
        }
    }
}

fn default_record_every() -> usize {
    1
}

fn default_max_iterations() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub gamma: GammaPolicy,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub rho: RhoPolicy,
    /// Starting point; the origin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Stop once this many multiples of `n` evaluations are spent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_eval_budget: Option<f64>,
    /// Stop once `‖x_k − x*‖² ≤ stop_ratio · ‖x₀ − x*‖²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_ratio: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: GammaPolicy::Auto,
            max_iterations: default_max_iterations(),
            seed: 0,
            record_every: 1,
            rho: RhoPolicy::GammaPow15,
            x0: None,
            op_eval_budget: None,
            stop_ratio: None,
        }
    }
}

impl RunConfig {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = GammaPolicy::Value(gamma);
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.max_iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = RhoPolicy::Value(rho);
        self
    }

    pub fn with_x0(mut self, x0: &Vector) -> Self {
        self.x0 = Some(x0.iter().copied().collect());
        self
    }

    pub fn with_budget(mut self, multiples_of_n: f64) -> Self {
        self.op_eval_budget = Some(multiples_of_n);
        self
    }

    pub fn with_stop_ratio(mut self, ratio: f64) -> Self {
        self.stop_ratio = Some(ratio);
        self
    }

    pub fn start_point(&self, problem: &FiniteSumProblem) -> Result<Vector> {
        match &self.x0 {
            None => Ok(Vector::zeros(problem.dim())),
            Some(v) if v.len() == problem.dim() && v.iter().all(|x| x.is_finite()) => {
                Ok(Vector::from_column_slice(v))
            }
            Some(_) => usage("x0 must be finite with the problem's dimension"),
        }
    }

    pub fn resolve_gamma(&self, scheme: &Scheme, problem: &FiniteSumProblem) -> Result<f64> {
        let g = match self.gamma {
            GammaPolicy::Auto => recommended_gamma(scheme, problem).gamma,
            GammaPolicy::Value(g) => g,
        };
        if !(g > 0.0) || !g.is_finite() {
            return usage(format!("step size must be positive and finite, got {g}"));
        }
        Ok(g)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.record_every == 0 {
            return usage("record_every must be at least 1");
        }
        if let Some(b) = self.op_eval_budget {
            if !(b > 0.0) {
                return usage("op_eval_budget must be positive");
            }
        }
        Ok(())
    }
}

/// One recorded state `(x_k, φ^k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub op_evals: usize,
    pub dist_sq: Option<f64>,
    pub residual: Option<f64>,
    pub lyapunov: Option<f64>,
    pub epoch_boundary: bool,
    /// `‖B(x_k)‖²`, recorded by SARAH at epoch starts.
    pub op_norm_sq: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "k,op_evals,dist_sq,residual,lyapunov,epoch_boundary";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl Trace {
    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn boundary_rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(|r| r.epoch_boundary)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.k,
                r.op_evals,
                opt_field(r.dist_sq),
                opt_field(r.residual),
                opt_field(r.lyapunov),
                u8::from(r.epoch_boundary)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Contraction constants `θ`, `λ` and the largest step the rule admits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub theta: f64,
    pub lambda: f64,
    pub gamma_bound: f64,
}

/// The step-size rule: `γ` must stay below this value.
pub fn gamma_bound(c: &SchemeConstants, mu: f64, lip: f64) -> f64 {
    let l2 = lip * lip;
    let m_bar = c.m_bar as f64;
    let a = 1.0 - c.c1;
    let first = (2.0 * mu / (1.5 * a * l2 + a * c.c3 * m_bar + c.c2)).powi(2);
    let second = (a / (2.0 + 2.0 * m_bar * (a / 2.0).powi(3) * c.c3)).powi(2);
    first.min(second)
}

/// `θ` and `λ` of the synchronous analysis at `(γ, ρ)`.
pub fn rate_constants(c: &SchemeConstants, mu: f64, lip: f64, gamma: f64, rho: f64) -> (f64, f64) {
    let l2 = lip * lip;
    let theta = (1.0 - 2.0 * gamma * mu + 3.0 * gamma * gamma * l2 + c.c2 * rho)
        .max(2.0 * gamma * gamma / rho + c.c1);
    let lambda = theta + 2.0 * gamma * gamma * c.m_bar as f64 * c.c3;
    (theta, lambda)
}

/// `1 − λ` computed without forming `λ`, so tiny step sizes keep a meaningful sign.
pub fn contraction_margin(c: &SchemeConstants, mu: f64, lip: f64, gamma: f64, rho: f64) -> f64 {
    let g2 = gamma * gamma;
    let first = 2.0 * gamma * mu - 3.0 * g2 * lip * lip - c.c2 * rho;
    let second = (1.0 - c.c1) - 2.0 * g2 / rho;
    first.min(second) - 2.0 * g2 * c.m_bar as f64 * c.c3
}

/// Evaluates the rate constants at `γ` with `ρ = γ^1.5`.
pub fn step_size_bound(c: &SchemeConstants, problem: &FiniteSumProblem, gamma: f64) -> RateReport {
    step_size_bound_raw(c, problem.mu(), problem.lip(), gamma)
}

pub fn step_size_bound_raw(c: &SchemeConstants, mu: f64, lip: f64, gamma: f64) -> RateReport {
    let bound = gamma_bound(c, mu, lip);
    let (theta, lambda) = rate_constants(c, mu, lip, gamma, gamma.powf(1.5));
    debug_assert!(
        !(gamma < bound) || lambda < 1.0,
        "lambda = {lambda} >= 1 below the step-size bound"
    );
    RateReport {
        theta,
        lambda,
        gamma_bound: bound,
    }
}

/// A recommended step with a flag for schemes that borrow another scheme's value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepChoice {
    pub gamma: f64,
    pub extrapolated: bool,
}

/// The `λ` multiplying `μ/L²` in HSAG's step size.
pub fn hsag_lambda(kappa: f64, n: usize, s: usize) -> f64 {
    let nf = n as f64;
    let sf = s as f64;
    let first = if s == 0 || s == n {
        1.0
    } else {
        kappa / (6.0 * nf).sqrt()
    };
    first.min(1.0 / (3.0 + 4.0 * sf / nf))
}

pub fn recommended_gamma(scheme: &Scheme, problem: &FiniteSumProblem) -> StepChoice {
    let base = problem.mu() / (problem.lip() * problem.lip());
    let exact = |f: f64| StepChoice {
        gamma: base * f,
        extrapolated: false,
    };
    match scheme {
        Scheme::Gd => exact(1.0),
        Scheme::Svrg { .. } => exact(1.0 / 3.0),
        Scheme::Saga => exact(1.0 / 7.0),
        Scheme::Sarah { .. } => exact(0.5),
        Scheme::Hsag { s, .. } => exact(hsag_lambda(problem.kappa(), problem.n(), s.len())),
        Scheme::SvrgRand { .. } | Scheme::Sagd { .. } | Scheme::SagaSvrgRand { .. } => StepChoice {
            gamma: base / 7.0,
            extrapolated: true,
        },
    }
}

fn log_ratio_ceil(target: f64, rate: f64) -> usize {
    (target.ln() / rate.ln()).ceil().max(1.0) as usize
}

/// SVRG epoch length that contracts by 3/4 per epoch at `γ = μ/(3L²)`.
pub fn svrg_epoch_length(kappa: f64) -> usize {
    log_ratio_ceil(1.0 / 12.0, 1.0 - 1.0 / (3.0 * kappa * kappa))
}

/// SARAH epoch length that contracts `‖B(x̃)‖²` by 3/4 per epoch at `γ = μ/(2L²)`.
pub fn sarah_epoch_length(kappa: f64) -> usize {
    log_ratio_ceil(1.0 / 24.0, 1.0 - 3.0 / (4.0 * kappa * kappa))
}

/// HSAG epoch length for the recommended step.
pub fn hsag_epoch_length(kappa: f64, n: usize, s: usize) -> usize {
    let lambda = hsag_lambda(kappa, n, s);
    let a = 3.0 + 4.0 * s as f64 / n as f64;
    let first = log_ratio_ceil(
        1.0 / 12.0,
        1.0 - (2.0 * lambda - a * lambda * lambda) / (kappa * kappa),
    );
    if s > 0 {
        first.max(log_ratio_ceil(1.0 / 12.0, 1.0 - 1.0 / (2.0 * n as f64)))
    } else {
        first
    }
}

/// Deterministic forward-backward splitting; one row per iteration.
pub fn run_fb(
    problem: &FiniteSumProblem,
    gamma: f64,
    x0: &Vector,
    iterations: usize,
) -> Result<(Vector, Trace)> {
    if !(gamma > 0.0) {
        return usage(format!("step size must be positive, got {gamma}"));
    }
    let limit = 2.0 * problem.mu() / (problem.lip() * problem.lip());
    if gamma >= limit {
        warn!("step {gamma} is outside (0, 2mu/L^2) = (0, {limit}); no rate guarantee");
    }
    let n = problem.n();
    let x_star = problem.known_solution();
    let mut trace = Trace::default();
    let mut x = x0.clone();
    for k in 0..=iterations {
        let next = problem.resolve(gamma, &(&x - problem.apply_full(&x) * gamma))?;
        if !linalg::all_finite(&next) {
            return Err(Error::Numerical(format!(
                "forward-backward iterate diverged at k={k}"
            )));
        }
        trace.rows.push(TraceRow {
            k,
            op_evals: n * k,
            dist_sq: x_star.map(|s| linalg::dist_sq(&x, s)),
            residual: Some((&x - &next).norm()),
            lyapunov: x_star.map(|s| linalg::dist_sq(&x, s)),
            epoch_boundary: true,
            op_norm_sq: None,
        });
        if k == iterations {
            break;
        }
        x = next;
    }
    Ok((x, trace))
}

/// Forward-backward iterations until the fixed-point residual drops below `tol`.
pub(crate) fn fb_until(
    problem: &FiniteSumProblem,
    gamma: f64,
    x0: &Vector,
    tol: f64,
    max_iterations: usize,
) -> Result<Vector> {
    let mut x = x0.clone();
    for _ in 0..max_iterations {
        let next = problem.resolve(gamma, &(&x - problem.apply_full(&x) * gamma))?;
        let step = (&next - &x).norm();
        x = next;
        if step <= tol {
            return Ok(x);
        }
    }
    Err(Error::Numerical(format!(
        "forward-backward did not reach residual {tol:e} in {max_iterations} iterations"
    )))
}

pub(crate) fn index_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(0);
    r
}

pub(crate) fn scheme_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

pub(crate) fn delay_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2);
    r
}

/// Builds trace rows with the diagnostics that need `x*` or the exact operator.
pub(crate) struct Recorder {
    cache: Option<SolutionCache>,
    x_star: Option<Vector>,
    g_set: Vec<bool>,
    rho: f64,
    gamma: f64,
    residual_every: usize,
}

impl Recorder {
    pub(crate) fn new(
        problem: &FiniteSumProblem,
        scheme: &Scheme,
        gamma: f64,
        rho: f64,
        record_every: usize,
    ) -> Self {
        Self {
            cache: SolutionCache::new(problem).ok(),
            x_star: problem.known_solution().cloned(),
            g_set: scheme.g_set(problem.n()),
            rho,
            gamma,
            residual_every: record_every.saturating_mul(problem.n()).max(1),
        }
    }

    pub(crate) fn dist_sq(&self, x: &Vector) -> Option<f64> {
        self.x_star.as_ref().map(|s| linalg::dist_sq(x, s))
    }

    pub(crate) fn lyapunov(&self, x: &Vector, table: &ProxyTable) -> Option<f64> {
        let d = self.dist_sq(x)?;
        let cache = self.cache.as_ref()?;
        Some(d + self.rho * cache.error_over(table, &self.g_set))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn row(
        &self,
        problem: &FiniteSumProblem,
        k: usize,
        op_evals: usize,
        x: &Vector,
        table: &ProxyTable,
        boundary: bool,
        force_residual: bool,
    ) -> Result<TraceRow> {
        let residual = if force_residual || k.is_multiple_of(self.residual_every) {
            Some(problem.fixed_point_residual(self.gamma, x)?)
        } else {
            None
        };
        Ok(TraceRow {
            k,
            op_evals,
            dist_sq: self.dist_sq(x),
            residual,
            lyapunov: self.lyapunov(x, table),
            epoch_boundary: boundary,
            op_norm_sq: None,
        })
    }
}

/// Stepping state of the variance-reduced loop, exposed for tests and wrappers.
pub struct VrRun<'a> {
    pub(crate) problem: &'a FiniteSumProblem,
    pub(crate) engine: ProxyEngine,
    pub(crate) table: ProxyTable,
    pub(crate) x: Vector,
    pub(crate) k: usize,
    pub(crate) op_evals: usize,
    pub(crate) gamma: f64,
    pub(crate) index_rng: ChaCha8Rng,
    pub(crate) scheme_rng: ChaCha8Rng,
    pub(crate) begun: Option<bool>,
}

impl<'a> VrRun<'a> {
    pub fn new(
        problem: &'a FiniteSumProblem,
        scheme: &Scheme,
        gamma: f64,
        x0: Vector,
        seed: u64,
    ) -> Result<Self> {
        if matches!(scheme, Scheme::Sarah { .. }) {
            return usage("SARAH has its own loop; call run_sarah");
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return usage(format!("step size must be positive, got {gamma}"));
        }
        if x0.len() != problem.dim() {
            return usage("x0 has the wrong dimension");
        }
        let engine = ProxyEngine::new(scheme, problem.n())?;
        let (table, op_evals) = engine.init_table(problem, &x0);
        Ok(Self {
            problem,
            engine,
            table,
            x: x0,
            k: 0,
            op_evals,
            gamma,
            index_rng: index_rng(seed),
            scheme_rng: scheme_rng(seed),
            begun: None,
        })
    }

    pub fn x(&self) -> &Vector {
        &self.x
    }

    pub fn table(&self) -> &ProxyTable {
        &self.table
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn op_evals(&self) -> usize {
        self.op_evals
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn engine(&self) -> &ProxyEngine {
        &self.engine
    }

    /// Applies the epoch-start refresh for the current `k` (idempotent) and reports
    /// whether `k` is an epoch boundary.
    pub fn prepare(&mut self) -> bool {
        if let Some(b) = self.begun {
            return b;
        }
        let (effect, boundary) =
            self.engine
                .begin_iteration(self.k, &self.x, self.problem, &mut self.table);
        self.op_evals += effect.op_evals;
        self.begun = Some(boundary);
        boundary
    }

    /// The iterate that index `i` would produce from the current state, without mutating.
    pub fn peek(&mut self, i: usize) -> Result<Vector> {
        self.prepare();
        let g = if self.engine.uses_full_mean() {
            self.table.mean().clone()
        } else {
            estimate(&self.table, self.problem, &self.x, i).0
        };
        self.problem
            .resolve(self.gamma, &(&self.x - g * self.gamma))
    }

    /// One iteration: draw `I_k`, take the forward-backward step, update the proxies.
    pub fn step(&mut self) -> Result<ProxyEffect> {
        self.prepare();
        let n = self.problem.n();
        let i = self.index_rng.random_range(0..n);
        let (g, b) = if self.engine.uses_full_mean() {
            (self.table.mean().clone(), None)
        } else {
            let (g, b) = estimate(&self.table, self.problem, &self.x, i);
            (g, Some(b))
        };
        let next = self
            .problem
            .resolve(self.gamma, &(&self.x - g * self.gamma))?;
        if !linalg::all_finite(&next) {
            return Err(Error::Numerical(format!(
                "iterate diverged at k={}",
                self.k
            )));
        }
        let b = b.unwrap_or_else(|| Vector::zeros(0));
        let effect = self.engine.update(
            self.k,
            &self.x,
            self.problem,
            &mut self.table,
            i,
            &b,
            &mut self.scheme_rng,
        );
        self.op_evals += self.engine.iteration_charge() + effect.op_evals;
        self.x = next;
        self.k += 1;
        self.begun = None;
        Ok(effect)
    }
}

/// A loop that the shared trace-recording driver can advance.
pub(crate) trait Stepper {
    fn k(&self) -> usize;
    fn x(&self) -> &Vector;
    fn table(&self) -> &ProxyTable;
    fn op_evals(&self) -> usize;
    fn iteration_charge(&self) -> usize;
    fn prepare(&mut self) -> bool;
    fn advance(&mut self) -> Result<()>;
}

impl Stepper for VrRun<'_> {
    fn k(&self) -> usize {
        self.k
    }
    fn x(&self) -> &Vector {
        &self.x
    }
    fn table(&self) -> &ProxyTable {
        &self.table
    }
    fn op_evals(&self) -> usize {
        self.op_evals
    }
    fn iteration_charge(&self) -> usize {
        self.engine.iteration_charge()
    }
    fn prepare(&mut self) -> bool {
        VrRun::prepare(self)
    }
    fn advance(&mut self) -> Result<()> {
        self.step().map(|_| ())
    }
}

/// Runs `stepper` to the configured limits. Rows are recorded at `record_every`, at every
/// nontrivial epoch start, and at the final iterate.
pub(crate) fn drive<S: Stepper>(
    stepper: &mut S,
    problem: &FiniteSumProblem,
    scheme: &Scheme,
    config: &RunConfig,
    gamma: f64,
) -> Result<Trace> {
    let rec = Recorder::new(
        problem,
        scheme,
        gamma,
        config.rho.value(gamma),
        config.record_every,
    );
    let epoch_tagged = matches!(scheme, Scheme::Svrg { .. } | Scheme::Hsag { .. });
    let budget = config
        .op_eval_budget
        .map(|b| (b * problem.n() as f64).floor() as usize);
    let d0 = rec.dist_sq(stepper.x());
    let mut trace = Trace::default();
    loop {
        let k = stepper.k();
        let over_budget =
            budget.is_some_and(|b| stepper.op_evals() + stepper.iteration_charge() > b);
        let reached = match (config.stop_ratio, d0, rec.dist_sq(stepper.x())) {
            (Some(r), Some(d0), Some(d)) => k > 0 && d <= r * d0,
            _ => false,
        };
        if k >= config.max_iterations || over_budget || reached {
            trace.rows.push(rec.row(
                problem,
                k,
                stepper.op_evals(),
                stepper.x(),
                stepper.table(),
                !epoch_tagged,
                true,
            )?);
            break;
        }
        let boundary = stepper.prepare();
        if k.is_multiple_of(config.record_every) || (epoch_tagged && boundary) {
            trace.rows.push(rec.row(
                problem,
                k,
                stepper.op_evals(),
                stepper.x(),
                stepper.table(),
                boundary,
                k == 0,
            )?);
        }
        stepper.advance()?;
    }
    Ok(trace)
}

/// Variance-reduced forward-backward splitting.
pub fn run_vr(
    problem: &FiniteSumProblem,
    scheme: &Scheme,
    config: &RunConfig,
) -> Result<(Vector, Trace)> {
    config.validate()?;
    let gamma = config.resolve_gamma(scheme, problem)?;
    let x0 = config.start_point(problem)?;
    let mut run = VrRun::new(problem, scheme, gamma, x0, config.seed)?;
    let trace = drive(&mut run, problem, scheme, config, gamma)?;
    Ok((run.x, trace))
}

/// SARAH for `A = 0`. Rows are recorded at every epoch start with `‖B(x̃)‖²`.
pub fn run_sarah(
    problem: &FiniteSumProblem,
    m: usize,
    gamma: f64,
    x0: &Vector,
    epochs: usize,
    seed: u64,
) -> Result<(Vector, Trace)> {
    if !problem.resolvent().is_zero() {
        return usage("SARAH requires the zero operator A");
    }
    if m == 0 {
        return usage("SARAH epoch length must be at least 1");
    }
    if !(gamma > 0.0) {
        return usage(format!("step size must be positive, got {gamma}"));
    }
    let n = problem.n();
    let mut rng = index_rng(seed);
    let x_star = problem.known_solution();
    let mut trace = Trace::default();
    let mut x = x0.clone();
    let mut x_prev = x0.clone();
    let mut v = Vector::zeros(problem.dim());
    let mut op_evals = 0usize;
    let total = epochs.saturating_mul(m);
    for k in 0..=total {
        let boundary = k % m == 0;
        if k == total {
            let b = problem.apply_full(&x);
            trace.rows.push(TraceRow {
                k,
                op_evals,
                dist_sq: x_star.map(|s| linalg::dist_sq(&x, s)),
                residual: Some(gamma * b.norm()),
                lyapunov: None,
                epoch_boundary: boundary,
                op_norm_sq: Some(b.norm_squared()),
            });
            break;
        }
        let i = rng.random_range(0..n);
        if boundary {
            v = problem.apply_full(&x);
            trace.rows.push(TraceRow {
                k,
                op_evals,
                dist_sq: x_star.map(|s| linalg::dist_sq(&x, s)),
                residual: Some(gamma * v.norm()),
                lyapunov: None,
                epoch_boundary: true,
                op_norm_sq: Some(v.norm_squared()),
            });
            op_evals += n;
        } else {
            v = problem.eval(i, &x) - problem.eval(i, &x_prev) + &v;
            op_evals += 2;
        }
        let next = &x - &v * gamma;
        if !linalg::all_finite(&next) {
            return Err(Error::Numerical(format!("SARAH diverged at k={k}")));
        }
        x_prev = std::mem::replace(&mut x, next);
    }
    Ok((x, trace))
}

/// `E‖x_{k+1} − x*‖²` over the uniform index, enumerated exactly.
pub fn expected_next_dist_sq(run: &mut VrRun<'_>) -> Result<f64> {
    let x_star = run
        .problem
        .known_solution()
        .ok_or_else(|| Error::Usage("expected distance needs a known solution".into()))?
        .clone();
    let n = run.problem.n();
    let mut total = 0.0;
    for i in 0..n {
        total += linalg::dist_sq(&run.peek(i)?, &x_star);
    }
    Ok(total / n as f64)
}

/// The estimator for every index at the current state, in index order.
pub fn enumerate_estimates(run: &mut VrRun<'_>) -> Vec<Vector> {
    run.prepare();
    let n = run.problem.n();
    (0..n)
        .map(|i| {
            if run.engine.uses_full_mean() {
                run.table.mean().clone()
            } else {
                let b = run.problem.eval(i, &run.x);
                estimator(&b, run.table.row(i), run.table.mean())
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::operators::{Component, Resolvent};

    fn scalar_problem(mu: f64) -> FiniteSumProblem {
        FiniteSumProblem::new(
            Resolvent::Zero,
            vec![Component::Affine {
                m: Matrix::identity(1, 1) * mu,
                b: Vector::zeros(1),
            }],
            1,
            mu,
            mu,
        )
        .unwrap()
        .with_known_solution(Vector::zeros(1))
        .unwrap()
    }

    #[test]
    fn exact_one_step_solve() {
        let p = scalar_problem(4.0);
        let (x, trace) = run_fb(&p, 0.25, &Vector::from_element(1, 7.0), 3).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(trace.rows.len(), 4);
        assert_eq!(trace.rows[1].dist_sq, Some(0.0));
        assert_eq!(trace.rows[3].op_evals, 3);
    }

    #[test]
    fn fixed_point_start_stays_put() {
        let p = scalar_problem(2.0);
        let (x, trace) = run_fb(&p, 0.1, &Vector::zeros(1), 5).unwrap();
        assert_eq!(x[0], 0.0);
        assert!(trace.rows.iter().all(|r| r.dist_sq == Some(0.0)));
    }

    #[test]
    fn epoch_lengths() {
        assert_eq!(svrg_epoch_length(3.0), 66);
        let m = sarah_epoch_length(3.0);
        let q: f64 = 1.0 - 3.0 / 36.0;
        assert!(q.powi(m as i32) <= 1.0 / 24.0 && q.powi(m as i32 - 1) > 1.0 / 24.0);
    }

    #[test]
    fn hsag_lambda_branches() {
        assert_eq!(hsag_lambda(10.0, 16, 0), 1.0 / 3.0);
        assert_eq!(hsag_lambda(10.0, 16, 16), 1.0 / 7.0);
        let mid = hsag_lambda(1.0, 96, 48);
        assert_eq!(mid, 1.0 / 24.0);
    }

    #[test]
    fn policies_parse() {
        let c: RunConfig =
            serde_json::from_str(r#"{"gamma":"auto","rho":"gamma^1.5","max_iterations":5}"#)
                .unwrap();
        assert_eq!(c.gamma, GammaPolicy::Auto);
        assert_eq!(c.rho, RhoPolicy::GammaPow15);
        let c: RunConfig = serde_json::from_str(r#"{"gamma":0.5,"rho":2.0}"#).unwrap();
        assert_eq!(c.gamma, GammaPolicy::Value(0.5));
        assert_eq!(c.rho, RhoPolicy::Value(2.0));
        assert!(serde_json::from_str::<RunConfig>(r#"{"gamma":"fast"}"#).is_err());
    }

    #[test]
    fn sarah_is_rejected_by_run_vr() {
        let p = scalar_problem(1.0);
        let r = run_vr(&p, &Scheme::Sarah { m: 2 }, &RunConfig::default());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn csv_shape() {
        let p = scalar_problem(1.0);
        let (_, t) = run_vr(&p, &Scheme::Saga, &RunConfig::default().with_iterations(3)).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        assert_eq!(lines.count(), 4);
    }
}
