//! Deterministic simulation of the asynchronous forward step with bounded-delay reads.
//!
//! Step `k` reads the stale snapshot `(x̂_k, φ̂^k) = (x_{D(k)}, φ^{D(k)})`, forms the
//! estimator from it, and writes `x_{k+1} = x_k − γ𝒢`. Proxy writes use the stale
//! evaluation `B_{I_k}(x̂_k)`; epoch-start refreshes read the true iterate.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{usage, Error, Result};
use crate::linalg::{self, Vector};
use crate::operators::FiniteSumProblem;
use crate::proxy::{estimator, ProxyTable, Scheme, SchemeConstants};
use crate::solver::{delay_rng, drive, RunConfig, Stepper, Trace, VrRun};

/// How `k − D(k)` is generated before clipping to `[0, τ]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelayModel {
    /// Always `τ`.
    Constant,
    /// Uniform on `0..=τ`.
    Uniform,
    /// `k mod P` for `P` round-robin workers.
    Cyclic { workers: usize },
}

impl fmt::Display for DelayModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DelayModel::Constant => write!(f, "constant"),
            DelayModel::Uniform => write!(f, "uniform"),
            DelayModel::Cyclic { workers } => write!(f, "cyclic:{workers}"),
        }
    }
}

impl FromStr for DelayModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(DelayModel::Constant),
            "uniform" => Ok(DelayModel::Uniform),
            _ => match s.strip_prefix("cyclic:").map(str::parse::<usize>) {
                Some(Ok(p)) if p >= 1 => Ok(DelayModel::Cyclic { workers: p }),
                _ => usage(format!(
                    "delay model must be constant, uniform or cyclic:<P>, got {s:?}"
                )),
            },
        }
    }
}

impl Serialize for DelayModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DelayModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsyncConfig {
    pub tau: usize,
    pub delay_model: DelayModel,
    #[serde(default = "default_true")]
    pub sync_at_epoch: bool,
    /// Evaluate every `‖Bᵢ(x_k)‖` each step to measure `M_{φ,B}` (uncounted diagnostic).
    #[serde(default = "default_true")]
    pub measure_bounds: bool,
    /// Keep the `(k, D(k), last sync)` triple of every step in the report.
    #[serde(default)]
    pub record_reads: bool,
}

impl AsyncConfig {
    pub fn new(tau: usize, delay_model: DelayModel) -> Self {
        Self {
            tau,
            delay_model,
            sync_at_epoch: true,
            measure_bounds: true,
            record_reads: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadEvent {
    pub k: usize,
    pub read: usize,
    pub last_sync: usize,
}

/// Realized bounds and the error constants of the asynchronous analysis.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AsyncErrorReport {
    /// Observed `max(‖φᵢ^k‖, ‖Bᵢ(x_k)‖)`.
    pub m_hat: f64,
    /// Observed `max ‖𝒢(x̂_k, φ̂^k, I_k)‖`.
    pub max_estimator_norm: f64,
    pub e0: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    /// `max_k ‖x_k − x̂_k‖²`.
    pub max_delay_error: f64,
    /// `max_k (1/n) Σᵢ ‖φᵢ^k − φ̂ᵢ^k‖²`.
    pub observed_e2: f64,
    /// Largest number of rows that differ between `φ^k` and `φ̂^k`.
    pub max_stale_rows: usize,
    /// Largest `(1/n) Σ‖φᵢ^k − φ̂ᵢ^k‖² − 4·stale_rows·M̂²/n` seen; nonpositive when the
    /// per-step staleness bound held.
    pub worst_staleness_slack: f64,
    pub reads: Vec<ReadEvent>,
}

/// Error constants `(E₀, E₁, E₂, E₃)` for `M = 3·m_hat`.
pub fn error_constants(
    scheme: &Scheme,
    problem: &FiniteSumProblem,
    tau: usize,
    gamma: f64,
    rho: f64,
    m_hat: f64,
) -> (f64, f64, f64, f64) {
    let t = tau as f64;
    let mu = problem.mu();
    let l2 = problem.lip() * problem.lip();
    let nf = problem.n() as f64;
    let m2 = (3.0 * m_hat).powi(2);
    let g2 = gamma * gamma;
    let e0 =
        2.0 * gamma.powi(3) * mu * t * t * m2 + 6.0 * g2 * g2 * l2 * t * t * m2 + 2.0 * g2 * t * m2;
    let (e1, e2) = match scheme {
        Scheme::Saga => (
            2.0 * l2 * g2 * t * t * m2 / nf,
            4.0 * t * m_hat * m_hat / nf,
        ),
        Scheme::SvrgRand { p } => (2.0 * p.bounds().1 * l2 * g2 * t * t * m2, 0.0),
        Scheme::Hsag { s, .. } => (
            2.0 * s.len() as f64 * l2 * g2 * t * t * m2 / (nf * nf),
            4.0 * t * m_hat * m_hat / nf,
        ),
        _ => (0.0, 0.0),
    };
    let e3 = 4.0 * g2 * e2 + e0 + rho * e1;
    (e0, e1, e2, e3)
}

/// Constants of the asynchronous analysis for the supported schemes.
pub fn async_scheme_constants(
    scheme: &Scheme,
    problem: &FiniteSumProblem,
) -> Result<SchemeConstants> {
    let n = problem.n();
    let nf = n as f64;
    let l2 = problem.lip() * problem.lip();
    Ok(match scheme {
        Scheme::Svrg { epochs } => SchemeConstants {
            c1: 0.0,
            c2: 0.0,
            c3: l2,
            s_cardinality: 0,
            m_bar: epochs
                .sup()
                .ok_or_else(|| Error::Unsupported("unbounded epoch lengths".into()))?,
        },
        Scheme::Saga => SchemeConstants {
            c1: 1.0 - 1.0 / nf,
            c2: 2.0 * l2 / nf,
            c3: 0.0,
            s_cardinality: n,
            m_bar: 1,
        },
        Scheme::SvrgRand { p } => {
            let (lo, hi) = p.bounds();
            if !(lo > 0.0) {
                return Err(Error::Unsupported("inf p_k = 0".into()));
            }
            SchemeConstants {
                c1: 1.0 - lo,
                c2: 2.0 * hi * l2,
                c3: 0.0,
                s_cardinality: n,
                m_bar: 1,
            }
        }
        Scheme::Hsag { s, m } => {
            let sf = s.len() as f64;
            SchemeConstants {
                c1: if s.is_empty() { 0.0 } else { 1.0 - 1.0 / nf },
                c2: 2.0 * sf * l2 / (nf * nf),
                c3: (nf - sf) * l2 / nf,
                s_cardinality: s.len(),
                m_bar: *m,
            }
        }
        other => {
            return Err(Error::Unsupported(format!(
                "no asynchronous analysis for {}",
                other.name()
            )))
        }
    })
}

/// `θ` and `λ` of the asynchronous analysis at `(γ, ρ)`.
pub fn async_rate_constants(
    c: &SchemeConstants,
    mu: f64,
    lip: f64,
    gamma: f64,
    rho: f64,
) -> (f64, f64) {
    let l2 = lip * lip;
    let g2 = gamma * gamma;
    let theta = (1.0 - gamma * mu + 6.0 * g2 * l2 + c.c2 * rho).max(4.0 * g2 / rho + c.c1);
    (theta, theta + 4.0 * g2 * c.m_bar as f64 * c.c3)
}

/// The asynchronous step-size rule.
pub fn async_gamma_bound(c: &SchemeConstants, mu: f64, lip: f64) -> f64 {
    let l2 = lip * lip;
    let m_bar = c.m_bar as f64;
    let a = 1.0 - c.c1;
    let first = (mu / (1.5 * a * l2 + a * m_bar * c.c3 + c.c2)).powi(2);
    let second = (a / (4.0 + 4.0 * m_bar * (a / 4.0).powi(3) * c.c3)).powi(2);
    first.min(second)
}

/// `‖x_k − x̂_k‖²` from a history indexed by iteration.
pub fn measure_delay_error(history: &[Vector], k: usize, read: usize) -> f64 {
    linalg::dist_sq(&history[k], &history[read])
}

struct AsyncRun<'a> {
    inner: VrRun<'a>,
    config: AsyncConfig,
    delays: ChaCha8Rng,
    /// `x_j` for `j` in `[k − len + 1, k]`.
    history: VecDeque<Vector>,
    /// `(version, row, value before the write)`; the write is visible from `version` on.
    log: VecDeque<(usize, usize, Vector)>,
    last_sync: usize,
    report: AsyncErrorReport,
}

impl AsyncRun<'_> {
    fn draw_read(&mut self, k: usize) -> usize {
        let tau = self.config.tau;
        let delay = match self.config.delay_model {
            DelayModel::Constant => tau,
            DelayModel::Uniform => {
                if tau == 0 {
                    0
                } else {
                    self.delays.random_range(0..=tau)
                }
            }
            DelayModel::Cyclic { workers } => (k % workers).min(tau),
        };
        let mut read = k - delay.min(k);
        if self.config.sync_at_epoch {
            read = read.max(self.last_sync);
        }
        read
    }

    fn absorb_journal(&mut self, version: usize) {
        for (row, old) in self.inner.table.take_journal() {
            self.log.push_back((version, row, old));
        }
    }

    fn prune(&mut self, k: usize) {
        let keep_from = k.saturating_sub(self.config.tau);
        while self.log.front().is_some_and(|(v, _, _)| *v <= keep_from) {
            self.log.pop_front();
        }
        while self.history.len() > self.config.tau + 1 {
            self.history.pop_front();
        }
    }

    /// Rows of `φ^read` that differ from the current table.
    fn stale_rows(&self, read: usize) -> HashMap<usize, Vector> {
        let mut rows = HashMap::new();
        for (version, row, old) in self.log.iter().rev() {
            if *version > read {
                rows.insert(*row, old.clone());
            }
        }
        rows
    }

    fn observe_bounds(&mut self) {
        let table = &self.inner.table;
        let mut m = self.report.m_hat;
        for r in table.rows() {
            m = m.max(r.norm());
        }
        if self.config.measure_bounds {
            for i in 0..self.inner.problem.n() {
                m = m.max(self.inner.problem.eval(i, &self.inner.x).norm());
            }
        }
        self.report.m_hat = m;
    }
}

impl Stepper for AsyncRun<'_> {
    fn k(&self) -> usize {
        self.inner.k
    }
    fn x(&self) -> &Vector {
        &self.inner.x
    }
    fn table(&self) -> &ProxyTable {
        &self.inner.table
    }
    fn op_evals(&self) -> usize {
        self.inner.op_evals
    }
    fn iteration_charge(&self) -> usize {
        self.inner.engine.iteration_charge()
    }

    fn prepare(&mut self) -> bool {
        let was_prepared = self.inner.begun.is_some();
        let before = self.inner.op_evals;
        let boundary = self.inner.prepare();
        if !was_prepared {
            let k = self.inner.k;
            let writes = self.inner.table.take_journal();
            let refreshed = !writes.is_empty() || self.inner.op_evals > before;
            for (row, old) in writes {
                self.log.push_back((k, row, old));
            }
            if refreshed {
                self.last_sync = k;
            }
        }
        boundary
    }

    fn advance(&mut self) -> Result<()> {
        self.prepare();
        let k = self.inner.k;
        let n = self.inner.problem.n();
        self.observe_bounds();
        let read = self.draw_read(k);
        if self.config.record_reads {
            self.report.reads.push(ReadEvent {
                k,
                read,
                last_sync: self.last_sync,
            });
        }
        let offset = k - read;
        let x_hat = self.history[self.history.len() - 1 - offset].clone();
        let stale = self.stale_rows(read);
        let i = self.inner.index_rng.random_range(0..n);
        let b = self.inner.problem.eval(i, &x_hat);
        let table = &self.inner.table;
        let g = if stale.is_empty() {
            estimator(&b, table.row(i), table.mean())
        } else {
            let mut mean_hat = table.mean().clone();
            let mut gap = 0.0;
            for (row, old) in &stale {
                mean_hat -= (table.row(*row) - old) / n as f64;
                gap += linalg::dist_sq(table.row(*row), old);
            }
            gap /= n as f64;
            self.report.observed_e2 = self.report.observed_e2.max(gap);
            let slack = gap - 4.0 * stale.len() as f64 * self.report.m_hat.powi(2) / n as f64;
            self.report.worst_staleness_slack = self.report.worst_staleness_slack.max(slack);
            let phi_hat_i = stale.get(&i).unwrap_or(table.row(i));
            estimator(&b, phi_hat_i, &mean_hat)
        };
        self.report.max_stale_rows = self.report.max_stale_rows.max(stale.len());
        self.report.max_estimator_norm = self.report.max_estimator_norm.max(g.norm());
        self.report.max_delay_error = self
            .report
            .max_delay_error
            .max(linalg::dist_sq(&self.inner.x, &x_hat));

        let gamma = self.inner.gamma;
        let next = self
            .inner
            .problem
            .resolve(gamma, &(&self.inner.x - g * gamma))?;
        if !linalg::all_finite(&next) {
            return Err(Error::Numerical(format!(
                "asynchronous iterate diverged at k={k}"
            )));
        }
        let effect = self.inner.engine.update(
            k,
            &x_hat,
            self.inner.problem,
            &mut self.inner.table,
            i,
            &b,
            &mut self.inner.scheme_rng,
        );
        self.absorb_journal(k + 1);
        if effect.bulk_refresh {
            self.last_sync = k + 1;
        }
        self.inner.op_evals += self.inner.engine.iteration_charge() + effect.op_evals;
        self.inner.x = next;
        self.inner.k += 1;
        self.inner.begun = None;
        self.history.push_back(self.inner.x.clone());
        self.prune(self.inner.k);
        Ok(())
    }
}

/// Simulates the asynchronous forward step for `A = 0`.
pub fn run_async(
    problem: &FiniteSumProblem,
    scheme: &Scheme,
    config: &RunConfig,
    async_config: &AsyncConfig,
) -> Result<(Vector, Trace, AsyncErrorReport)> {
    if !problem.resolvent().is_zero() {
        return usage("the asynchronous simulation needs the zero operator A");
    }
    if !matches!(
        scheme,
        Scheme::Svrg { .. } | Scheme::Saga | Scheme::Hsag { .. } | Scheme::SvrgRand { .. }
    ) {
        return usage(format!(
            "asynchronous simulation supports svrg, saga, hsag and svrg-rand, not {}",
            scheme.name()
        ));
    }
    config.validate()?;
    let gamma = config.resolve_gamma(scheme, problem)?;
    let x0 = config.start_point(problem)?;
    let mut inner = VrRun::new(problem, scheme, gamma, x0.clone(), config.seed)?;
    inner.table.enable_journal();
    let mut run = AsyncRun {
        inner,
        config: async_config.clone(),
        delays: delay_rng(config.seed),
        history: VecDeque::from([x0]),
        log: VecDeque::new(),
        last_sync: 0,
        report: AsyncErrorReport::default(),
    };
    let trace = drive(&mut run, problem, scheme, config, gamma)?;
    run.observe_bounds();
    let rho = config.rho.value(gamma);
    let mut report = run.report;
    let (e0, e1, e2, e3) =
        error_constants(scheme, problem, async_config.tau, gamma, rho, report.m_hat);
    report.e0 = e0;
    report.e1 = e1;
    report.e2 = e2;
    report.e3 = e3;
    Ok((run.inner.x, trace, report))
}
