//! Proxy table, the variance-reduced estimator and the per-scheme update rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::linalg::{self, Vector};
use crate::operators::FiniteSumProblem;

/// Stored component evaluations `φᵢ` with an incrementally maintained mean.
#[derive(Clone, Debug)]
pub struct ProxyTable {
    rows: Vec<Vector>,
    mean: Vector,
    updates_since_recompute: usize,
    journal: Option<Vec<(usize, Vector)>>,
}

impl ProxyTable {
    pub fn from_rows(rows: Vec<Vector>) -> Self {
        assert!(!rows.is_empty(), "proxy table needs at least one row");
        let dim = rows[0].len();
        let mean = linalg::mean_of(&rows, dim);
        Self {
            rows,
            mean,
            updates_since_recompute: 0,
            journal: None,
        }
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self::from_rows(vec![Vector::zeros(dim); n])
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn row(&self, i: usize) -> &Vector {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vector] {
        &self.rows
    }

    /// The cached mean `(1/n) Σ φᵢ`.
    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn exact_mean(&self) -> Vector {
        linalg::mean_of(&self.rows, self.dim())
    }

    pub fn recompute_mean(&mut self) {
        self.mean = self.exact_mean();
        self.updates_since_recompute = 0;
    }

    /// Replaces one row, updating the mean incrementally.
    pub fn set_row(&mut self, i: usize, value: Vector) {
        let n = self.n() as f64;
        self.mean += (&value - &self.rows[i]) / n;
        let old = std::mem::replace(&mut self.rows[i], value);
        if let Some(j) = self.journal.as_mut() {
            j.push((i, old));
        }
        self.updates_since_recompute += 1;
        if self.updates_since_recompute >= self.n() {
            self.recompute_mean();
        }
    }

    /// Replaces the listed rows and recomputes the mean exactly.
    pub fn set_rows<I>(&mut self, values: I)
    where
        I: IntoIterator<Item = (usize, Vector)>,
    {
        for (i, value) in values {
            let old = std::mem::replace(&mut self.rows[i], value);
            if let Some(j) = self.journal.as_mut() {
                j.push((i, old));
            }
        }
        self.recompute_mean();
    }

    /// Starts recording `(row, previous value)` for every write.
    pub fn enable_journal(&mut self) {
        self.journal = Some(Vec::new());
    }

    pub fn take_journal(&mut self) -> Vec<(usize, Vector)> {
        self.journal
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }
}

/// `Bᵢ(x) − φᵢ + mean(φ)`, evaluated in a fixed order so every caller agrees bit for bit.
#[inline]
pub fn estimator(b_i_x: &Vector, phi_i: &Vector, mean: &Vector) -> Vector {
    b_i_x - phi_i + mean
}

/// Returns `(𝒢, Bᵢ(x))`; costs one component evaluation.
pub fn estimate(
    table: &ProxyTable,
    problem: &FiniteSumProblem,
    x: &Vector,
    i: usize,
) -> (Vector, Vector) {
    let b = problem.eval(i, x);
    let g = estimator(&b, table.row(i), table.mean());
    (g, b)
}

/// Epoch lengths `m₀, m₁, …` for SVRG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpochSchedule {
    Constant {
        m: usize,
    },
    /// Explicit lengths; the last one repeats.
    List {
        lengths: Vec<usize>,
    },
    /// `initial · 2ʲ` for epoch `j`.
    Doubling {
        initial: usize,
    },
}

impl EpochSchedule {
    pub fn length(&self, epoch: usize) -> usize {
        match self {
            EpochSchedule::Constant { m } => *m,
            EpochSchedule::List { lengths } => lengths[epoch.min(lengths.len() - 1)],
            EpochSchedule::Doubling { initial } => {
                let shift = epoch.min(usize::BITS as usize - 1) as u32;
                initial.saturating_mul(1usize.checked_shl(shift).unwrap_or(usize::MAX))
            }
        }
    }

    pub fn sup(&self) -> Option<usize> {
        match self {
            EpochSchedule::Constant { m } => Some(*m),
            EpochSchedule::List { lengths } => lengths.iter().copied().max(),
            EpochSchedule::Doubling { .. } => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            EpochSchedule::Constant { m } => *m >= 1,
            EpochSchedule::List { lengths } => {
                !lengths.is_empty() && lengths.iter().all(|&m| m >= 1)
            }
            EpochSchedule::Doubling { initial } => *initial >= 1,
        };
        if ok {
            Ok(())
        } else {
            usage("epoch lengths must be at least 1")
        }
    }
}

/// Refresh probabilities `p_k` for the randomized schemes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbSchedule {
    Constant {
        p: f64,
    },
    /// `p_k = 1` when `period | k`, else 0.
    Periodic {
        period: usize,
    },
    /// Explicit values; the last one repeats.
    List {
        values: Vec<f64>,
    },
    /// `warmup_p` for `k < warmup_iters`, then `start` halved after every refresh, with a
    /// forced refresh once `max_gap` iterations pass without one.
    Halving {
        warmup_iters: usize,
        warmup_p: f64,
        start: f64,
        max_gap: usize,
    },
}

impl ProbSchedule {
    /// The default experimental schedule for `n` components.
    pub fn halving_default(n: usize) -> Self {
        let p = 1.0 / (2.0 * n as f64);
        ProbSchedule::Halving {
            warmup_iters: n,
            warmup_p: p,
            start: p,
            max_gap: 8 * n,
        }
    }

    /// `(inf p_k, sup p_k)` when both are known in closed form.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ProbSchedule::Constant { p } => (*p, *p),
            ProbSchedule::Periodic { period } => (if *period == 1 { 1.0 } else { 0.0 }, 1.0),
            ProbSchedule::List { values } => (
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(0.0, f64::max),
            ),
            ProbSchedule::Halving {
                warmup_p, start, ..
            } => (0.0, warmup_p.max(*start)),
        }
    }

    fn validate(&self) -> Result<()> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        let ok = match self {
            ProbSchedule::Constant { p } => in_unit(*p),
            ProbSchedule::Periodic { period } => *period >= 1,
            ProbSchedule::List { values } => {
                !values.is_empty() && values.iter().all(|&p| in_unit(p))
            }
            ProbSchedule::Halving {
                warmup_p,
                start,
                max_gap,
                ..
            } => in_unit(*warmup_p) && in_unit(*start) && *max_gap >= 1,
        };
        if ok {
            Ok(())
        } else {
            usage("probabilities must lie in [0, 1] and periods must be at least 1")
        }
    }
}

/// The proxy update rule that defines each algorithm. Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Scheme {
    Gd,
    Svrg { epochs: EpochSchedule },
    Saga,
    SvrgRand { p: ProbSchedule },
    Sagd { q: f64 },
    Hsag { s: Vec<usize>, m: usize },
    SagaSvrgRand { s1: Vec<usize>, p: ProbSchedule },
    Sarah { m: usize },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Gd => "gd",
            Scheme::Svrg { .. } => "svrg",
            Scheme::Saga => "saga",
            Scheme::SvrgRand { .. } => "svrg-rand",
            Scheme::Sagd { .. } => "sagd",
            Scheme::Hsag { .. } => "hsag",
            Scheme::SagaSvrgRand { .. } => "saga-svrg-rand",
            Scheme::Sarah { .. } => "sarah",
        }
    }

    pub fn svrg(m: usize) -> Self {
        Scheme::Svrg {
            epochs: EpochSchedule::Constant { m },
        }
    }

    /// Checks parameters against a problem with `n` components.
    pub fn validate(&self, n: usize) -> Result<()> {
        let check_set = |s: &[usize]| -> Result<()> {
            let mut seen = vec![false; n];
            for &i in s {
                if i >= n || seen[i] {
                    return usage(format!("index set must hold distinct indices below {n}"));
                }
                seen[i] = true;
            }
            Ok(())
        };
        match self {
            Scheme::Gd | Scheme::Saga => Ok(()),
            Scheme::Svrg { epochs } => epochs.validate(),
            Scheme::SvrgRand { p } => p.validate(),
            Scheme::Sagd { q } if (0.0..=1.0).contains(q) => Ok(()),
            Scheme::Sagd { q } => usage(format!("SAGD probability {q} outside [0, 1]")),
            Scheme::Hsag { s, m } => {
                if *m == 0 {
                    return usage("HSAG epoch length must be at least 1");
                }
                check_set(s)
            }
            Scheme::SagaSvrgRand { s1, p } => {
                check_set(s1)?;
                p.validate()
            }
            Scheme::Sarah { m } if *m >= 1 => Ok(()),
            Scheme::Sarah { .. } => usage("SARAH epoch length must be at least 1"),
        }
    }

    /// Membership of each index in the set `𝒮` that defines `G`.
    pub fn g_set(&self, n: usize) -> Vec<bool> {
        match self {
            Scheme::Gd | Scheme::Svrg { .. } | Scheme::Sarah { .. } => vec![false; n],
            Scheme::Hsag { s, .. } => membership(s, n),
            _ => vec![true; n],
        }
    }
}

fn membership(s: &[usize], n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in s {
        m[i] = true;
    }
    m
}

/// Constants `(c₁, c₂, c₃)`, `|𝒮|` and `m̄` consumed by the step-size rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub s_cardinality: usize,
    pub m_bar: usize,
}

fn p_bounds_for_rate(p: &ProbSchedule) -> Result<(f64, f64)> {
    let (lo, hi) = p.bounds();
    if !(lo > 0.0) {
        return Err(Error::Unsupported(
            "probability schedule has inf p_k = 0, so no linear rate applies".into(),
        ));
    }
    Ok((lo, hi))
}

/// Synchronous constants for every scheme except SARAH.
pub fn scheme_constants(scheme: &Scheme, problem: &FiniteSumProblem) -> Result<SchemeConstants> {
    let n = problem.n();
    let nf = n as f64;
    let l2 = problem.lip() * problem.lip();
    scheme.validate(n)?;
    Ok(match scheme {
        Scheme::Gd => SchemeConstants {
            c1: 0.0,
            c2: 0.0,
            c3: l2,
            s_cardinality: 0,
            m_bar: 1,
        },
        Scheme::Svrg { epochs } => SchemeConstants {
            c1: 0.0,
            c2: 0.0,
            c3: l2,
            s_cardinality: 0,
            m_bar: epochs.sup().ok_or_else(|| {
                Error::Unsupported("unbounded epoch lengths have no finite m_bar".into())
            })?,
        },
        Scheme::Saga => SchemeConstants {
            c1: 1.0 - 1.0 / nf,
            c2: l2 / nf,
            c3: 0.0,
            s_cardinality: n,
            m_bar: 1,
        },
        Scheme::SvrgRand { p } => {
            let (lo, hi) = p_bounds_for_rate(p)?;
            SchemeConstants {
                c1: 1.0 - lo,
                c2: hi * l2,
                c3: 0.0,
                s_cardinality: n,
                m_bar: 1,
            }
        }
        Scheme::Sagd { q } => {
            let c1 = (1.0 - q) * (1.0 - 1.0 / nf);
            SchemeConstants {
                c1,
                c2: (1.0 - c1) * l2,
                c3: 0.0,
                s_cardinality: n,
                m_bar: 1,
            }
        }
        Scheme::Hsag { s, m } => {
            let sf = s.len() as f64;
            SchemeConstants {
                c1: if s.is_empty() { 0.0 } else { 1.0 - 1.0 / nf },
                c2: sf * l2 / (nf * nf),
                c3: (nf - sf) * l2 / nf,
                s_cardinality: s.len(),
                m_bar: *m,
            }
        }
        Scheme::SagaSvrgRand { s1, p } => {
            let (lo, hi) = p_bounds_for_rate(p)?;
            let s1f = s1.len() as f64;
            let s2f = nf - s1f;
            SchemeConstants {
                c1: (1.0 - 1.0 / nf).max(1.0 - lo),
                c2: s1f * l2 / (nf * nf) + hi * s2f * l2 / nf,
                c3: 0.0,
                s_cardinality: n,
                m_bar: 1,
            }
        }
        Scheme::Sarah { .. } => {
            return Err(Error::Unsupported(
                "SARAH uses a biased estimator outside the Lyapunov framework".into(),
            ))
        }
    })
}

/// What a proxy-maintenance call did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProxyEffect {
    /// Component evaluations beyond the two charged to every stochastic iteration.
    pub op_evals: usize,
    /// A bulk refresh of several rows happened (an epoch start or a randomized full update).
    pub bulk_refresh: bool,
}

/// Runtime state of a scheme: epoch positions and randomized-schedule bookkeeping.
#[derive(Clone, Debug)]
pub struct ProxyEngine {
    scheme: Scheme,
    n: usize,
    in_set: Vec<bool>,
    epoch: usize,
    next_epoch_start: usize,
    last_refresh: usize,
    halvings: u32,
}

impl ProxyEngine {
    pub fn new(scheme: &Scheme, n: usize) -> Result<Self> {
        scheme.validate(n)?;
        let in_set = match scheme {
            Scheme::Hsag { s, .. } => membership(s, n),
            Scheme::SagaSvrgRand { s1, .. } => membership(s1, n),
            _ => vec![false; n],
        };
        Ok(Self {
            scheme: scheme.clone(),
            n,
            in_set,
            epoch: 0,
            next_epoch_start: 0,
            last_refresh: 0,
            halvings: 0,
        })
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    /// Builds `φ⁰` and returns it with the number of evaluations spent.
    pub fn init_table(&self, problem: &FiniteSumProblem, x0: &Vector) -> (ProxyTable, usize) {
        init_table(&self.scheme, problem, x0)
    }

    /// Evaluations charged to one iteration before any refresh: GD reads the table mean
    /// directly, every other scheme pays the two evaluations of a stochastic step.
    pub fn iteration_charge(&self) -> usize {
        match self.scheme {
            Scheme::Gd => 0,
            _ => 2,
        }
    }

    /// True when iteration `k` uses `𝒢 = mean(φ)` without sampling a component.
    pub fn uses_full_mean(&self) -> bool {
        matches!(self.scheme, Scheme::Gd)
    }

    /// Epoch-start refreshes that read the current iterate `x_k`. Returns the effect and
    /// whether `k` is an epoch boundary `Sᵢ`.
    pub fn begin_iteration(
        &mut self,
        k: usize,
        x_k: &Vector,
        problem: &FiniteSumProblem,
        table: &mut ProxyTable,
    ) -> (ProxyEffect, bool) {
        match &self.scheme {
            Scheme::Gd => {
                if k == 0 {
                    return (ProxyEffect::default(), true);
                }
                let rows = (0..self.n).map(|i| (i, problem.eval(i, x_k)));
                table.set_rows(rows);
                (
                    ProxyEffect {
                        op_evals: self.n,
                        bulk_refresh: true,
                    },
                    true,
                )
            }
            Scheme::Svrg { epochs } => {
                if k != self.next_epoch_start {
                    return (ProxyEffect::default(), false);
                }
                let length = epochs.length(self.epoch);
                self.next_epoch_start = k.saturating_add(length);
                self.epoch += 1;
                if k == 0 {
                    return (ProxyEffect::default(), true);
                }
                table.set_rows((0..self.n).map(|i| (i, problem.eval(i, x_k))));
                (
                    ProxyEffect {
                        op_evals: self.n,
                        bulk_refresh: true,
                    },
                    true,
                )
            }
            Scheme::Hsag { m, s } => {
                if !k.is_multiple_of(*m) {
                    return (ProxyEffect::default(), false);
                }
                if k == 0 || s.len() == self.n {
                    return (ProxyEffect::default(), true);
                }
                let in_set = &self.in_set;
                table.set_rows(
                    (0..self.n)
                        .filter(|&i| !in_set[i])
                        .map(|i| (i, problem.eval(i, x_k))),
                );
                (
                    ProxyEffect {
                        op_evals: self.n - s.len(),
                        bulk_refresh: true,
                    },
                    true,
                )
            }
            _ => (ProxyEffect::default(), true),
        }
    }

    /// The refresh probability in effect at iteration `k`.
    pub fn refresh_probability(&self, k: usize) -> f64 {
        let p = match &self.scheme {
            Scheme::SvrgRand { p } | Scheme::SagaSvrgRand { p, .. } => p,
            Scheme::Sagd { q } => return *q,
            _ => return 0.0,
        };
        match p {
            ProbSchedule::Constant { p } => *p,
            ProbSchedule::Periodic { period } => {
                if k.is_multiple_of(*period) {
                    1.0
                } else {
                    0.0
                }
            }
            ProbSchedule::List { values } => values[k.min(values.len() - 1)],
            ProbSchedule::Halving {
                warmup_iters,
                warmup_p,
                start,
                ..
            } => {
                if k < *warmup_iters {
                    *warmup_p
                } else {
                    start * 0.5f64.powi(self.halvings as i32)
                }
            }
        }
    }

    fn forced_refresh(&self, k: usize) -> bool {
        match &self.scheme {
            Scheme::SvrgRand {
                p: ProbSchedule::Halving { max_gap, .. },
            }
            | Scheme::SagaSvrgRand {
                p: ProbSchedule::Halving { max_gap, .. },
                ..
            } => k - self.last_refresh >= *max_gap,
            _ => false,
        }
    }

    fn note_refresh(&mut self, k: usize) {
        if let Scheme::SvrgRand {
            p: ProbSchedule::Halving { warmup_iters, .. },
        }
        | Scheme::SagaSvrgRand {
            p: ProbSchedule::Halving { warmup_iters, .. },
            ..
        } = &self.scheme
        {
            if k >= *warmup_iters {
                self.halvings = self.halvings.saturating_add(1);
            }
        }
        self.last_refresh = k;
    }

    /// Per-iteration rule `φ^{k+1} = 𝒰_k(x_k, φ^k, I_k)`. `b_ik_x` is `B_{I_k}(x_now)` from
    /// [`estimate`]. Draws exactly one uniform `W_k` from `rng` for every scheme.
    #[allow(clippy::too_many_arguments)]
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        k: usize,
        x_now: &Vector,
        problem: &FiniteSumProblem,
        table: &mut ProxyTable,
        i_k: usize,
        b_ik_x: &Vector,
        rng: &mut R,
    ) -> ProxyEffect {
        let w: f64 = rng.random();
        let n = self.n;
        let full_refresh = |table: &mut ProxyTable| {
            table.set_rows((0..n).map(|i| {
                let v = if i == i_k {
                    b_ik_x.clone()
                } else {
                    problem.eval(i, x_now)
                };
                (i, v)
            }));
            ProxyEffect {
                op_evals: n - 1,
                bulk_refresh: true,
            }
        };
        match &self.scheme {
            Scheme::Gd | Scheme::Svrg { .. } | Scheme::Sarah { .. } => ProxyEffect::default(),
            Scheme::Saga => {
                table.set_row(i_k, b_ik_x.clone());
                ProxyEffect::default()
            }
            Scheme::SvrgRand { .. } => {
                if self.forced_refresh(k) || w < self.refresh_probability(k) {
                    self.note_refresh(k);
                    full_refresh(table)
                } else {
                    ProxyEffect::default()
                }
            }
            Scheme::Sagd { q } => {
                if w < *q {
                    full_refresh(table)
                } else {
                    table.set_row(i_k, b_ik_x.clone());
                    ProxyEffect::default()
                }
            }
            Scheme::Hsag { .. } => {
                if self.in_set[i_k] {
                    table.set_row(i_k, b_ik_x.clone());
                }
                ProxyEffect::default()
            }
            Scheme::SagaSvrgRand { .. } => {
                if self.in_set[i_k] {
                    table.set_row(i_k, b_ik_x.clone());
                }
                if self.forced_refresh(k) || w < self.refresh_probability(k) {
                    self.note_refresh(k);
                    let in_set = &self.in_set;
                    let mut evals = 0;
                    table.set_rows((0..n).filter(|&i| !in_set[i]).map(|i| {
                        let v = if i == i_k {
                            b_ik_x.clone()
                        } else {
                            evals += 1;
                            problem.eval(i, x_now)
                        };
                        (i, v)
                    }));
                    ProxyEffect {
                        op_evals: evals,
                        bulk_refresh: true,
                    }
                } else {
                    ProxyEffect::default()
                }
            }
        }
    }
}

/// Builds `φ⁰`: zero rows for SVRG-rand, SAGD and the SVRG-rand half of the hybrid,
/// `Bᵢ(x₀)` everywhere else.
pub fn init_table(scheme: &Scheme, problem: &FiniteSumProblem, x0: &Vector) -> (ProxyTable, usize) {
    let n = problem.n();
    let d = problem.dim();
    match scheme {
        Scheme::SvrgRand { .. } | Scheme::Sagd { .. } => (ProxyTable::zeros(n, d), 0),
        Scheme::SagaSvrgRand { s1, .. } => {
            let member = membership(s1, n);
            let rows = (0..n)
                .map(|i| {
                    if member[i] {
                        problem.eval(i, x0)
                    } else {
                        Vector::zeros(d)
                    }
                })
                .collect();
            (ProxyTable::from_rows(rows), s1.len())
        }
        _ => {
            let rows = (0..n).map(|i| problem.eval(i, x0)).collect();
            (ProxyTable::from_rows(rows), n)
        }
    }
}

/// Caches `Bᵢ(x*)` for the error terms `G` and `H`.
#[derive(Clone, Debug)]
pub struct SolutionCache {
    b_star: Vec<Vector>,
}

impl SolutionCache {
    pub fn new(problem: &FiniteSumProblem) -> Result<Self> {
        let x_star = problem
            .known_solution()
            .ok_or_else(|| Error::Usage("the problem has no known solution".into()))?;
        Ok(Self {
            b_star: (0..problem.n()).map(|i| problem.eval(i, x_star)).collect(),
        })
    }

    pub fn b_star(&self, i: usize) -> &Vector {
        &self.b_star[i]
    }

    /// `(1/n) Σ_{i ∈ set} ‖φᵢ − Bᵢ(x*)‖²`.
    pub fn error_over(&self, table: &ProxyTable, set: &[bool]) -> f64 {
        let n = table.n() as f64;
        let mut total = 0.0;
        for (i, &member) in set.iter().enumerate() {
            if member {
                total += linalg::dist_sq(table.row(i), &self.b_star[i]);
            }
        }
        total / n
    }
}

/// `G(φ)` over the membership mask `s`.
pub fn g_err(table: &ProxyTable, problem: &FiniteSumProblem, s: &[bool]) -> Result<f64> {
    Ok(SolutionCache::new(problem)?.error_over(table, s))
}

/// `H(φ)`: the same sum over the complement of `s`.
pub fn h_err(table: &ProxyTable, problem: &FiniteSumProblem, s: &[bool]) -> Result<f64> {
    let complement: Vec<bool> = s.iter().map(|&m| !m).collect();
    g_err(table, problem, &complement)
}
