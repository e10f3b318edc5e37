//! Resolvent catalog, Lipschitz components and the finite-sum problem container.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::linalg::{self, Matrix, Vector};

pub type ResolventFn = dyn Fn(f64, &Vector) -> Vector + Send + Sync;
pub type ComponentFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// The set-valued operator `A`, available only through `J_γA = (I + γA)⁻¹`.
#[derive(Clone)]
pub enum Resolvent {
    Zero,
    /// `A(x) = λx`.
    L2 {
        lambda: f64,
    },
    /// Normal cone of the box `[lo, hi]`.
    Box {
        lo: Vector,
        hi: Vector,
    },
    /// Normal cone of `{u, v ≥ 0, u + v ≤ 1}` applied to every pair `(x[j], x[d/2 + j])`.
    SimplexCap,
    /// `A(x) = Mx + b` with `M` positive semidefinite.
    Affine {
        m: Matrix,
        b: Vector,
    },
    Callback(Arc<ResolventFn>),
}

impl fmt::Debug for Resolvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resolvent::Zero => write!(f, "Zero"),
            Resolvent::L2 { lambda } => write!(f, "L2 {{ lambda: {lambda} }}"),
            Resolvent::Box { lo, hi } => write!(f, "Box {{ lo: {lo:?}, hi: {hi:?} }}"),
            Resolvent::SimplexCap => write!(f, "SimplexCap"),
            Resolvent::Affine { m, .. } => write!(f, "Affine {{ {}x{} }}", m.nrows(), m.ncols()),
            Resolvent::Callback(_) => write!(f, "Callback"),
        }
    }
}

impl Resolvent {
    pub fn is_zero(&self) -> bool {
        matches!(self, Resolvent::Zero)
    }

    /// True when `A` is a linear (affine) map so the problem admits a direct solve.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Resolvent::Zero | Resolvent::L2 { .. } | Resolvent::Affine { .. }
        )
    }

    /// Returns `x` with `x + γA(x) ∋ y`.
    pub fn resolve(&self, gamma: f64, y: &Vector) -> Result<Vector> {
        if !(gamma > 0.0) {
            return usage(format!("resolvent step must be positive, got {gamma}"));
        }
        Ok(match self {
            Resolvent::Zero => y.clone(),
            Resolvent::L2 { lambda } => y / (1.0 + gamma * lambda),
            Resolvent::Box { lo, hi } => {
                Vector::from_fn(y.len(), |i, _| y[i].max(lo[i]).min(hi[i]))
            }
            Resolvent::SimplexCap => {
                if !y.len().is_multiple_of(2) {
                    return usage("simplex-cap resolvent needs an even dimension");
                }
                let half = y.len() / 2;
                let mut x = y.clone();
                for j in 0..half {
                    let (u, v) = project_simplex_cap(y[j], y[half + j]);
                    x[j] = u;
                    x[half + j] = v;
                }
                x
            }
            Resolvent::Affine { m, b } => {
                let lhs = Matrix::identity(m.nrows(), m.ncols()) + m * gamma;
                linalg::solve(&lhs, &(y - b * gamma))?
            }
            Resolvent::Callback(f) => {
                let x = f(gamma, y);
                #[cfg(debug_assertions)]
                debug_check_nonexpansive(f.as_ref(), gamma, y);
                x
            }
        })
    }
}

/// Euclidean projection of `(u, v)` onto the triangle `{u, v ≥ 0, u + v ≤ 1}`.
pub fn project_simplex_cap(u: f64, v: f64) -> (f64, f64) {
    if u >= 0.0 && v >= 0.0 && u + v <= 1.0 {
        return (u, v);
    }
    let t = ((u - v + 1.0) / 2.0).clamp(0.0, 1.0);
    let candidates = [
        (0.0, v.clamp(0.0, 1.0)),
        (u.clamp(0.0, 1.0), 0.0),
        (t, 1.0 - t),
    ];
    candidates
        .into_iter()
        .min_by(|a, b| {
            let da = (a.0 - u).powi(2) + (a.1 - v).powi(2);
            let db = (b.0 - u).powi(2) + (b.1 - v).powi(2);
            da.total_cmp(&db)
        })
        .expect("three candidates")
}

#[cfg(debug_assertions)]
fn debug_check_nonexpansive(f: &ResolventFn, gamma: f64, y: &Vector) {
    let mut rng = ChaCha8Rng::seed_from_u64(y.len() as u64);
    let fy = f(gamma, y);
    for _ in 0..4 {
        let z = y + Vector::from_fn(y.len(), |_, _| rng.random_range(-1.0..1.0));
        let fz = f(gamma, &z);
        let lhs = (&fy - &fz).norm();
        let rhs = (y - &z).norm();
        debug_assert!(
            lhs <= rhs * (1.0 + 1e-9) + 1e-12,
            "callback resolvent is expansive: {lhs} > {rhs}"
        );
    }
}

/// One Lipschitz component `Bᵢ`.
#[derive(Clone)]
pub enum Component {
    /// `Bᵢ(x) = Mᵢx + bᵢ`.
    Affine {
        m: Matrix,
        b: Vector,
    },
    Callback(Arc<ComponentFn>),
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Affine { m, .. } => write!(f, "Affine {{ {}x{} }}", m.nrows(), m.ncols()),
            Component::Callback(_) => write!(f, "Callback"),
        }
    }
}

impl Component {
    pub fn eval(&self, x: &Vector) -> Vector {
        match self {
            Component::Affine { m, b } => m * x + b,
            Component::Callback(f) => f(x),
        }
    }

    pub fn as_affine(&self) -> Option<(&Matrix, &Vector)> {
        match self {
            Component::Affine { m, b } => Some((m, b)),
            Component::Callback(_) => None,
        }
    }
}

/// `0 ∈ A(x) + (1/n) Σᵢ Bᵢ(x)` together with its declared constants.
#[derive(Clone, Debug)]
pub struct FiniteSumProblem {
    resolvent: Resolvent,
    components: Vec<Component>,
    dim: usize,
    mu: f64,
    lip: f64,
    known_solution: Option<Vector>,
}

impl FiniteSumProblem {
    pub fn new(
        resolvent: Resolvent,
        components: Vec<Component>,
        dim: usize,
        mu: f64,
        lip: f64,
    ) -> Result<Self> {
        if components.is_empty() {
            return usage("a problem needs at least one component");
        }
        if dim == 0 {
            return usage("dimension must be at least 1");
        }
        if !(mu > 0.0) || !mu.is_finite() {
            return usage(format!("mu must be positive, got {mu}"));
        }
        if !(lip >= mu) || !lip.is_finite() {
            return usage(format!("L must satisfy L >= mu, got L={lip}, mu={mu}"));
        }
        for (i, c) in components.iter().enumerate() {
            if let Some((m, b)) = c.as_affine() {
                if m.nrows() != dim || m.ncols() != dim || b.len() != dim {
                    return usage(format!("component {i} has the wrong shape"));
                }
            }
        }
        match &resolvent {
            Resolvent::Box { lo, hi } if lo.len() != dim || hi.len() != dim => {
                return usage("box bounds have the wrong dimension");
            }
            Resolvent::Affine { m, b }
                if m.nrows() != dim || m.ncols() != dim || b.len() != dim =>
            {
                return usage("affine resolvent has the wrong shape");
            }
            Resolvent::SimplexCap if !dim.is_multiple_of(2) => {
                return usage("simplex-cap constraint needs an even dimension");
            }
            _ => {}
        }
        Ok(Self {
            resolvent,
            components,
            dim,
            mu,
            lip,
            known_solution: None,
        })
    }

    /// Attaches `x*`, rejecting it unless the fixed-point residual at `γ = μ/L²` is tiny.
    pub fn with_known_solution(mut self, x_star: Vector) -> Result<Self> {
        if x_star.len() != self.dim {
            return usage("known solution has the wrong dimension");
        }
        let gamma = self.mu / (self.lip * self.lip);
        let res = self.fixed_point_residual(gamma, &x_star)?;
        let tol = 1e-8 * (1.0 + x_star.norm());
        if !(res <= tol) {
            return usage(format!(
                "known solution fails the fixed-point check: residual {res:e} > {tol:e}"
            ));
        }
        self.known_solution = Some(x_star);
        Ok(self)
    }

    pub fn without_known_solution(mut self) -> Self {
        self.known_solution = None;
        self
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lip(&self) -> f64 {
        self.lip
    }

    pub fn kappa(&self) -> f64 {
        self.lip / self.mu
    }

    pub fn resolvent(&self) -> &Resolvent {
        &self.resolvent
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn known_solution(&self) -> Option<&Vector> {
        self.known_solution.as_ref()
    }

    /// True when every component is affine.
    pub fn is_affine(&self) -> bool {
        self.components.iter().all(|c| c.as_affine().is_some())
    }

    pub fn apply_component(&self, i: usize, x: &Vector) -> Result<Vector> {
        match self.components.get(i) {
            Some(c) => Ok(c.eval(x)),
            None => usage(format!("component index {i} out of range 0..{}", self.n())),
        }
    }

    /// Unchecked variant used inside solver loops where `i` comes from `0..n`.
    #[inline]
    pub(crate) fn eval(&self, i: usize, x: &Vector) -> Vector {
        self.components[i].eval(x)
    }

    /// `B(x) = (1/n) Σᵢ Bᵢ(x)`; costs `n` component evaluations.
    pub fn apply_full(&self, x: &Vector) -> Vector {
        let evals: Vec<Vector> = self.components.iter().map(|c| c.eval(x)).collect();
        linalg::mean_of(&evals, self.dim)
    }

    pub fn resolve(&self, gamma: f64, y: &Vector) -> Result<Vector> {
        self.resolvent.resolve(gamma, y)
    }

    /// `‖x − J_γA(x − γB(x))‖` with the exact `B`.
    pub fn fixed_point_residual(&self, gamma: f64, x: &Vector) -> Result<f64> {
        let y = x - self.apply_full(x) * gamma;
        Ok((x - self.resolve(gamma, &y)?).norm())
    }

    /// Mean of the affine components as `(M̄, b̄)`, or `None` if any component is a callback.
    pub fn affine_mean(&self) -> Option<(Matrix, Vector)> {
        let mut m = Matrix::zeros(self.dim, self.dim);
        let mut b = Vector::zeros(self.dim);
        for c in &self.components {
            let (mi, bi) = c.as_affine()?;
            m += mi;
            b += bi;
        }
        let n = self.n() as f64;
        Some((m / n, b / n))
    }

    /// Sampled lower bound on the monotonicity modulus and upper bound on the
    /// component Lipschitz constant over the cube `[-radius, radius]^d`.
    pub fn estimate_constants(&self, samples: usize, radius: f64, seed: u64) -> Result<(f64, f64)> {
        if samples < 2 {
            return usage("estimate_constants needs at least two samples");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mu_hat = f64::INFINITY;
        let mut l_hat: f64 = 0.0;
        let mut used = 0usize;
        for _ in 0..samples {
            let x = Vector::from_fn(self.dim, |_, _| rng.random_range(-radius..=radius));
            let y = Vector::from_fn(self.dim, |_, _| rng.random_range(-radius..=radius));
            let diff = &x - &y;
            let dn2 = diff.norm_squared();
            if dn2 == 0.0 {
                continue;
            }
            used += 1;
            let bx = self.apply_full(&x);
            let by = self.apply_full(&y);
            mu_hat = mu_hat.min((bx - by).dot(&diff) / dn2);
            for c in &self.components {
                let d = (c.eval(&x) - c.eval(&y)).norm() / dn2.sqrt();
                l_hat = l_hat.max(d);
            }
        }
        if used == 0 {
            return usage("every sampled pair was degenerate");
        }
        Ok((mu_hat, l_hat))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemDoc::try_from(self)?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProblemDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub(crate) fn with_parts(&self, components: Vec<Component>, mu: f64, lip: f64) -> Self {
        Self {
            resolvent: self.resolvent.clone(),
            components,
            dim: self.dim,
            mu,
            lip,
            known_solution: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Matrix> for MatrixDoc {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixDoc> for Matrix {
    type Error = Error;

    fn try_from(doc: MatrixDoc) -> Result<Self> {
        if doc.data.len() != doc.rows * doc.cols {
            return usage(format!(
                "matrix declares {}x{} but holds {} entries",
                doc.rows,
                doc.cols,
                doc.data.len()
            ));
        }
        Ok(Matrix::from_row_slice(doc.rows, doc.cols, &doc.data))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ResolventDoc {
    Zero,
    L2 { lambda: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    SimplexCap,
    Affine { m: MatrixDoc, b: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ComponentDoc {
    Affine { m: MatrixDoc, b: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct ProblemDoc {
    dim: usize,
    n: usize,
    mu: f64,
    lip: f64,
    resolvent: ResolventDoc,
    components: Vec<ComponentDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    known_solution: Option<Vec<f64>>,
}

impl TryFrom<&FiniteSumProblem> for ProblemDoc {
    type Error = Error;

    fn try_from(p: &FiniteSumProblem) -> Result<Self> {
        let resolvent = match &p.resolvent {
            Resolvent::Zero => ResolventDoc::Zero,
            Resolvent::L2 { lambda } => ResolventDoc::L2 { lambda: *lambda },
            Resolvent::Box { lo, hi } => ResolventDoc::Box {
                lo: lo.iter().copied().collect(),
                hi: hi.iter().copied().collect(),
            },
            Resolvent::SimplexCap => ResolventDoc::SimplexCap,
            Resolvent::Affine { m, b } => ResolventDoc::Affine {
                m: m.into(),
                b: b.iter().copied().collect(),
            },
            Resolvent::Callback(_) => {
                return Err(Error::Unsupported(
                    "callback resolvents cannot be serialized".into(),
                ))
            }
        };
        let components = p
            .components
            .iter()
            .map(|c| match c {
                Component::Affine { m, b } => Ok(ComponentDoc::Affine {
                    m: m.into(),
                    b: b.iter().copied().collect(),
                }),
                Component::Callback(_) => Err(Error::Unsupported(
                    "callback components cannot be serialized".into(),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProblemDoc {
            dim: p.dim,
            n: p.n(),
            mu: p.mu,
            lip: p.lip,
            resolvent,
            components,
            known_solution: p
                .known_solution
                .as_ref()
                .map(|x| x.iter().copied().collect()),
        })
    }
}

impl TryFrom<ProblemDoc> for FiniteSumProblem {
    type Error = Error;

    fn try_from(doc: ProblemDoc) -> Result<Self> {
        if doc.components.len() != doc.n {
            return usage(format!(
                "fixture declares n={} but lists {} components",
                doc.n,
                doc.components.len()
            ));
        }
        let resolvent = match doc.resolvent {
            ResolventDoc::Zero => Resolvent::Zero,
            ResolventDoc::L2 { lambda } => Resolvent::L2 { lambda },
            ResolventDoc::Box { lo, hi } => Resolvent::Box {
                lo: Vector::from_vec(lo),
                hi: Vector::from_vec(hi),
            },
            ResolventDoc::SimplexCap => Resolvent::SimplexCap,
            ResolventDoc::Affine { m, b } => Resolvent::Affine {
                m: m.try_into()?,
                b: Vector::from_vec(b),
            },
        };
        let components = doc
            .components
            .into_iter()
            .map(|c| match c {
                ComponentDoc::Affine { m, b } => Ok(Component::Affine {
                    m: m.try_into()?,
                    b: Vector::from_vec(b),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let problem = FiniteSumProblem::new(resolvent, components, doc.dim, doc.mu, doc.lip)?;
        match doc.known_solution {
            Some(x) => problem.with_known_solution(Vector::from_vec(x)),
            None => Ok(problem),
        }
    }
}
