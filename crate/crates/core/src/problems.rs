//! Problem generators (strongly monotone quadratics, the Boyan-chain policy-evaluation
//! saddle, a constrained two-player game) and the exact-solution oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::operators::{Component, FiniteSumProblem, Resolvent};
use crate::solver::fb_until;

/// A solution together with how it was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub x: Vector,
    /// True when a dense solve was impossible and forward-backward iterations were used.
    pub iterative: bool,
}

const ITERATIVE_TOL: f64 = 1e-12;
const ITERATIVE_CAP: usize = 50_000_000;

/// Dense solve of `(M_A + M̄)x = −(b_A + b̄)` when everything is affine, otherwise
/// forward-backward iterations at `γ = μ/L²` down to a fixed-point residual of 1e-12.
pub fn exact_solution(problem: &FiniteSumProblem) -> Result<ExactSolution> {
    let d = problem.dim();
    if let (Some((m_bar, b_bar)), true) = (problem.affine_mean(), problem.resolvent().is_linear()) {
        let (m_a, b_a) = match problem.resolvent() {
            Resolvent::Zero => (Matrix::zeros(d, d), Vector::zeros(d)),
            Resolvent::L2 { lambda } => (Matrix::identity(d, d) * *lambda, Vector::zeros(d)),
            Resolvent::Affine { m, b } => (m.clone(), b.clone()),
            _ => unreachable!("is_linear covers these cases"),
        };
        let x = linalg::solve(&(m_a + m_bar), &-(b_a + b_bar))?;
        return Ok(ExactSolution {
            x,
            iterative: false,
        });
    }
    let gamma = problem.mu() / (problem.lip() * problem.lip());
    let x = fb_until(
        problem,
        gamma,
        &Vector::zeros(d),
        ITERATIVE_TOL,
        ITERATIVE_CAP,
    )?;
    Ok(ExactSolution { x, iterative: true })
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn declared_constants(mats: &[Matrix]) -> (f64, f64) {
    let d = mats[0].nrows();
    let mut sum = Matrix::zeros(d, d);
    for m in mats {
        sum += m;
    }
    let mean = sum / mats.len() as f64;
    let mu = linalg::min_sym_eigenvalue(&mean);
    let lip = mats.iter().map(linalg::spectral_norm).fold(0.0, f64::max);
    (mu, lip)
}

fn attach_solution(problem: FiniteSumProblem) -> Result<FiniteSumProblem> {
    let sol = exact_solution(&problem)?;
    problem
        .with_known_solution(sol.x)
        .map_err(|e| Error::Generation(format!("solution oracle failed its residual check: {e}")))
}

fn affine_problem(
    resolvent: Resolvent,
    mats: Vec<Matrix>,
    offsets: Vec<Vector>,
) -> Result<FiniteSumProblem> {
    let d = mats[0].nrows();
    let (mu, lip) = declared_constants(&mats);
    if !(mu > 1e-10 * lip.max(1.0)) {
        return Err(Error::Generation(format!(
            "realized strong-monotonicity modulus {mu:e} is not positive"
        )));
    }
    let components = mats
        .into_iter()
        .zip(offsets)
        .map(|(m, b)| Component::Affine { m, b })
        .collect();
    let problem = FiniteSumProblem::new(resolvent, components, d, mu, lip.max(mu))?;
    attach_solution(problem)
}

/// Affine components `Mᵢx + bᵢ` whose mean has spectrum spread log-uniformly over
/// `[1, κ]`, plus zero-mean symmetric perturbations of norm at most 1/2.
pub fn gen_quadratic(n: usize, d: usize, kappa_target: f64, seed: u64) -> Result<FiniteSumProblem> {
    if n == 0 || d == 0 {
        return Err(Error::Usage("n and d must be at least 1".into()));
    }
    if !(kappa_target >= 1.0) || !kappa_target.is_finite() {
        return Err(Error::Usage(format!(
            "kappa must be >= 1, got {kappa_target}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_bar = if kappa_target == 1.0 {
        Matrix::identity(d, d)
    } else {
        let q = gaussian_matrix(&mut rng, d, d).qr().q();
        let spectrum = Vector::from_fn(d, |j, _| {
            if d == 1 {
                1.0
            } else {
                kappa_target.powf(j as f64 / (d - 1) as f64)
            }
        });
        symmetrize(&(&q * Matrix::from_diagonal(&spectrum) * q.transpose()))
    };
    let mut perturb: Vec<Matrix> = (0..n)
        .map(|_| symmetrize(&gaussian_matrix(&mut rng, d, d)))
        .collect();
    let mut center = Matrix::zeros(d, d);
    for e in &perturb {
        center += e;
    }
    center /= n as f64;
    for e in &mut perturb {
        *e -= &center;
    }
    let largest = perturb
        .iter()
        .map(linalg::spectral_norm)
        .fold(0.0, f64::max);
    let scale = if largest > 0.0 { 0.5 / largest } else { 0.0 };
    let mats: Vec<Matrix> = perturb.iter().map(|e| &m_bar + e * scale).collect();
    let offsets: Vec<Vector> = (0..n).map(|_| gaussian_vector(&mut rng, d)).collect();
    affine_problem(Resolvent::Zero, mats, offsets)
}

/// Chain parameters for the policy-evaluation benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoyanChain {
    pub states: usize,
    pub discount: f64,
}

impl Default for BoyanChain {
    fn default() -> Self {
        Self {
            states: 13,
            discount: 1.0,
        }
    }
}

/// One sampled transition turned into `(Aᵢ, bᵢ, Cᵢ)`.
#[derive(Clone, Debug)]
pub struct BoyanSample {
    pub a: Matrix,
    pub b: Vector,
    pub c: Matrix,
}

impl BoyanChain {
    /// Piecewise-linear spline features with anchors spread evenly over the states.
    pub fn features(&self, state: usize, d: usize) -> Vector {
        if d == 1 {
            return Vector::from_element(1, 1.0);
        }
        let span = (self.states - 1) as f64 / (d - 1) as f64;
        Vector::from_fn(d, |j, _| {
            let anchor = span * j as f64;
            (1.0 - (state as f64 - anchor).abs() / span).max(0.0)
        })
    }

    /// Samples `n` transitions along restarted episodes from the top state.
    pub fn samples(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<BoyanSample> {
        let top = self.states - 1;
        let mut s = top;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if s == 0 {
                s = top;
            }
            let (next, reward) = if s >= 2 {
                (if rng.random::<bool>() { s - 1 } else { s - 2 }, -3.0)
            } else {
                (0, -2.0)
            };
            let phi = self.features(s, d);
            let phi_next = if next == 0 {
                Vector::zeros(d)
            } else {
                self.features(next, d)
            };
            out.push(BoyanSample {
                a: &phi * (&phi - phi_next * self.discount).transpose(),
                b: &phi * reward,
                c: &phi * phi.transpose(),
            });
            s = next;
        }
        out
    }
}

/// Stacked saddle operator `Bᵢ(θ, ω) = (λθ − Aᵢᵀω, Aᵢθ + Cᵢω − bᵢ)` of the
/// policy-evaluation objective on the standard 13-state chain.
pub fn gen_boyan_saddle(
    n: usize,
    d: usize,
    lambda_reg: f64,
    seed: u64,
) -> Result<FiniteSumProblem> {
    gen_boyan_saddle_with(BoyanChain::default(), n, d, lambda_reg, seed)
}

pub fn gen_boyan_saddle_with(
    chain: BoyanChain,
    n: usize,
    d: usize,
    lambda_reg: f64,
    seed: u64,
) -> Result<FiniteSumProblem> {
    if n == 0 || d == 0 || chain.states < 2 {
        return Err(Error::Usage(
            "need n, d >= 1 and at least two states".into(),
        ));
    }
    if !(lambda_reg > 0.0) {
        return Err(Error::Usage(format!(
            "lambda must be positive, got {lambda_reg}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = chain.samples(n, d, &mut rng);
    let (mats, offsets): (Vec<Matrix>, Vec<Vector>) = samples
        .iter()
        .map(|s| saddle_block(&s.a, &s.b, &s.c, lambda_reg))
        .unzip();
    affine_problem(Resolvent::Zero, mats, offsets).map_err(|e| match e {
        Error::Generation(msg) => Error::Generation(format!(
            "{msg}; the sampled feature covariance is singular, use a larger n or lambda"
        )),
        other => other,
    })
}

/// `([[λI, −Aᵀ], [A, C]], (0, −b))`.
pub fn saddle_block(a: &Matrix, b: &Vector, c: &Matrix, lambda_reg: f64) -> (Matrix, Vector) {
    let d = a.nrows();
    let mut m = Matrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d))
        .copy_from(&(Matrix::identity(d, d) * lambda_reg));
    m.view_mut((0, d), (d, d)).copy_from(&-a.transpose());
    m.view_mut((d, 0), (d, d)).copy_from(a);
    m.view_mut((d, d), (d, d)).copy_from(c);
    let mut off = Vector::zeros(2 * d);
    off.rows_mut(d, d).copy_from(&-b);
    (m, off)
}

/// Blocks of one player pair: `Mᵢ = [[C₁, A₁], [A₂, C₂]]` and offset `bᵢ`.
#[derive(Clone, Debug)]
pub struct GameBlocks {
    pub c1: Matrix,
    pub c2: Matrix,
    pub a1: Matrix,
    pub a2: Matrix,
    pub b: Vector,
}

impl GameBlocks {
    fn matrix(&self, cross_scale: f64) -> Matrix {
        let d = self.c1.nrows();
        let mut m = Matrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&self.c1);
        m.view_mut((0, d), (d, d))
            .copy_from(&(&self.a1 * cross_scale));
        m.view_mut((d, 0), (d, d))
            .copy_from(&(&self.a2 * cross_scale));
        m.view_mut((d, d), (d, d)).copy_from(&self.c2);
        m
    }
}

/// Game VI over the paired caps `{a₁ⱼ, a₂ⱼ ≥ 0, a₁ⱼ + a₂ⱼ ≤ 1}` from explicit blocks.
pub fn game_from_blocks(blocks: &[GameBlocks]) -> Result<FiniteSumProblem> {
    if blocks.is_empty() {
        return Err(Error::Usage("a game needs at least one component".into()));
    }
    let mats = blocks.iter().map(|b| b.matrix(1.0)).collect();
    let offsets = blocks.iter().map(|b| b.b.clone()).collect();
    affine_problem(Resolvent::SimplexCap, mats, offsets)
}

/// Random strongly monotone game: SPD diagonal blocks, cross blocks halved until the
/// symmetric part of the mean game matrix has `λ_min` at least half the smaller
/// diagonal-block modulus.
pub fn gen_two_player_game(n: usize, d: usize, seed: u64) -> Result<FiniteSumProblem> {
    if n == 0 || d == 0 {
        return Err(Error::Usage("n and d must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spd = |rng: &mut ChaCha8Rng| {
        let g = gaussian_matrix(rng, d, d);
        symmetrize(&(&g * g.transpose() / d as f64 + Matrix::identity(d, d) * 0.5))
    };
    let mut blocks: Vec<GameBlocks> = (0..n)
        .map(|_| {
            let c1 = spd(&mut rng);
            let c2 = spd(&mut rng);
            GameBlocks {
                c1,
                c2,
                a1: gaussian_matrix(&mut rng, d, d),
                a2: gaussian_matrix(&mut rng, d, d),
                b: gaussian_vector(&mut rng, 2 * d),
            }
        })
        .collect();
    let mean_of = |f: &dyn Fn(&GameBlocks) -> Matrix, rows: usize| {
        let mut s = Matrix::zeros(rows, rows);
        for b in &blocks {
            s += f(b);
        }
        s / n as f64
    };
    let target = 0.5
        * linalg::min_sym_eigenvalue(&mean_of(&|b| b.c1.clone(), d))
            .min(linalg::min_sym_eigenvalue(&mean_of(&|b| b.c2.clone(), d)));
    let mut scale = 1.0;
    while linalg::min_sym_eigenvalue(&mean_of(&|b| b.matrix(scale), 2 * d)) < target {
        scale *= 0.5;
        if scale < 1e-12 {
            return Err(Error::Generation(
                "could not make the game strongly monotone".into(),
            ));
        }
    }
    for b in &mut blocks {
        b.a1 *= scale;
        b.a2 *= scale;
    }
    game_from_blocks(&blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isotropic_quadratic() {
        let p = gen_quadratic(1, 3, 1.0, 4).unwrap();
        let (m, b) = p.affine_mean().unwrap();
        assert_eq!(m, Matrix::identity(3, 3));
        assert_eq!(p.known_solution().unwrap(), &-b);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_quadratic(5, 3, 10.0, 7).unwrap();
        let b = gen_quadratic(5, 3, 10.0, 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = gen_quadratic(5, 3, 10.0, 8).unwrap();
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn shifted_identity_solution() {
        let c = Vector::from_column_slice(&[1.0, -2.0, 0.5]);
        let p = FiniteSumProblem::new(
            Resolvent::Zero,
            vec![Component::Affine {
                m: Matrix::identity(3, 3),
                b: -&c,
            }],
            3,
            1.0,
            1.0,
        )
        .unwrap();
        let sol = exact_solution(&p).unwrap();
        assert!(!sol.iterative);
        assert_eq!(sol.x, c);
    }

    #[test]
    fn spline_features_interpolate() {
        let chain = BoyanChain::default();
        assert_eq!(
            chain.features(12, 4),
            Vector::from_column_slice(&[0.0, 0.0, 0.0, 1.0])
        );
        assert_eq!(
            chain.features(0, 4),
            Vector::from_column_slice(&[1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(
            chain.features(6, 4),
            Vector::from_column_slice(&[0.0, 0.5, 0.5, 0.0])
        );
        for s in 0..13 {
            assert!((chain.features(s, 4).sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_saddle_is_a_generation_error() {
        let r = gen_boyan_saddle(1, 4, 1.0, 0);
        assert!(matches!(r, Err(Error::Generation(_))), "{r:?}");
    }
}
