mod common;

use std::sync::Arc;

use common::paired_contraction;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rayon::prelude::*;
use vrsplit::catalyst::{inner_budget, optimal_sigma, shifted_problem};
use vrsplit::problems::{exact_solution, gen_quadratic};
use vrsplit::{
    run_catalyst, run_fb, CatalystConfig, Component, Error, FiniteSumProblem, InnerStop, Resolvent,
    RunConfig, Scheme, SigmaPolicy,
};

fn with_constants(p: &FiniteSumProblem, mu: f64, lip: f64) -> FiniteSumProblem {
    FiniteSumProblem::new(Resolvent::Zero, p.components().to_vec(), p.dim(), mu, lip).unwrap()
}

#[test]
fn optimal_sigma_examples() {
    let base = gen_quadratic(100, 1, 1.0, 0).unwrap();
    let p = with_constants(&base, 1.0, 100.0);
    let sigma = optimal_sigma(&Scheme::Saga, &p);
    assert!((sigma - ((99.0f64 * 99.0 - 2.0) / 101.0).sqrt()).abs() < 1e-12);
    assert!((sigma - 9.85).abs() < 5e-3);
    let flat = with_constants(&base, 1.0, 1.0);
    assert_eq!(optimal_sigma(&Scheme::Saga, &flat), 0.0);
    let gd = with_constants(&base, 2.0, 100.0);
    assert_eq!(optimal_sigma(&Scheme::Gd, &gd), 98.0);
}

#[test]
fn shifted_problem_has_the_right_solution() {
    let p = gen_quadratic(6, 4, 10.0, 3).unwrap();
    let x_bar = DVector::from_fn(4, |i, _| i as f64 - 1.5);
    let aux = shifted_problem(&p, 1.0, &x_bar).unwrap();
    assert_eq!((aux.mu(), aux.lip()), (p.mu() + 1.0, p.lip() + 1.0));
    assert!(aux.known_solution().is_none());
    let x = exact_solution(&aux).unwrap().x;
    let residual = p.apply_full(&x) + (&x - &x_bar) * 1.0;
    assert!(residual.norm() <= 1e-8);
}

#[test]
fn unshifted_gd_catalyst_is_restarted_fb() {
    let p = gen_quadratic(5, 3, 8.0, 2).unwrap();
    let gamma = p.mu() / (p.lip() * p.lip());
    let x0 = DVector::from_element(3, 1.0);
    let (_, fb) = run_fb(&p, gamma, &x0, 25).unwrap();
    let cfg = RunConfig::default().with_x0(&x0);
    let cat = CatalystConfig {
        sigma: SigmaPolicy::Value(0.0),
        outer_loops: 25,
        inner_stop: InnerStop::Budget(1),
        ..CatalystConfig::default()
    };
    let (_, trace) = run_catalyst(&p, &Scheme::Gd, &cfg, &cat).unwrap();
    assert_eq!(trace.rows.len(), fb.rows.len());
    for (a, b) in fb.rows.iter().zip(&trace.rows) {
        assert_eq!(a.dist_sq, b.dist_sq);
        assert_eq!(a.op_evals, b.op_evals);
    }
}

#[test]
fn catalyst_started_at_the_solution_stays_there() {
    let p = gen_quadratic(6, 3, 20.0, 4).unwrap();
    let x_star = p.known_solution().unwrap().clone();
    let cfg = RunConfig::default().with_x0(&x_star).with_seed(1);
    for stop in [InnerStop::Oracle, InnerStop::BudgetAuto] {
        let cat = CatalystConfig {
            outer_loops: 10,
            inner_stop: stop,
            ..CatalystConfig::default()
        };
        let (x, trace) = run_catalyst(&p, &Scheme::Saga, &cfg, &cat).unwrap();
        assert!((x - &x_star).norm() <= 1e-6);
        assert!(trace.rows.iter().all(|r| r.dist_sq.unwrap() <= 1e-12));
    }
}

#[test]
fn oracle_mode_needs_affine_components() {
    let cb = Component::Callback(Arc::new(|x: &DVector<f64>| x * 2.0));
    let p = FiniteSumProblem::new(Resolvent::Zero, vec![cb], 2, 2.0, 2.0).unwrap();
    let cat = CatalystConfig {
        inner_stop: InnerStop::Oracle,
        ..CatalystConfig::default()
    };
    let res = run_catalyst(&p, &Scheme::Saga, &RunConfig::default(), &cat);
    assert!(matches!(res, Err(Error::Usage(_))));
    let res = run_catalyst(
        &p,
        &Scheme::Sarah { m: 2 },
        &RunConfig::default(),
        &CatalystConfig::default(),
    );
    assert!(matches!(res, Err(Error::Usage(_))));
}

#[test]
fn inner_budget_grows_with_sigma() {
    let p = gen_quadratic(16, 4, 50.0, 0).unwrap();
    let small = inner_budget(&Scheme::Saga, &p, 0.1);
    let large = inner_budget(&Scheme::Saga, &p, 10.0);
    assert!(small >= 1 && large >= 1);
    let rate =
        (1.0 - 1.0 / 32.0f64).max(1.0 - 1.0 / (7.0 * ((p.lip() + 10.0) / (p.mu() + 10.0)).powi(2)));
    let expected = ((4.0 * (1.0 + 10.0 / p.mu()).powi(2)).ln() / -rate.ln()).ceil() as usize;
    assert_eq!(large, expected);
}

#[test]
fn outer_loop_contracts_with_oracle_stop() {
    let p = gen_quadratic(8, 4, 10.0, 6).unwrap();
    let sigma = optimal_sigma(&Scheme::Saga, &p);
    let factor = (1.0 - 1.0 / (2.0 * (1.0 + sigma / p.mu()))).powi(2);
    let loops = 6;
    let runs: Vec<Vec<f64>> = (0..40u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = RunConfig::default()
                .with_seed(seed)
                .with_x0(&DVector::from_element(4, 3.0));
            let cat = CatalystConfig {
                sigma: SigmaPolicy::Value(sigma),
                outer_loops: loops,
                inner_stop: InnerStop::Oracle,
                ..CatalystConfig::default()
            };
            let (_, t) = run_catalyst(&p, &Scheme::Saga, &cfg, &cat).unwrap();
            t.rows.iter().map(|r| r.dist_sq.unwrap()).collect()
        })
        .collect();
    for k in 1..=loops {
        let before: Vec<f64> = runs.iter().map(|r| r[k - 1]).collect();
        let after: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        assert!(
            paired_contraction(&before, &after, factor) >= 0.0,
            "outer {k}"
        );
    }
}

#[test]
fn catalyst_config_serde() {
    let cat: CatalystConfig =
        serde_json::from_str(r#"{"sigma":"auto","inner_stop":"budget:40"}"#).unwrap();
    assert_eq!(cat.sigma, SigmaPolicy::Auto);
    assert_eq!(cat.inner_stop, InnerStop::Budget(40));
    assert_eq!(cat.outer_loops, 50);
    let back: CatalystConfig = serde_json::from_str(&serde_json::to_string(&cat).unwrap()).unwrap();
    assert_eq!(back, cat);
    assert!(serde_json::from_str::<CatalystConfig>(r#"{"sigma":-1}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn shift_adds_sigma_times_displacement(
        seed in 0u64..50,
        sigma in 0.0..20.0f64,
        x in prop::collection::vec(-10.0..10.0f64, 3),
        x_bar in prop::collection::vec(-10.0..10.0f64, 3),
    ) {
        let p = gen_quadratic(4, 3, 5.0, seed).unwrap();
        let x = DVector::from_vec(x);
        let x_bar = DVector::from_vec(x_bar);
        let aux = shifted_problem(&p, sigma, &x_bar).unwrap();
        let expected = p.apply_full(&x) + (&x - &x_bar) * sigma;
        let got = aux.apply_full(&x);
        prop_assert!((&got - &expected).norm() <= 1e-13 * (1.0 + expected.norm()));
        if sigma == 0.0 {
            prop_assert_eq!(got, p.apply_full(&x));
        }
        let shifted_matrix = aux.components()[0].as_affine().unwrap().0.clone();
        let original = p.components()[0].as_affine().unwrap().0.clone();
        prop_assert_eq!(shifted_matrix, original + DMatrix::identity(3, 3) * sigma);
    }
}
