use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrsplit::linalg::{min_sym_eigenvalue, spectral_norm};
use vrsplit::operators::project_simplex_cap;
use vrsplit::problems::gen_quadratic;
use vrsplit::{Component, Error, FiniteSumProblem, Resolvent};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn affine(m: DMatrix<f64>, b: DVector<f64>) -> Component {
    Component::Affine { m, b }
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose()
}

fn catalog(rng: &mut ChaCha8Rng, d: usize) -> Vec<Resolvent> {
    vec![
        Resolvent::Zero,
        Resolvent::L2 { lambda: 0.7 },
        Resolvent::Box {
            lo: DVector::from_element(d, -0.5),
            hi: DVector::from_element(d, 1.5),
        },
        Resolvent::SimplexCap,
        Resolvent::Affine {
            m: random_psd(rng, d),
            b: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
        },
    ]
}

#[test]
fn catalog_resolvents_are_nonexpansive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 4;
    for r in catalog(&mut rng, d) {
        for _ in 0..1000 {
            let gamma = rng.random_range(0.01..10.0);
            let y1 = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let y2 = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let lhs = (r.resolve(gamma, &y1).unwrap() - r.resolve(gamma, &y2).unwrap()).norm();
            let rhs = (&y1 - &y2).norm();
            assert!(lhs <= rhs * (1.0 + 1e-12), "{r:?}: {lhs} > {rhs}");
        }
    }
}

#[test]
fn resolvent_examples() {
    assert_eq!(
        Resolvent::Zero.resolve(3.0, &v(&[4.0, 2.0])).unwrap(),
        v(&[4.0, 2.0])
    );
    assert_eq!(
        Resolvent::L2 { lambda: 1.0 }
            .resolve(1.0, &v(&[2.0, -2.0]))
            .unwrap(),
        v(&[1.0, -1.0])
    );
    let boxed = Resolvent::Box {
        lo: v(&[0.0, 0.0]),
        hi: v(&[1.0, 1.0]),
    };
    assert_eq!(
        boxed.resolve(0.5, &v(&[1.7, -0.3])).unwrap(),
        v(&[1.0, 0.0])
    );
    assert!(matches!(
        Resolvent::Zero.resolve(0.0, &v(&[1.0])),
        Err(Error::Usage(_))
    ));
}

#[test]
fn affine_resolvent_solves_its_inclusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_psd(&mut rng, 3);
    let b = v(&[0.3, -1.0, 2.0]);
    let r = Resolvent::Affine {
        m: m.clone(),
        b: b.clone(),
    };
    let y = v(&[1.0, 2.0, 3.0]);
    let x = r.resolve(0.4, &y).unwrap();
    let back = &x + (&m * &x + &b) * 0.4;
    assert!((back - y).norm() < 1e-12);
}

#[test]
fn simplex_cap_projection_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = 400;
    for _ in 0..200 {
        let (u, v) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (pu, pv) = project_simplex_cap(u, v);
        assert!(pu >= 0.0 && pv >= 0.0 && pu + pv <= 1.0 + 1e-15);
        let best = (0..=grid)
            .flat_map(|i| {
                (0..=grid - i).map(move |j| (i as f64 / grid as f64, j as f64 / grid as f64))
            })
            .map(|(a, b)| (a - u).powi(2) + (b - v).powi(2))
            .fold(f64::INFINITY, f64::min);
        let got = (pu - u).powi(2) + (pv - v).powi(2);
        assert!(got <= best + 1e-12);
    }
}

#[test]
fn apply_component_examples() {
    let p = FiniteSumProblem::new(
        Resolvent::Zero,
        vec![
            affine(DMatrix::identity(2, 2), v(&[0.0, 0.0])),
            affine(DMatrix::identity(2, 2) * 2.0, v(&[1.0, 1.0])),
        ],
        2,
        1.0,
        2.0,
    )
    .unwrap();
    assert_eq!(
        p.apply_component(0, &v(&[3.0, -1.0])).unwrap(),
        v(&[3.0, -1.0])
    );
    assert_eq!(
        p.apply_component(1, &v(&[0.0, 0.0])).unwrap(),
        v(&[1.0, 1.0])
    );
    assert!(matches!(
        p.apply_component(2, &v(&[0.0, 0.0])),
        Err(Error::Usage(_))
    ));
}

#[test]
fn apply_full_of_two_scalings() {
    let p = FiniteSumProblem::new(
        Resolvent::Zero,
        vec![
            affine(DMatrix::identity(2, 2), DVector::zeros(2)),
            affine(DMatrix::identity(2, 2) * 3.0, DVector::zeros(2)),
        ],
        2,
        1.0,
        3.0,
    )
    .unwrap();
    assert_eq!(p.apply_full(&v(&[1.0, 0.0])), v(&[2.0, 0.0]));
}

#[test]
fn operator_vanishes_at_known_solution() {
    let p = gen_quadratic(6, 3, 10.0, 2).unwrap();
    let x = p.known_solution().unwrap();
    assert!(p.apply_full(x).norm() <= 1e-8);
}

#[test]
fn known_solution_is_checked() {
    let p = FiniteSumProblem::new(
        Resolvent::Zero,
        vec![affine(DMatrix::identity(1, 1), v(&[-2.0]))],
        1,
        1.0,
        1.0,
    )
    .unwrap();
    assert!(p.clone().with_known_solution(v(&[2.0])).is_ok());
    assert!(p.with_known_solution(v(&[2.1])).is_err());
}

#[test]
fn construction_rejects_bad_constants() {
    let comps = vec![affine(DMatrix::identity(1, 1), v(&[0.0]))];
    assert!(FiniteSumProblem::new(Resolvent::Zero, comps.clone(), 1, 0.0, 1.0).is_err());
    assert!(FiniteSumProblem::new(Resolvent::Zero, comps.clone(), 1, 2.0, 1.0).is_err());
    assert!(FiniteSumProblem::new(Resolvent::Zero, comps, 2, 1.0, 1.0).is_err());
}

#[test]
fn estimate_constants_on_scaled_identity() {
    let p = FiniteSumProblem::new(
        Resolvent::Zero,
        vec![affine(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3))],
        3,
        2.0,
        2.0,
    )
    .unwrap();
    let (mu, l) = p.estimate_constants(50, 1.0, 0).unwrap();
    assert!((mu - 2.0).abs() < 1e-10 && (l - 2.0).abs() < 1e-10);
    assert!(p.estimate_constants(1, 1.0, 0).is_err());
}

#[test]
fn estimate_constants_on_diagonal() {
    let m = DMatrix::from_diagonal(&v(&[1.0, 5.0]));
    let p = FiniteSumProblem::new(
        Resolvent::Zero,
        vec![affine(m, DVector::zeros(2))],
        2,
        1.0,
        5.0,
    )
    .unwrap();
    let (mu_small, l_small) = p.estimate_constants(10, 1.0, 4).unwrap();
    assert!((1.0..=5.0).contains(&mu_small) && l_small >= mu_small && l_small <= 5.0 + 1e-12);
    let (mu, l) = p.estimate_constants(20_000, 1.0, 4).unwrap();
    assert!(mu <= mu_small && l >= l_small);
    assert!(mu - 1.0 < 1e-2 && 5.0 - l < 1e-2);
}

#[test]
fn estimate_constants_on_rotation_dominated_map() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, -10.0, 10.0, 1.0]);
    let norm = spectral_norm(&m);
    let mu_true = min_sym_eigenvalue(&m);
    let p = FiniteSumProblem::new(
        Resolvent::Zero,
        vec![affine(m, DVector::zeros(2))],
        2,
        mu_true,
        norm,
    )
    .unwrap();
    let (mu, l) = p.estimate_constants(500, 1.0, 9).unwrap();
    assert!((mu - 1.0).abs() < 1e-10);
    assert!((l - norm).abs() < 1e-10);
}

#[test]
fn json_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 4;
    for r in catalog(&mut rng, d) {
        let comps = (0..3)
            .map(|_| {
                affine(
                    random_psd(&mut rng, d) + DMatrix::identity(d, d),
                    DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let p = FiniteSumProblem::new(r, comps, d, 0.123456789, 9.87654321).unwrap();
        let back = FiniteSumProblem::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), p.to_json().unwrap());
        let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(back.apply_full(&x), p.apply_full(&x));
        assert_eq!(back.resolve(0.3, &x).unwrap(), p.resolve(0.3, &x).unwrap());
    }
}

#[test]
fn callbacks_cannot_be_serialized() {
    let cb = Component::Callback(std::sync::Arc::new(|x: &DVector<f64>| x * 2.0));
    let p = FiniteSumProblem::new(Resolvent::Zero, vec![cb], 2, 2.0, 2.0).unwrap();
    assert!(matches!(p.to_json(), Err(Error::Unsupported(_))));
    assert!(!p.is_affine());
    assert_eq!(p.apply_full(&v(&[1.0, 2.0])), v(&[2.0, 4.0]));
}

fn affine_strategy(n: usize, d: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (
        prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d * d + d), n),
        prop::collection::vec(-5.0..5.0f64, d),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn apply_full_is_the_mean_of_components((raw, x) in affine_strategy(5, 3)) {
        let d = 3;
        let comps: Vec<Component> = raw
            .iter()
            .map(|r| affine(DMatrix::from_row_slice(d, d, &r[..d * d]), DVector::from_column_slice(&r[d * d..])))
            .collect();
        let p = FiniteSumProblem::new(Resolvent::Zero, comps, d, 1.0, 1e6).unwrap();
        let x = DVector::from_column_slice(&x);
        let mut sum = DVector::zeros(d);
        for i in 0..p.n() {
            sum += p.apply_component(i, &x).unwrap();
        }
        let oracle = sum / p.n() as f64;
        let got = p.apply_full(&x);
        prop_assert!((&got - &oracle).norm() <= 1e-14 * (1.0 + oracle.norm()));
    }

    #[test]
    fn affine_components_evaluate_bit_exactly((raw, x) in affine_strategy(1, 3)) {
        let d = 3;
        let m = DMatrix::from_row_slice(d, d, &raw[0][..d * d]);
        let b = DVector::from_column_slice(&raw[0][d * d..]);
        let x = DVector::from_column_slice(&x);
        let c = affine(m.clone(), b.clone());
        prop_assert_eq!(c.eval(&x), &m * &x + &b);
    }

    #[test]
    fn l2_and_box_are_nonexpansive(
        gamma in 1e-3..100.0f64,
        lambda in 0.0..50.0f64,
        y1 in prop::collection::vec(-100.0..100.0f64, 5),
        y2 in prop::collection::vec(-100.0..100.0f64, 5),
    ) {
        let y1 = DVector::from_column_slice(&y1);
        let y2 = DVector::from_column_slice(&y2);
        for r in [
            Resolvent::L2 { lambda },
            Resolvent::Box { lo: DVector::from_element(5, -1.0), hi: DVector::from_element(5, 2.0) },
        ] {
            let lhs = (r.resolve(gamma, &y1).unwrap() - r.resolve(gamma, &y2).unwrap()).norm();
            prop_assert!(lhs <= (&y1 - &y2).norm() * (1.0 + 1e-12));
        }
    }
}
