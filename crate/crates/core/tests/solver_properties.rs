use teugel_core::bsde_solver::{
    truncation_residual, BsdeSolver, FnDriver, Shape, SolverConfig, TerminalSpec, ZeroDriver,
};
use teugel_core::{
    simulate_paths, Estimate, LevyModel, PathBundle, RegressionBasis, RngSpec, SimulationOptions,
    TimeGrid,
};

fn bundle(level: usize, steps: usize, paths: usize, seed: u64) -> PathBundle {
    let model = LevyModel::reference();
    let coeffs = model.teugel_coeffs(level).unwrap();
    simulate_paths(
        &model,
        &coeffs,
        TimeGrid::new(1.0, steps).unwrap(),
        paths,
        RngSpec::new(seed),
        &SimulationOptions::default(),
    )
    .unwrap()
}

fn solver(b: &PathBundle) -> BsdeSolver<'_> {
    BsdeSolver::new(b, &RegressionBasis::default(), SolverConfig::default()).unwrap()
}

#[test]
fn brownian_and_teugel_increments_are_uncorrelated() {
    let b = bundle(2, 16, 20_000, 31);
    let dt = b.grid().dt();
    for i in 0..b.brownian_dim() {
        for j in 0..b.level() {
            let samples: Vec<f64> = (0..b.n_paths())
                .flat_map(|p| (0..b.n_steps()).map(move |s| (p, s)))
                .map(|(p, s)| b.dw(p, s)[i] * b.dh(p, s)[j] / dt)
                .collect();
            let z = Estimate::from_samples(&samples).z_score(0.0);
            assert!(z.abs() < 4.0, "dW^{i} vs dH^{j}: z = {z}");
        }
    }
}

#[test]
fn exponential_driver_error_shrinks_under_refinement() {
    let oracle = 0.5f64.exp();
    let shape = Shape {
        n: 1,
        d: 1,
        k: 1,
        m: 0,
    };
    let driver = FnDriver::new(shape, |_, p, out: &mut [f64]| out[0] = 0.5 * p.y[0]);
    let fine = bundle(1, 64, 100_000, 41);
    let errors: Vec<f64> = [8, 4, 2, 1]
        .into_iter()
        .map(|factor| {
            let b = if factor == 1 {
                fine.clone()
            } else {
                fine.coarsen(factor).unwrap()
            };
            let xi = TerminalSpec::constant(vec![1.0]).evaluate(&b);
            let sol = solver(&b).solve(&driver, &xi, None).unwrap();
            (sol.y0()[0] - oracle).abs()
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(errors[3] / oracle < 0.02);
}

#[test]
fn orthonormal_extraction_recovers_unit_integrands() {
    let b = bundle(2, 16, 50_000, 43);
    let s = solver(&b);
    let shape = Shape {
        n: 1,
        d: 1,
        k: 2,
        m: 0,
    };
    for j in 0..2 {
        let xi = TerminalSpec::new(1, move |st, out| out[0] = st.h[j]).evaluate(&b);
        let sol = s.solve(&ZeroDriver(shape), &xi, None).unwrap();
        for i in 0..2 {
            let target = if i == j { 1.0 } else { 0.0 };
            let worst = (0..b.n_steps())
                .map(|n| {
                    let m =
                        (0..b.n_paths()).map(|p| sol.z(n, p)[i]).sum::<f64>() / b.n_paths() as f64;
                    (m - target).abs()
                })
                .fold(0.0, f64::max);
            assert!(
                worst < 0.05,
                "xi = H^{}: sup |z^{} - {target}| = {worst}",
                j + 1,
                i + 1
            );
        }
    }
}

#[test]
fn truncation_residual_drops_when_level_increases() {
    // xi = H^1(T)^2 needs H^2 to represent its jump part. What K = 2 still
    // leaves is the O(dt) Brownian remainder plus regression noise.
    let fraction = |level: usize| {
        let b = bundle(level, 16, 20_000, 47);
        let xi = TerminalSpec::new(1, |st, out| out[0] = st.h[0] * st.h[0]).evaluate(&b);
        let sol = solver(&b)
            .solve(
                &ZeroDriver(Shape {
                    n: 1,
                    d: 1,
                    k: level,
                    m: 0,
                }),
                &xi,
                None,
            )
            .unwrap();
        truncation_residual(&sol, &b).unwrap().fraction()
    };
    let (one, two) = (fraction(1), fraction(2));
    assert!(one > 2.0 * two, "K = 1 leaves {one}, K = 2 leaves {two}");
    assert!(two < 0.1, "K = 2 leaves {two}");
}

#[test]
fn truncation_residual_rejects_foreign_bundle() {
    let b = bundle(1, 8, 500, 1);
    let other = bundle(1, 8, 400, 1);
    let xi = TerminalSpec::constant(vec![1.0]).evaluate(&b);
    let sol = solver(&b)
        .solve(
            &ZeroDriver(Shape {
                n: 1,
                d: 1,
                k: 1,
                m: 0,
            }),
            &xi,
            None,
        )
        .unwrap();
    assert!(truncation_residual(&sol, &other).is_err());
    assert_eq!(truncation_residual(&sol, &b).unwrap().fraction(), 0.0);
}
