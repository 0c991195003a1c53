//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p teugel-core --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use teugel_core::blq_hamilton::{
    comparison_check, gradient_check, solve_hamilton, validate_blq, BlqSpec, BlqSystem,
    HamiltonSolution, PicardParams,
};
use teugel_core::bsde_solver::{
    BsdeSolver, ControlField, FnDriver, Point, Shape, SolverConfig, TerminalSpec, TerminalValues,
    ZeroDriver,
};
use teugel_core::maximum_principle::{duality_check, expansion_check, random_direction};
use teugel_core::path_engine::terminal_products;
use teugel_core::scenarios;
use teugel_core::{
    simulate_paths, LevyModel, PathBundle, RegressionBasis, RngSpec, SimulationOptions, TimeGrid,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn reference_bundle(level: usize, steps: usize, paths: usize, seed: u64) -> PathBundle {
    let model = LevyModel::reference();
    let coeffs = model.teugel_coeffs(level).expect("reference basis");
    simulate_paths(
        &model,
        &coeffs,
        TimeGrid::new(1.0, steps).expect("grid"),
        paths,
        RngSpec::new(seed),
        &SimulationOptions::default(),
    )
    .expect("simulation")
}

fn solver(bundle: &PathBundle) -> BsdeSolver<'_> {
    BsdeSolver::new(bundle, &RegressionBasis::default(), SolverConfig::default())
        .expect("regression")
}

fn criterion_1() -> Outcome {
    let model = LevyModel::reference();
    let coeffs = model.teugel_coeffs(3).expect("K = 3");
    let residual = coeffs.orthonormality_residual(&model.gram_matrix(3));
    let s = std::f64::consts::SQRT_2;
    let expected =
        DMatrix::from_row_slice(3, 3, &[1.0 / s, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0 / s, 0.0, s]);
    let row_err = (coeffs.matrix() - expected).amax();
    outcome(
        residual < 1e-10 && row_err < 1e-12,
        format!("orthonormality residual {residual:.2e}, max deviation from hand-derived rows {row_err:.2e}"),
    )
}

fn criterion_2() -> Outcome {
    let bundle = reference_bundle(3, 64, 200_000, 2);
    let products = terminal_products(&bundle);
    let z = products.max_z_score(1.0);
    outcome(
        z < 4.0,
        format!("max |E[H^i(T)H^j(T)] - delta_ij| / SE = {z:.2} over 9 entries"),
    )
}

fn criterion_3(bundle: &PathBundle) -> Outcome {
    let solver = solver(bundle);
    let shape = Shape {
        n: 1,
        d: 1,
        k: 2,
        m: 1,
    };
    let constant = solver
        .solve(
            &ZeroDriver(shape),
            &TerminalSpec::constant(vec![5.0]).evaluate(bundle),
            None,
        )
        .expect("constant case");
    let mut err_a: f64 = 0.0;
    for s in 0..=bundle.n_steps() {
        for p in 0..bundle.n_paths() {
            err_a = err_a.max((constant.y(s, p)[0] - 5.0).abs());
        }
    }
    for s in 0..bundle.n_steps() {
        for p in 0..bundle.n_paths() {
            err_a = err_a.max(constant.q(s, p)[0].abs());
            err_a = constant.z(s, p).iter().fold(err_a, |a, v| a.max(v.abs()));
        }
    }

    let exp_driver = FnDriver::new(shape, |_, p: &Point<'_>, out: &mut [f64]| {
        out[0] = 0.5 * p.y[0]
    });
    let exponential = solver
        .solve(
            &exp_driver,
            &TerminalSpec::constant(vec![1.0]).evaluate(bundle),
            None,
        )
        .expect("exponential case");
    let err_b = (exponential.y0()[0] - 0.5f64.exp()).abs() / 0.5f64.exp();

    let xi = TerminalSpec::affine(vec![1.0], vec![], vec![vec![1.0], vec![0.0]], vec![]);
    let rep = solver
        .solve(&ZeroDriver(shape), &xi.evaluate(bundle), None)
        .expect("representation case");
    let (mut z1, mut z2, mut q): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for s in 0..bundle.n_steps() {
        let mz = rep.mean_z(s);
        z1 = z1.max((mz[0] - 1.0).abs());
        z2 = z2.max(mz[1].abs());
        q = q.max(rep.mean_q(s)[0].abs());
    }
    outcome(
        err_a < 1e-12 && err_b < 0.02 && z1 < 0.05 && q < 0.05,
        format!(
            "(a) max error {err_a:.1e}; (b) relative error {err_b:.2e}; (c) sup|z1 - 1| {z1:.3}, sup|q| {q:.3} (sup|z2| {z2:.3})"
        ),
    )
}

fn scalar_spec() -> BlqSpec {
    BlqSpec::scalar_benchmark(
        1,
        TerminalSpec::affine(vec![1.0], vec![], vec![vec![1.0]], vec![]),
    )
}

struct BlqRun {
    sys: BlqSystem,
    xi: TerminalValues,
    sol: HamiltonSolution,
}

fn blq_run(bundle: &PathBundle) -> BlqRun {
    let solver = solver(bundle);
    let sys = validate_blq(&scalar_spec(), bundle.grid()).expect("valid spec");
    let xi = sys.spec().terminal.evaluate(bundle);
    let sol =
        solve_hamilton(&sys, &solver, &xi, &PicardParams::default()).expect("Hamilton system");
    BlqRun { sys, xi, sol }
}

fn criterion_4(run: &BlqRun) -> Outcome {
    let sol = &run.sol;
    let u_mean = mean(sol.u.as_slice());
    let y0 = sol.state.y0()[0];
    let cost = sol.cost.value;
    let iterations = sol.iterations();
    let residual = *sol.residuals.last().expect("at least one iteration");
    outcome(
        residual < 1e-6
            && iterations <= 50
            && (u_mean + 0.5).abs() < 0.02
            && (cost - 0.5).abs() < 0.02
            && (y0 - 0.5).abs() < 0.02,
        format!("{iterations} iterations, residual {residual:.1e}, u* {u_mean:.4}, J* {cost:.4}, y(0) {y0:.4}"),
    )
}

fn criterion_5(bundle: &PathBundle, run: &BlqRun) -> Outcome {
    let solver = solver(bundle);
    let dt = bundle.grid().dt();
    let directions: Vec<ControlField> = (0..5)
        .map(|i| random_direction(solver.regressor(), 1, dt, 1.0, 600 + i))
        .collect();
    let non_optimal = ControlField::constant(&[0.2], bundle.n_paths(), bundle.n_steps()).combine(
        1.0,
        &random_direction(solver.regressor(), 1, dt, 0.3, 500),
        1.0,
    );
    let away = gradient_check(&run.sys, &solver, &run.xi, &non_optimal, &directions, 1e-3)
        .expect("gradient");
    let at = gradient_check(&run.sys, &solver, &run.xi, &run.sol.u, &directions, 1e-3)
        .expect("gradient");
    let rel = away.worst_relative_error().max(at.worst_relative_error());
    let z = at.worst_pairing_z();
    outcome(
        rel < 1e-2 && z < 5.0,
        format!("max relative FD error {rel:.2e}; at u*, max |pairing| / SE {z:.2e}"),
    )
}

fn criterion_6(bundle: &PathBundle, run: &BlqRun) -> Outcome {
    let solver = solver(bundle);
    let dt = bundle.grid().dt();
    let directions: Vec<ControlField> = (0..20)
        .map(|i| random_direction(solver.regressor(), 1, dt, 0.5, 700 + i))
        .collect();
    let check = comparison_check(&run.sys, &solver, &run.sol, &directions, &[0.1, 0.2])
        .expect("comparison");
    let (margin, curv) = (check.min_margin(), check.min_curvature());
    outcome(
        margin >= 0.0 && curv > 0.0,
        format!("min (J(u*+ev) - J(u*) + 3 SE) / SE = {margin:.2}; min fitted curvature {curv:.4}"),
    )
}

fn criterion_10(run: &BlqRun) -> Outcome {
    let s = run.sol.stationarity;
    outcome(s < 1e-5, format!("sup |2Nu* - D*k| / (1 + |k|) = {s:.2e}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Second-order coefficient of the least-squares parabola through `(x, y)`.
fn criterion_7() -> Outcome {
    let bundle = reference_bundle(1, 64, 20_000, 7);
    let solver = solver(&bundle);
    let problem = scenarios::expansion_problem(1);
    let (ubar, u) = scenarios::expansion_controls(solver.regressor(), bundle.grid().dt());
    let report = expansion_check(&problem, &solver, &ubar, &u, &[0.4, 0.2, 0.1, 0.05])
        .expect("expansion check");
    let r_ratio: Vec<String> = report
        .remainder
        .iter()
        .zip(&report.epsilons)
        .map(|(r, e)| format!("{:.3e}", r / (e * e)))
        .collect();
    let c_ratio: Vec<String> = report
        .cost_residual
        .iter()
        .zip(&report.epsilons)
        .map(|(r, e)| format!("{:.3e}", r / e))
        .collect();
    outcome(
        report.passed(),
        format!(
            "slope of D {:.3}; R/e^2 [{}]; cost residual/e [{}]",
            report.slope_deviation,
            r_ratio.join(", "),
            c_ratio.join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let fine = reference_bundle(1, 64, 20_000, 8);
    let coarse = fine.coarsen(2).expect("coarsen");
    let problem = scenarios::duality_problem(1);
    let residual = |bundle: &PathBundle| {
        let solver = solver(bundle);
        let (u, v) = scenarios::duality_controls(solver.regressor(), bundle.grid().dt());
        duality_check(&problem, &solver, &u, &v)
            .expect("duality")
            .residual()
    };
    let r32 = residual(&coarse);
    let r64 = residual(&fine);
    let ratio = r32 / r64;
    outcome(
        ratio >= 1.7,
        format!("residual {r32:.3e} at 32 steps, {r64:.3e} at 64 steps, ratio {ratio:.3}"),
    )
}

fn criterion_9(bundle: &PathBundle) -> Outcome {
    let solver = solver(bundle);
    let sys = validate_blq(&scalar_spec(), bundle.grid()).expect("valid spec");
    let xi = sys.spec().terminal.evaluate(bundle);
    let params = PicardParams::default();
    let one = solve_hamilton(&sys, &solver, &xi, &params).expect("base solve");
    let scaled = PicardParams {
        tol: 2.0 * params.tol,
        ..params
    };
    let two = solve_hamilton(&sys, &solver, &xi.scaled(2.0), &scaled).expect("scaled solve");
    let h = one.homogeneity(&two, 2.0);
    outcome(
        h.worst() < 1e-8,
        format!(
            "max relative error: (y,q,z,k,u) {:.1e}, J {:.1e}, norms {:.1e}",
            h.processes, h.cost, h.norms
        ),
    )
}

fn timed(id: usize, f: impl FnOnce() -> Outcome) -> (usize, Outcome, f64) {
    let start = Instant::now();
    let o = f();
    (id, o, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let mut results = vec![timed(1, criterion_1), timed(2, criterion_2)];
    let bsde_bundle = reference_bundle(2, 64, 100_000, 3);
    results.push(timed(3, || criterion_3(&bsde_bundle)));
    drop(bsde_bundle);

    let blq_bundle = reference_bundle(1, 64, 100_000, 4);
    let start = Instant::now();
    let run = blq_run(&blq_bundle);
    let setup = start.elapsed().as_secs_f64();
    let (id, c4, secs) = timed(4, || criterion_4(&run));
    results.push((id, c4, secs + setup));
    results.push(timed(5, || criterion_5(&blq_bundle, &run)));
    results.push(timed(6, || criterion_6(&blq_bundle, &run)));
    results.push(timed(10, || criterion_10(&run)));
    drop(run);
    results.push(timed(7, criterion_7));
    results.push(timed(8, criterion_8));
    results.push(timed(9, || criterion_9(&blq_bundle)));
    results.sort_by_key(|r| r.0);

    let mut all = true;
    for (id, o, secs) in &results {
        all &= o.passed;
        println!(
            "criterion {id:>2}: {} ({secs:.1} s) {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
