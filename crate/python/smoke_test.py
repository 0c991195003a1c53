"""Smoke test for the `teugel` extension module.

Build and install with `pip install --no-build-isolation crates/python`, then
run `python python/smoke_test.py` from the repository root.
"""

import math
import tempfile

import teugel


def main():
    model = teugel.LevyModel.reference()
    coeffs = model.teugel_coeffs(3)
    assert abs(coeffs[0][0] - math.sqrt(0.5)) < 1e-12, coeffs
    assert abs(coeffs[2][2] - math.sqrt(2.0)) < 1e-12, coeffs
    assert model.mu_moment(1) == 0.0

    try:
        teugel.LevyModel(0.0, 1.0, [(1.0, -1.0)])
    except ValueError as e:
        print("rejected negative intensity:", e)
    else:
        raise AssertionError("negative intensity accepted")

    bundle = teugel.PathBundle.simulate(model, level=2, n_steps=16, n_paths=20000, seed=1)
    assert (bundle.n_paths, bundle.n_steps, bundle.level) == (20000, 16, 2)
    assert len(bundle.dh(0, 0)) == 2
    z = bundle.bracket_max_z()
    assert z < 5.0, z

    sol = teugel.solve_linear_bsde(bundle, 1.0, beta=0.5)
    assert abs(sol["y0"] - math.exp(0.5)) / math.exp(0.5) < 0.05, sol["y0"]

    sol = teugel.solve_linear_bsde(bundle, 0.0, h=[1.0, 0.0])
    assert abs(sol["mean_z"][0][0] - 1.0) < 0.05, sol["mean_z"][0]

    config = """
[basis]
level = 1

[grid]
n_steps = 16

[monte_carlo]
n_paths = 4000

[[problem.bsde.cases]]
name = "flat"
terminal = { constant = [2.0] }
"""
    with tempfile.TemporaryDirectory() as out:
        result = teugel.run_experiment("bsde", config, out=out, seed=3)
        assert result["passed"], result["checks"]
        assert result["files"], result
        try:
            teugel.run_experiment("bsde", config, overrides=["monte_carlo.n_paths=0"], out=out)
        except ValueError as e:
            assert "n_paths must be positive" in str(e)
        else:
            raise AssertionError("n_paths = 0 accepted")

    print(f"bracket max z {z:.2f}; exponential y0 {teugel.solve_linear_bsde(bundle, 1.0, beta=0.5)['y0']:.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
