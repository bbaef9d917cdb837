"""Smoke test for the bszo_py extension.

Build and install first:  pip install -e crates/python --no-build-isolation
Then run:                 python python/smoke_test.py
"""

import json
import math

import bszo_py as bz


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    z = bz.gaussian_vector(7, 4)
    assert z == bz.gaussian_vector(7, 4)
    assert len(z) == 4

    assert close(bz.shrinkage_factor(2.0, 1.0), 2.0 / 3.0)
    assert bz.quantize(math.pi, "bf16") == (3.140625, False)
    assert bz.quantize(7e38, "bf16")[1]

    post = bz.PosteriorState(2, sigma_p2=1.0, sigma_e2=1.0, alpha=0.3)
    post.kalman_update([1.0, 0.0], 2.0)
    assert close(post.mu[0], 1.0) and close(post.sigma[0][0], 0.5)
    assert post.max_uncertainty_axis() == 1

    mu, sigma = bz.batch_posterior([[1.0, 0.0]], [2.0], 1.0, [1.0])
    assert close(mu[0], post.mu[0]) and close(sigma[1][1], 1.0)

    v, value, degenerate = bz.principal_eigenvector([[2.0, 1.0], [1.0, 2.0]])
    assert close(v[0], 1 / math.sqrt(2), 1e-8) and close(value, 3.0, 1e-8) and not degenerate

    obj = bz.Objective.quadratic([1.0] * 50, [0.0] * 50).with_precision("bf16").with_jitter(1e-3)
    theta = [1.0] * 50
    start = obj.clean_loss(theta)
    for variant, passes in [("bszo", 3), ("bszo_b", 4), ("mezo", 2)]:
        opt = bz.Optimizer(variant, eta=1e-2, epsilon=1e-2, k=2)
        t = list(theta)
        for step in range(300):
            t, report = opt.step(obj, t, step_seed=step, batch=step)
            assert report["forward_passes"] == passes
        end = obj.clean_loss(t)
        print(f"{variant:7s} loss {start:.3f} -> {end:.3f}  sigma_e2 {opt.sigma_e2:.3e}")
        assert end < start

    summary = json.loads(
        bz.run_experiment(
            """
            max_steps = 20
            [objective]
            dim = 10
            [optimizer]
            variants = ["bszo", "mezo"]
            eta = [1e-2]
            """
        )
    )
    assert len(summary["runs"]) == 2

    try:
        bz.PosteriorState(0)
    except ValueError:
        pass
    else:
        raise AssertionError("k = 0 must be rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
