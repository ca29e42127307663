import numpy as np
import pytest

from anomaly_ident import lbfgs


def _quadratic(rng, n):
    a = rng.normal(size=(n, n))
    hess = a @ a.T + n * np.eye(n)
    xstar = rng.normal(size=n)

    def fun(x):
        d = x - xstar
        return 0.5 * d @ hess @ d, hess @ d

    return fun, xstar


@pytest.mark.parametrize("seed", range(10))
def test_quadratic_converges_within_dimension_iterations(seed):
    rng = np.random.default_rng(seed)
    n = 6
    fun, xstar = _quadratic(rng, n)
    res = lbfgs.minimize(fun, np.zeros(n), memory=n, max_iters=n, grad_tol=1e-12, c2=1e-4)
    assert np.max(np.abs(res.x - xstar)) < 1e-8
    assert res.iterations <= n


def test_rosenbrock_history_non_increasing():
    def rosen(x):
        f = np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2)
        g = np.zeros_like(x)
        g[:-1] = -400 * x[:-1] * (x[1:] - x[:-1] ** 2) - 2 * (1 - x[:-1])
        g[1:] += 200 * (x[1:] - x[:-1] ** 2)
        return f, g

    res = lbfgs.minimize(rosen, np.array([-1.2, 1.0]), max_iters=200, grad_tol=1e-8)
    assert res.converged
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_already_optimal_start():
    res = lbfgs.minimize(lambda x: (float(x @ x), 2 * x), np.zeros(3))
    assert res.converged and res.iterations == 0


def test_line_search_failure_keeps_best_point():
    # gradient points the wrong way: no step along -g can decrease f
    def bad(x):
        return float(x @ x), -2 * x

    res = lbfgs.minimize(bad, np.ones(2), max_iters=5)
    assert res.line_search_failed and not res.converged
    assert res.f <= 2.0


def test_strong_wolfe_conditions_hold():
    rng = np.random.default_rng(0)
    fun, _ = _quadratic(rng, 4)
    x = rng.normal(size=4)
    f0, g0 = fun(x)
    d = -g0
    alpha, f, g, ok = lbfgs.strong_wolfe(fun, x, f0, g0, d, 1.0, 1e-4, 0.9)
    assert ok
    assert f <= f0 + 1e-4 * alpha * (g0 @ d)
    assert abs(g @ d) <= 0.9 * abs(g0 @ d)
