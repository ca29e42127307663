"""Limited-memory BFGS with a strong-Wolfe line search.

The line search follows the bracketing/zoom scheme of Nocedal & Wright
(Algorithms 3.5 and 3.6) with safeguarded cubic interpolation.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    line_search_failed: bool
    history: list = field(default_factory=list)  # objective after every accepted step


def _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - g_lo * g_hi
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), a_hi - a_lo)
    denom = g_hi - g_lo + 2.0 * d2
    if denom == 0:
        return None
    return a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / denom


def _interpolate(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
    margin = 0.05 * (hi - lo)
    if a is None or not math.isfinite(a) or a < lo + margin or a > hi - margin:
        a = 0.5 * (lo + hi)
    return a


def strong_wolfe(fun: Objective, x, f0, g0, d, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=40, alpha_max=1e10):
    """Search along ``d`` for a step satisfying the strong Wolfe conditions.

    Returns ``(alpha, f, g, ok)``.  When no such step is found within
    ``max_evals`` evaluations, ``ok`` is False and the lowest point seen is
    returned instead, or None if nothing improved on ``f0``.
    """
    dphi0 = float(g0 @ d)
    evals = 0
    best = [None]

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fun(x + a * d)
        if math.isfinite(f) and f < f0 and (best[0] is None or f < best[0][1]):
            best[0] = (a, f, g, False)
        return f, g, float(g @ d)

    def fallback():
        return best[0]

    def zoom(a_lo, f_lo, dp_lo, a_hi, f_hi, dp_hi):
        while evals < max_evals:
            a = _interpolate(a_lo, f_lo, dp_lo, a_hi, f_hi, dp_hi)
            f, g, dp = phi(a)
            if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= f_lo:
                a_hi, f_hi, dp_hi = a, f, dp
            else:
                if abs(dp) <= -c2 * dphi0:
                    return a, f, g, True
                if dp * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, dp_hi = a_lo, f_lo, dp_lo
                a_lo, f_lo, dp_lo = a, f, dp
            if abs(a_hi - a_lo) < 1e-16 * max(1.0, a_lo):
                break
        return fallback()

    a_prev, f_prev, dp_prev = 0.0, f0, dphi0
    a = alpha0
    while evals < max_evals:
        f, g, dp = phi(a)
        if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or (evals > 1 and f >= f_prev):
            if not math.isfinite(f):
                f, dp = math.inf, math.inf
            return zoom(a_prev, f_prev, dp_prev, a, f, dp)
        if abs(dp) <= -c2 * dphi0:
            return a, f, g, True
        if dp >= 0:
            return zoom(a, f, dp, a_prev, f_prev, dp_prev)
        a_prev, f_prev, dp_prev = a, f, dp
        a = min(2.0 * a, alpha_max)
    return fallback()


def minimize(
    fun: Objective,
    x0: np.ndarray,
    memory: int = 10,
    max_iters: int = 100,
    grad_tol: float = 1e-5,
    c1: float = 1e-4,
    c2: float = 0.9,
) -> LbfgsResult:
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    pairs: deque = deque(maxlen=memory)
    history = [f]
    converged = failed = False
    it = 0
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) <= grad_tol:
            converged = True
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        coeffs = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            coeffs.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(pairs, reversed(coeffs)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:
            pairs.clear()
            d = -g
        alpha0 = 1.0 if pairs else min(1.0, 1.0 / np.linalg.norm(g))
        step = strong_wolfe(fun, x, f, g, d, alpha0, c1, c2)
        if step is None:
            failed = True
            it -= 1
            break
        alpha, f_new, g_new, ok = step
        s = alpha * d
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * (np.linalg.norm(s) * np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x + s, f_new, g_new
        history.append(f)
        if not ok:
            failed = True
            break
    else:
        converged = bool(np.linalg.norm(g) <= grad_tol)
    return LbfgsResult(x, float(f), float(np.linalg.norm(g)), it, converged, failed, history)
