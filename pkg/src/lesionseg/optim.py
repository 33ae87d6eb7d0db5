"""Limited-memory BFGS ascent with a backtracking line search.

Objectives may return ``-inf`` to veto a step (e.g. a folded mesh); the line
search treats that as a failed trial and shrinks the step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    n_iter: int
    n_evals: int
    history: list


def lbfgs_maximize(
    fun,
    x0: np.ndarray,
    max_iter: int = 20,
    memory: int = 7,
    max_step: float = 1.0,
    rel_tol: float = 1e-7,
    c1: float = 1e-4,
    max_backtracks: int = 20,
) -> LbfgsResult:
    """Maximize ``fun(x) -> (value, grad)``.

    ``max_step`` bounds the largest coordinate change of the first trial
    step of every line search.  Returns ``x0`` unchanged if no step improves
    the objective.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    n_evals = 1
    history = [f]
    if not np.isfinite(f):
        raise ValueError("starting point has a non-finite objective")
    pairs: deque = deque(maxlen=memory)
    it = 0
    for it in range(1, max_iter + 1):
        # two-loop recursion on the negated objective
        q = -g.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if pairs:
            s, y, _ = pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if slope <= 0:
            pairs.clear()
            d = g.copy()
            slope = g @ d
        if slope <= 0:
            break
        step = min(1.0, max_step / max(np.abs(d).max(), 1e-300))
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            n_evals += 1
            if np.isfinite(f_new) and f_new >= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s = x_new - x
        y = g - g_new  # gradient of the negated objective
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y, 1.0 / sy))
        improvement = f_new - f
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if improvement <= rel_tol * max(1.0, abs(f)):
            break
    return LbfgsResult(x, f, it, n_evals, history)
