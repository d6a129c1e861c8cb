"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, float64_mode, grad, kink_monitor


def _eval(f, x):
    # grad stays enabled: f may differentiate internally (gradient penalty)
    return float(f(Tensor(x)).data.reshape(-1)[0])


def _nudge_away_from_kinks(f, x, eps, rng, tries=50, jitter=0.05):
    """Shift ``x`` until every piecewise-linear op input is >= 10*eps from 0."""
    best, best_margin = x, -1.0
    cand = x
    for _ in range(tries):
        with kink_monitor() as box:
            f(Tensor(cand))
        margin = box["margin"]
        if margin >= 10 * eps:
            return cand
        if margin > best_margin:
            best, best_margin = cand, margin
        cand = x + rng.normal(0.0, jitter, size=x.shape)
    return best


def numeric_gradient(f, x, eps=1e-5):
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        up = _eval(f, x)
        flat_x[i] = orig - eps
        down = _eval(f, x)
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2 * eps)
    return g


def analytic_gradient(f, x):
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError(f"gradient check needs a scalar function, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros_like(x)
    return grad(out, xt).data.copy()


def finite_diff_check(f, x, eps=1e-5, seed=0, nudge=True):
    """Max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).

    ``f`` maps a Tensor to a scalar Tensor. Runs in 64-bit.
    """
    with float64_mode():
        x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if nudge:
            x = _nudge_away_from_kinks(f, x, eps, np.random.default_rng(seed))
        a = analytic_gradient(f, x)
        n = numeric_gradient(f, x, eps)
    rel = np.abs(a - n) / np.maximum(1e-8, np.abs(n))
    return float(rel.max()) if rel.size else 0.0
