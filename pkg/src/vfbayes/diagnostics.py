"""Convergence diagnostics and posterior summaries."""

from __future__ import annotations

import numpy as np


def split_rhat(chains) -> float:
    """Split potential scale reduction factor.

    ``chains`` has shape ``(n_chains, n_draws)``; each chain is cut in half
    so that within-chain drift also inflates the statistic.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1] // 2
    if n < 2:
        raise ValueError("need at least 4 draws per chain")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def summarize_draws(draws) -> dict:
    """Mean, median, SD and equal-tail 95% interval of a 1-D sample."""
    d = np.asarray(draws, dtype=float).ravel()
    lo, med, hi = np.quantile(d, [0.025, 0.5, 0.975])
    return {"mean": float(d.mean()), "median": float(med), "sd": float(d.std(ddof=1)) if d.size > 1 else 0.0,
            "ci2.5": float(lo), "ci97.5": float(hi)}


def batch_mean_se(x, n_batches: int = 20) -> float:
    """Monte Carlo standard error of the mean via non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    size = x.size // n_batches
    if size < 1:
        return float(x.std(ddof=1) / np.sqrt(x.size))
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))
