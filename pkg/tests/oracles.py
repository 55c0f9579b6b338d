"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from vfbayes.diagnostics import batch_mean_se
from vfbayes.model import loglik_values
from vfbayes.stage1 import SamplePool, gibbs_update_random_effect_pair, pool_columns, update_latent_censored
from vfbayes.stage2 import PopulationState, pool_theta, theta_blocks


def censored_toy(seed=4, n=10, alpha=(2.0, -0.5), sd=3.0):
    """Ten-observation single-line toy with a known residual SD and some censoring."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 4.5, n)
    latent = alpha[0] + alpha[1] * t + sd * rng.standard_normal(n)
    cens = latent < 0
    return t, np.where(cens, 0.0, latent), cens, sd


def quadrature_posterior(t, y, cens, sd, prior_var=1e8, n=801):
    """Posterior mean and SD of the intercept by brute-force 2-D grid integration."""
    x = np.stack([np.ones_like(t), t], axis=1)
    ok = ~cens
    coef, *_ = np.linalg.lstsq(x[ok], y[ok], rcond=None)
    a0 = np.linspace(coef[0] - 25, coef[0] + 25, n)
    a1 = np.linspace(coef[1] - 10, coef[1] + 10, n)
    g0, g1 = np.meshgrid(a0, a1, indexing="ij")
    mu = g0[..., None] + g1[..., None] * t
    lp = loglik_values(y, cens, mu, sd).sum(axis=-1) - 0.5 * (g0 ** 2 + g1 ** 2) / prior_var
    w = np.exp(lp - lp.max())
    w /= w.sum()
    m = float((w * g0).sum())
    return m, float(np.sqrt((w * (g0 - m) ** 2).sum()))


def augmented_gibbs(t, y, cens, sd, rng, iterations=40_000, burn_in=1_000, prior_var=1e8):
    """Latent-variable Gibbs sampler for the same toy, built from the stage-1 primitives."""
    z = y.copy()
    alpha = np.zeros(2)
    idx = np.zeros(t.size, dtype=np.intp)
    weights = np.full(t.size, 1.0 / sd ** 2)
    prior = prior_var * np.eye(2)
    out = np.empty(iterations)
    for it in range(iterations):
        mu = alpha[0] + alpha[1] * t
        z[cens] = update_latent_censored(mu, sd, cens, rng)
        alpha = gibbs_update_random_effect_pair(t, z, weights, idx, 1, prior, rng)[0]
        out[it] = alpha[0]
    kept = out[burn_in:]
    return float(kept.mean()), batch_mean_se(kept, 50)


def sequential_normal_update(thetas, cov, prior_var):
    """Normal-normal posterior by absorbing one observation at a time."""
    d = thetas.shape[1]
    m, c = np.zeros(d), prior_var * np.eye(d)
    for x in thetas:
        gain = c @ np.linalg.inv(c + cov)
        m = m + gain @ (x - m)
        c = c - gain @ c
    return m, c


def three_row_pool():
    """Model-1 pool of three rows and a population state under which all rows carry weight."""
    cols = pool_columns(1)
    rows = np.array([
        [18.0, -0.2, 1.0, 0.1, 0.2, 1.1, 0.0, 0.1, 2.0, 0.0, 0.2, 12.0],
        [20.0, -0.4, 1.2, 0.0, 0.1, 0.9, 0.1, 0.2, 2.2, 0.1, 0.1, 14.0],
        [22.5, -0.1, 0.8, 0.2, 0.3, 1.0, -0.1, 0.1, 1.8, 0.0, 0.3, 11.0],
    ])
    pool = SamplePool("P", cols, rows)
    blocks = theta_blocks(1)
    mean = {"alpha": np.array([20.0, -0.3]), "log_sigma2": np.array([np.log(13.0)])}
    cov = {"alpha": np.array([[4.0, 0.1], [0.1, 0.05]]), "log_sigma2": np.array([[0.2]])}
    for b in ("c_gamma", "c_eta", "c_lambda"):
        mean[b] = pool_theta(pool, blocks)[:, [2, 3, 4]].mean(axis=0) if b == "c_gamma" else \
            np.array([1.0, 0.0, 0.15])
        cov[b] = np.diag([0.1, 0.1, 0.05])
    mean["c_eta"] = np.array([1.0, 0.0, 0.15])
    mean["c_lambda"] = np.array([2.0, 0.0, 0.2])
    return pool, blocks, PopulationState(mean, cov)


def exact_normal_mean_conditional(thetas, cov, prior_var):
    """Same conditional in exact rational arithmetic (2-D only); returns floats."""
    from fractions import Fraction as F

    (a, b), (c, d) = [[F(float(v)) for v in row] for row in cov]
    det = a * d - b * c
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    n = len(thetas)
    s0 = sum(F(float(x[0])) for x in thetas)
    s1 = sum(F(float(x[1])) for x in thetas)
    pv = F(float(prior_var))
    pa, pb, pc, pd = n * ia + 1 / pv, n * ib, n * ic, n * id_ + 1 / pv
    pdet = pa * pd - pb * pc
    ca, cb, cc, cd = pd / pdet, -pb / pdet, -pc / pdet, pa / pdet
    r0, r1 = ia * s0 + ib * s1, ic * s0 + id_ * s1
    mean = np.array([float(ca * r0 + cb * r1), float(cc * r0 + cd * r1)])
    return mean, np.array([[float(ca), float(cb)], [float(cc), float(cd)]])
