"""One-stage Gibbs sampler for the homoscedastic model, toy scale only.

All individuals are fitted jointly with population-level fixed effects,
individual coefficients ``alpha_i ~ N(0, Sigma_alpha)`` and covariance
matrices shared across individuals. It serves as a reference for the
two-stage combination when the generator uses common variances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelVariant
from .stage1 import (
    IG_RATE,
    IG_SHAPE,
    IW_DF,
    IW_SCALE,
    PRIOR_VAR,
    _scatter,
    gibbs_update_random_effect_pair,
    update_latent_censored,
)
from .distributions import sample_inverse_gamma, sample_inverse_wishart2


@dataclass
class OneStageResult:
    beta: np.ndarray          # (n_kept, 2)
    sigma2: np.ndarray        # (n_kept,)
    Sigma_alpha: np.ndarray   # (n_kept, 2, 2)

    def summary(self) -> dict:
        return {"beta0": (self.beta[:, 0].mean(), self.beta[:, 0].std(ddof=1)),
                "beta1": (self.beta[:, 1].mean(), self.beta[:, 1].std(ddof=1)),
                "sigma2": (self.sigma2.mean(), self.sigma2.std(ddof=1))}


def _codes(keys):
    uniq = sorted(set(keys))
    pos = {k: j for j, k in enumerate(uniq)}
    return np.array([pos[k] for k in keys], dtype=np.intp), uniq


def _draw_parent(children, child_parent, n_parents, child_cov, prior_mean, prior_cov, rng):
    """Normal-normal draw of parent pairs given children ~ N(parent, child_cov)."""
    child_prec = np.linalg.inv(child_cov)
    prior_prec = np.linalg.inv(prior_cov)
    counts = np.bincount(child_parent, minlength=n_parents)
    sums = np.stack([np.bincount(child_parent, weights=children[:, j], minlength=n_parents) for j in (0, 1)], 1)
    prec = counts[:, None, None] * child_prec + prior_prec
    rhs = sums @ child_prec.T + prior_mean @ prior_prec.T
    cov = np.linalg.inv(prec)
    mean = np.einsum("gij,gj->gi", cov, rhs)
    chol = np.linalg.cholesky(cov)
    return mean + np.einsum("gij,gj->gi", chol, rng.standard_normal((n_parents, 2)))


def fit_one_stage(datasets, iterations: int, burn_in: int, rng, model=ModelVariant.MODEL1) -> OneStageResult:
    """Joint Gibbs sampler over every individual (Model 1 only).

    Uses the hierarchically centred form: location coefficients are centred
    on hemifield coefficients, those on eye coefficients, those on the
    individual's coefficients, and those on the fixed effects. The model is
    the same; the chain mixes far better than the offset form because the
    levels are not confounded with one another.
    """
    if ModelVariant(model) is not ModelVariant.MODEL1:
        raise NotImplementedError("the one-stage reference covers the homoscedastic model without visit effects")
    datasets = list(datasets)
    obs = [ob for d in datasets for ob in d.observations]
    t = np.array([ob.years for ob in obs])
    y = np.array([ob.observed_db for ob in obs])
    cens = np.array([ob.censored for ob in obs])
    loc_idx, loc_keys = _codes([(ob.individual, ob.eye, ob.hemifield, ob.location) for ob in obs])
    hemi_idx, hemi_keys = _codes([k[:3] for k in loc_keys])
    eye_idx, eye_keys = _codes([k[:2] for k in hemi_keys])
    ind_idx, ind_keys = _codes([k[:1] for k in eye_keys])

    x = np.stack([np.ones_like(t), t], axis=1)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    beta = coef.copy()
    a = np.tile(coef, (len(ind_keys), 1))
    g = a[ind_idx].copy()
    e = g[eye_idx].copy()
    b = e[hemi_idx].copy()
    cov = {k: np.diag([1.0, 0.01]) for k in ("alpha", "gamma", "eta", "lambda")}
    sigma2 = max(float(np.var(y - x @ coef)), 1e-2)
    z = y.copy()
    w_unit = np.ones(t.size)
    flat = PRIOR_VAR * np.eye(2)

    kept_beta, kept_s2, kept_sa = [], [], []
    for it in range(iterations):
        mu = b[loc_idx, 0] + b[loc_idx, 1] * t
        if cens.any():
            z[cens] = update_latent_censored(mu, np.sqrt(sigma2), cens, rng)
        parent = e[hemi_idx]
        resid = z - (parent[loc_idx, 0] + parent[loc_idx, 1] * t)
        b = parent + gibbs_update_random_effect_pair(t, resid, w_unit / sigma2, loc_idx, len(loc_keys),
                                                     cov["lambda"], rng)
        e = _draw_parent(b, hemi_idx, len(hemi_keys), cov["lambda"], g[eye_idx], cov["eta"], rng)
        g = _draw_parent(e, eye_idx, len(eye_keys), cov["eta"], a[ind_idx], cov["gamma"], rng)
        a = _draw_parent(g, ind_idx, len(ind_keys), cov["gamma"], beta[None, :], cov["alpha"], rng)
        beta = _draw_parent(a, np.zeros(len(ind_keys), dtype=np.intp), 1, cov["alpha"], np.zeros((1, 2)),
                            flat, rng)[0]
        for k, dev in (("alpha", a - beta), ("gamma", g - a[ind_idx]), ("eta", e - g[eye_idx]),
                       ("lambda", b - e[hemi_idx])):
            cov[k] = sample_inverse_wishart2(IW_DF + dev.shape[0], IW_SCALE + _scatter(dev), rng)
        mu = b[loc_idx, 0] + b[loc_idx, 1] * t
        sigma2 = float(sample_inverse_gamma(IG_SHAPE + 0.5 * t.size, IG_RATE + 0.5 * np.sum((z - mu) ** 2), rng))
        if it >= burn_in:
            kept_beta.append(beta.copy())
            kept_s2.append(sigma2)
            kept_sa.append(cov["alpha"].copy())
    return OneStageResult(np.array(kept_beta), np.array(kept_s2), np.array(kept_sa))
