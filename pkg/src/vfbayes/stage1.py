"""Stage 1: independent per-individual MCMC.

Each individual is fitted on its own with vague priors on its intercept and
slope (and, for the variance-link variant, on its log-SD coefficients).
Censored points are handled by data augmentation, the t-distributed visit
effects by a Gamma scale mixture. Retained draws of the individual-level
parameters form the :class:`SamplePool` that stage 2 uses as its proposal
distribution; the random effects are optionally kept in memory for
posterior predictive checks but never written to the pool.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import (
    GVE_DF,
    RngStream,
    chol_to_vec,
    cholesky2_batch,
    sample_inverse_gamma,
    sample_inverse_wishart2,
    sample_mixing_weights,
    sample_truncated_normal,
    stream_key,
)
from .model import IndividualData, Layout, ModelVariant

log = logging.getLogger(__name__)

#: Variance of the vague normal priors on alpha_i and beta*_i.
PRIOR_VAR = 1e8
#: Inverse-Wishart prior on the random-effect covariances.
IW_DF = 2.0
IW_SCALE = 0.01 * np.eye(2)
#: Inverse-gamma prior (shape, rate) on sigma^2 and sigma^2_phi.
IG_SHAPE = 0.001
IG_RATE = 0.001

PRESETS = {
    "desk": dict(iterations=20_000, burn_in=10_000, thin=10),
    "paper": dict(iterations=200_000, burn_in=150_000, thin=10),
}

DEFAULT_STEPS = {"alpha_beta_star": 2.38 / 2.0, "gamma": 1.68, "eta": 1.68, "lambda": 1.68, "phi": 2.38}

_ADAPT_WINDOW = 50
#: Joint alpha/beta* random-walk steps per sweep; the block is cheap and mixes slowest.
_AB_STEPS = 5
_ACC_LOW, _ACC_HIGH = 0.23, 0.44

PAIR_BLOCKS = ("gamma", "eta", "lambda")


class Stage1Error(ArithmeticError):
    """The sampler produced a non-finite state."""


def pool_columns(variant: ModelVariant) -> list[str]:
    variant = ModelVariant(variant)
    cols = ["alpha0", "alpha1"]
    if variant.has_variance_link:
        cols += ["beta_star0", "beta_star1"]
    for b in PAIR_BLOCKS:
        cols += [f"c_{b}{r}" for r in (1, 2, 3)]
    if variant.has_visit_effect:
        cols.append("sigma2_phi")
    if not variant.has_variance_link:
        cols.append("sigma2")
    return cols


def variant_from_columns(columns) -> ModelVariant:
    columns = list(columns)
    for v in ModelVariant:
        if pool_columns(v) == columns:
            return v
    raise ValueError(f"columns do not match any model variant: {columns}")


@dataclass
class Stage1Config:
    iterations: int = PRESETS["desk"]["iterations"]
    burn_in: int = PRESETS["desk"]["burn_in"]
    thin: int = PRESETS["desk"]["thin"]
    model: ModelVariant = ModelVariant.MODEL1
    rw_step_sizes: dict = field(default_factory=dict)
    adapt_burnin_fraction: float = 1.0
    keep_effects: bool = True

    def __post_init__(self):
        self.model = ModelVariant.parse(self.model)
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be in [0, iterations)")
        if not 0.0 <= self.adapt_burnin_fraction <= 1.0:
            raise ValueError("adapt_burnin_fraction must lie in [0, 1]")
        if self.retained < 100:
            raise ValueError(f"config retains {self.retained} draws; at least 100 are required")
        for k, v in self.rw_step_sizes.items():
            if k not in DEFAULT_STEPS or not v > 0:
                raise ValueError(f"bad step size entry {k}={v}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "Stage1Config":
        return cls(**{**PRESETS[name], **overrides})

    @property
    def retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def step(self, block: str) -> float:
        return self.rw_step_sizes.get(block, DEFAULT_STEPS[block])


@dataclass
class SamplePool:
    """Thinned stage-1 draws of one individual's parameters of interest."""

    individual_id: object
    columns: list[str]
    draws: np.ndarray

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[1] != len(self.columns):
            raise ValueError("draws width does not match columns")
        for b in PAIR_BLOCKS:
            for r in (1, 3):
                col = f"c_{b}{r}"
                if np.any(self.draws[:, self.columns.index(col)] <= 0):
                    raise ValueError(f"non-positive Cholesky diagonal in {col}")

    @property
    def retained_count(self) -> int:
        return self.draws.shape[0]

    @property
    def variant(self) -> ModelVariant:
        return variant_from_columns(self.columns)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.columns.index(name)]

    def covariance(self, block: str, row: int) -> np.ndarray:
        c = [self.draws[row, self.columns.index(f"c_{block}{r}")] for r in (1, 2, 3)]
        l = np.array([[c[0], 0.0], [c[1], c[2]]])
        return l @ l.T

    def truncated(self, n: int) -> "SamplePool":
        return SamplePool(self.individual_id, list(self.columns), self.draws[:n].copy())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.draws:
                w.writerow([format(v, ".17g") for v in row])

    @classmethod
    def from_csv(cls, path, individual_id=None) -> "SamplePool":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if individual_id is None:
            individual_id = path.stem.removeprefix("pool_")
        draws = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        return cls(individual_id, rows[0], draws.reshape(-1, len(rows[0])))


@dataclass
class Stage1Result:
    pool: SamplePool
    effects: dict | None
    acceptance: dict
    layout: Layout


# ---------------------------------------------------------------------------
# Conjugate building blocks
# ---------------------------------------------------------------------------

def _inv2(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    out = np.empty(m.shape)
    out[..., 0, 0] = m[..., 1, 1] / det
    out[..., 1, 1] = m[..., 0, 0] / det
    out[..., 0, 1] = -m[..., 0, 1] / det
    out[..., 1, 0] = -m[..., 1, 0] / det
    return out


_S = tuple(IW_SCALE.ravel().tolist())


def _iw_trace(cov) -> float:
    """``tr(S cov^-1)`` for the 2x2 prior scale ``S``."""
    a, b, c, d = cov.ravel().tolist()
    return (_S[0] * d - _S[1] * c - _S[2] * b + _S[3] * a) / (a * d - b * c)


def _pair_precision(t, weights, group_idx, n_groups, prior_prec):
    """Per-group data precision ``X^T W X`` plus prior precision, shape (G, 2, 2)."""
    s00 = np.bincount(group_idx, weights=weights, minlength=n_groups)
    s01 = np.bincount(group_idx, weights=weights * t, minlength=n_groups)
    s11 = np.bincount(group_idx, weights=weights * t * t, minlength=n_groups)
    prec = np.empty((n_groups, 2, 2))
    prec[:, 0, 0] = s00
    prec[:, 0, 1] = prec[:, 1, 0] = s01
    prec[:, 1, 1] = s11
    return prec + prior_prec


def conditional_pair_moments(t, resid, weights, group_idx, n_groups, prior_cov):
    """Mean and covariance of the bivariate normal full conditional of each group.

    The model for group ``g`` is ``resid_j = b0 + b1 * t_j + noise`` with noise
    precision ``weights_j`` and prior ``(b0, b1) ~ N(0, prior_cov)``.
    """
    prior_prec = _inv2(np.asarray(prior_cov, dtype=float))
    prec = _pair_precision(t, weights, group_idx, n_groups, prior_prec)
    wr = weights * resid
    rhs = np.stack([np.bincount(group_idx, weights=wr, minlength=n_groups),
                    np.bincount(group_idx, weights=wr * t, minlength=n_groups)], axis=-1)
    cov = _inv2(prec)
    mean = np.einsum("gij,gj->gi", cov, rhs)
    return mean, cov


def _draw_from_precision(p00, p01, p11, r0, r1, rng):
    """Draw x ~ N(P^-1 r, P^-1) for a stack of 2x2 precisions P."""
    a = np.sqrt(p00)
    b = p01 / a
    c = np.sqrt(p11 - b * b)
    z = rng.standard_normal((np.size(a), 2))
    # solve L y = r, add noise, then back-solve L^T x = y
    y0 = r0 / a + z[:, 0]
    y1 = (r1 - b * (r0 / a)) / c + z[:, 1]
    x1 = y1 / c
    x0 = (y0 - b * x1) / a
    return np.stack([x0, x1], axis=-1)


def gibbs_update_random_effect_pair(t, resid, weights, group_idx, n_groups, prior_cov, rng):
    """Exact draw of every (intercept, slope) pair from its normal full conditional.

    Raises ``np.linalg.LinAlgError`` if a group's precision is singular.
    """
    prior_prec = _inv2(np.asarray(prior_cov, dtype=float))
    prec = _pair_precision(t, weights, group_idx, n_groups, prior_prec)
    det = prec[:, 0, 0] * prec[:, 1, 1] - prec[:, 0, 1] ** 2
    if np.any(~(det > 0)) or np.any(~(prec[:, 0, 0] > 0)):
        raise np.linalg.LinAlgError("singular precision in random-effect block")
    wr = weights * resid
    r0 = np.bincount(group_idx, weights=wr, minlength=n_groups)
    r1 = np.bincount(group_idx, weights=wr * t, minlength=n_groups)
    return _draw_from_precision(prec[:, 0, 0], prec[:, 0, 1], prec[:, 1, 1], r0, r1, rng)


def update_latent_censored(mu, sd, censored, rng):
    """Draw the latent value of each censored observation below 0.

    Returns an array aligned with ``censored.nonzero()``; empty if nothing is censored.
    """
    censored = np.asarray(censored, dtype=bool)
    if not censored.any():
        return np.empty(0)
    mu = np.broadcast_to(mu, censored.shape)[censored]
    sd = np.broadcast_to(sd, censored.shape)[censored]
    return np.atleast_1d(sample_truncated_normal(mu, sd, 0.0, rng))


def _quad_pairs(x, prec):
    return (prec[..., 0, 0] * x[..., 0] ** 2 + 2 * prec[..., 0, 1] * x[..., 0] * x[..., 1]
            + prec[..., 1, 1] * x[..., 1] ** 2)


def _scatter(x):
    return np.einsum("gi,gj->ij", x, x)


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

class _Adaptive:
    """Per-group random-walk proposal: ``x' = x + exp(log_scale) * L z``."""

    def __init__(self, chol, log_scale):
        self.chol = chol
        self.log_scale = np.full(chol.shape[0], float(log_scale))
        self.acc = np.zeros(chol.shape[0])
        self.tries = 0
        self.total_acc = np.zeros(chol.shape[0])
        self.total_tries = 0

    def propose(self, rng):
        z = rng.standard_normal(self.chol.shape[:-1])
        step = np.einsum("gij,gj->gi", self.chol, z)
        return np.exp(self.log_scale)[:, None] * step

    def record(self, accepted):
        self.acc += accepted
        self.tries += 1
        self.total_acc += accepted
        self.total_tries += 1

    def adapt(self, new_chol=None):
        rate = self.acc / max(self.tries, 1)
        self.log_scale[rate < _ACC_LOW] -= 0.25
        self.log_scale[rate > _ACC_HIGH] += 0.25
        self.acc[:] = 0
        self.tries = 0
        if new_chol is not None:
            self.chol = new_chol

    @property
    def rate(self) -> float:
        return float(self.total_acc.mean() / max(self.total_tries, 1))


class _Sampler:
    def __init__(self, data: IndividualData, cfg: Stage1Config, rng: np.random.Generator):
        lay = data.layout
        if lay.n == 0:
            raise ValueError("individual has no observations")
        if np.unique(lay.t).size < 2:
            raise ValueError(f"individual {data.individual_id} has fewer than 2 visits; slope unidentifiable")
        self.data, self.cfg, self.rng, self.lay = data, cfg, rng, lay
        self.variant = cfg.model
        self.cens = lay.censored
        self.any_cens = bool(self.cens.any())
        t, y = lay.t, lay.y

        x = np.stack([np.ones_like(t), t], axis=1)
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        resid_var = max(float(np.var(y - x @ coef)), 1e-2)
        self.alpha = coef.astype(float)
        self.beta_star = np.array([0.5 * np.log(resid_var), 0.0])
        self.sigma2 = resid_var
        self.gamma = np.zeros((lay.n_gamma, 2))
        self.eta = np.zeros((lay.n_eta, 2))
        self.lam = np.zeros((lay.n_lam, 2))
        self.phi = np.zeros(lay.n_phi)
        self.w = np.ones(lay.n_phi)
        self.sigma2_phi = 1.0
        self.cov = {b: np.diag([1.0, 0.01]) for b in PAIR_BLOCKS}
        self.z = y.copy()
        self.mu = self._full_mu()
        self.z[self.cens] = np.minimum(self.mu[self.cens], 0.0) - 0.5

        self._pair = {"gamma": (lay.gamma_idx, lay.n_gamma), "eta": (lay.eta_idx, lay.n_eta),
                      "lambda": (lay.lam_idx, lay.n_lam)}
        # unweighted X^T X per group; constant for the homoscedastic variants
        self._xtx = {b: _pair_precision(t, np.ones_like(t), idx, g, np.zeros((2, 2)))
                     for b, (idx, g) in self._pair.items()}
        self._xtx["alpha"] = _pair_precision(t, np.ones_like(t), np.zeros(t.size, dtype=np.intp), 1,
                                             np.zeros((2, 2)))
        self._zero_idx = np.zeros(t.size, dtype=np.intp)
        self._alpha_prior = np.eye(2) / PRIOR_VAR
        self._phi_count = np.bincount(lay.phi_idx, minlength=lay.n_phi).astype(float)
        # parent of every group one level up: gamma -> alpha, eta -> gamma, lambda -> eta
        g_pos = {k: j for j, k in enumerate(lay.gamma_keys)}
        e_pos = {k: j for j, k in enumerate(lay.eta_keys)}
        self._parent = {
            "gamma": (np.zeros(lay.n_gamma, dtype=np.intp), 1),
            "eta": (np.array([g_pos[k[0]] for k in lay.eta_keys], dtype=np.intp), lay.n_gamma),
            "lambda": (np.array([e_pos[k[:2]] for k in lay.lam_keys], dtype=np.intp), lay.n_eta),
        }
        self._init_effects()
        # Model 3 holds the variance-link slope at 0 for the first tenth of burn-in
        self.hold_slope = False
        self.adapt = {}
        if self.variant.has_variance_link:
            self._init_mh()
        # log proposal SD and acceptance counts of the scale moves, per (block, component)
        self._scale_step = {(b, k): np.log(0.1) for b in PAIR_BLOCKS for k in (0, 1, 2)}
        self._scale_acc = {b: [0, 0] for b in PAIR_BLOCKS}

    def _init_effects(self):
        """Start the hierarchy at least-squares lines on the residuals.

        Each location gets its own residual line; hemifield and eye lines are
        averages of their children, and every level keeps the remainder.
        Starting from zero effects instead leaves all structure in the
        residual, which under the variance link can pull the chain into a
        collapsed state it takes very long to leave.
        """
        lay, t = self.lay, self.lay.t
        resid = self.z - (self.alpha[0] + self.alpha[1] * t)
        ridge = 1e-3 * np.eye(2)
        prec = _pair_precision(t, np.ones_like(t), lay.lam_idx, lay.n_lam, ridge)
        rhs = np.stack([np.bincount(lay.lam_idx, weights=resid, minlength=lay.n_lam),
                        np.bincount(lay.lam_idx, weights=resid * t, minlength=lay.n_lam)], axis=1)
        lines = np.linalg.solve(prec, rhs[..., None])[..., 0]

        def mean_by(x, parent, n):
            cnt = np.maximum(np.bincount(parent, minlength=n), 1)[:, None]
            return np.stack([np.bincount(parent, weights=x[:, k], minlength=n) for k in (0, 1)], 1) / cnt

        lam_parent, n_eta = self._parent["lambda"]
        eta_parent, n_gamma = self._parent["eta"]
        eta_tot = mean_by(lines, lam_parent, n_eta)
        self.gamma = mean_by(eta_tot, eta_parent, n_gamma)
        self.eta = eta_tot - self.gamma[eta_parent]
        self.lam = lines - eta_tot[lam_parent]
        floor = np.diag([0.1, 1e-3])
        for b, x in (("gamma", self.gamma), ("eta", self.eta), ("lambda", self.lam)):
            self.cov[b] = _scatter(x) / x.shape[0] + floor
        self.mu = self._full_mu()
        resid_var = max(float(np.var(self.z - self.mu)), 1e-2)
        self.sigma2 = resid_var
        self.beta_star = np.array([0.5 * np.log(resid_var), 0.0])

    # -- helpers -----------------------------------------------------------
    def _effects(self, block):
        return {"gamma": self.gamma, "eta": self.eta, "lambda": self.lam}[block]

    def _set_effects(self, block, value):
        if block == "gamma":
            self.gamma = value
        elif block == "eta":
            self.eta = value
        else:
            self.lam = value

    def _full_mu(self):
        phi = self.phi if self.variant.has_visit_effect else None
        return self.lay.mu(self.alpha, self.gamma, self.eta, self.lam, phi)

    def sd(self, mu=None):
        if self.variant.has_variance_link:
            mu = self.mu if mu is None else mu
            return np.exp(self.beta_star[0] + self.beta_star[1] * mu)
        return np.sqrt(self.sigma2)

    def _obs_ll(self, mu, bs):
        log_sd = bs[0] + bs[1] * mu
        r = self.z - mu
        return -log_sd - 0.5 * r * r * np.exp(-2.0 * log_sd)

    # -- Model 3 proposal set-up --------------------------------------------
    def _gauss_chol(self, block):
        """Cholesky of the Gaussian-approximate conditional covariance of each group."""
        idx, g = self._pair[block]
        wts = 1.0 / self.sd() ** 2
        prec = _pair_precision(self.lay.t, wts, idx, g, _inv2(self.cov[block]))
        return cholesky2_batch(_inv2(prec))

    def _phi_chol(self):
        wts = 1.0 / self.sd() ** 2
        prec = np.bincount(self.lay.phi_idx, weights=wts, minlength=self.lay.n_phi)
        prec = prec + self.w / self.sigma2_phi
        return (1.0 / np.sqrt(prec))[:, None, None]

    def _ab_cov(self):
        t, mu = self.lay.t, self.mu
        wts = 1.0 / self.sd() ** 2
        xa = np.stack([np.ones_like(t), t], axis=1)
        xb = np.stack([np.ones_like(mu), mu], axis=1)
        cov = np.zeros((4, 4))
        cov[:2, :2] = np.linalg.inv(xa.T @ (xa * wts[:, None]) + 1e-8 * np.eye(2))
        cov[2:, 2:] = np.linalg.inv(2.0 * xb.T @ xb + 1e-8 * np.eye(2))
        return cov

    def _init_mh(self):
        cfg = self.cfg
        self.ll_obs = self._obs_ll(self.mu, self.beta_star)
        for b in PAIR_BLOCKS:
            self.adapt[b] = _Adaptive(self._gauss_chol(b), np.log(cfg.step(b)))
        if self.variant.has_visit_effect:
            self.adapt["phi"] = _Adaptive(self._phi_chol(), np.log(cfg.step("phi")))
        self.adapt["alpha_beta_star"] = _Adaptive(np.linalg.cholesky(self._ab_cov())[None],
                                                  np.log(cfg.step("alpha_beta_star")))

    def _adapt_all(self, it):
        for b in PAIR_BLOCKS:
            self.adapt[b].adapt(self._gauss_chol(b))
        if "phi" in self.adapt:
            self.adapt["phi"].adapt(self._phi_chol())
        # conditional curvature, not the chain's marginal spread: the group moves carry
        # alpha far along ridges the likelihood does not see
        self.adapt["alpha_beta_star"].adapt(np.linalg.cholesky(self._ab_cov())[None])

    # -- sweep steps ---------------------------------------------------------
    def step_latent(self):
        if self.any_cens:
            sd = np.broadcast_to(self.sd(), self.mu.shape)
            self.z[self.cens] = update_latent_censored(self.mu, sd, self.cens, self.rng)
            if self.variant.has_variance_link:
                m = self.mu[self.cens]
                log_sd = self.beta_star[0] + self.beta_star[1] * m
                r = self.z[self.cens] - m
                self.ll_obs[self.cens] = -log_sd - 0.5 * r * r * np.exp(-2.0 * log_sd)

    def _gibbs_pairs(self, key, idx, g, cur, prior_prec):
        """Redraw pairs of one block given everything else (homoscedastic variants)."""
        w = 1.0 / self.sigma2
        xtx = self._xtx[key]
        t = self.lay.t
        e = self.z - self.mu
        # sums of the partial residual z - (mu - block contribution)
        r0 = np.bincount(idx, weights=e, minlength=g) + xtx[:, 0, 0] * cur[:, 0] + xtx[:, 0, 1] * cur[:, 1]
        r1 = np.bincount(idx, weights=e * t, minlength=g) + xtx[:, 0, 1] * cur[:, 0] + xtx[:, 1, 1] * cur[:, 1]
        new = _draw_from_precision(w * xtx[:, 0, 0] + prior_prec[0, 0], w * xtx[:, 0, 1] + prior_prec[0, 1],
                                   w * xtx[:, 1, 1] + prior_prec[1, 1], w * r0, w * r1, self.rng)
        d = new - cur
        if g == 1:
            self.mu += d[0, 0] + d[0, 1] * t
        else:
            self.mu += d[idx, 0] + d[idx, 1] * t
        return new

    def step_alpha_gibbs(self):
        self.alpha = self._gibbs_pairs("alpha", self._zero_idx, 1, self.alpha[None, :], self._alpha_prior)[0]

    def step_pair_gibbs(self, block):
        idx, g = self._pair[block]
        new = self._gibbs_pairs(block, idx, g, self._effects(block), _inv2(self.cov[block]))
        self._set_effects(block, new)

    def step_phi_gibbs(self):
        idx, g = self.lay.phi_idx, self.lay.n_phi
        self.w = sample_mixing_weights(self.phi, self.sigma2_phi, self.rng)
        base = self.mu - self.phi[idx]
        prec = self._phi_count / self.sigma2 + self.w / self.sigma2_phi
        mean = np.bincount(idx, weights=self.z - base, minlength=g) / self.sigma2 / prec
        self.phi = mean + self.rng.standard_normal(g) / np.sqrt(prec)
        self.mu = base + self.phi[idx]

    def step_alpha_beta_star_mh(self):
        ad = self.adapt["alpha_beta_star"]
        t = self.lay.t
        d = ad.propose(self.rng)[0]
        if self.hold_slope:
            d[3] = 0.0
        mu_new = self.mu + d[0] + d[1] * t
        bs_new = self.beta_star + d[2:]
        ll_new = self._obs_ll(mu_new, bs_new)
        a_new = self.alpha + d[:2]
        log_prior = -0.5 * (np.sum(a_new ** 2) - np.sum(self.alpha ** 2)
                            + np.sum(bs_new ** 2) - np.sum(self.beta_star ** 2)) / PRIOR_VAR
        log_r = ll_new.sum() - self.ll_obs.sum() + log_prior
        ok = np.log(self.rng.random()) < log_r
        if ok:
            self.alpha, self.beta_star, self.mu, self.ll_obs = a_new, bs_new, mu_new, ll_new
        ad.record(np.array([float(ok)]))

    def step_pair_mh(self, block):
        idx, g = self._pair[block]
        ad = self.adapt[block]
        t = self.lay.t
        cur = self._effects(block)
        d = ad.propose(self.rng)
        new = cur + d
        mu_new = self.mu + d[idx, 0] + d[idx, 1] * t
        ll_new = self._obs_ll(mu_new, self.beta_star)
        dll = np.bincount(idx, weights=ll_new - self.ll_obs, minlength=g)
        prec = _inv2(self.cov[block])
        dprior = -0.5 * (_quad_pairs(new, prec) - _quad_pairs(cur, prec))
        ok = np.log(self.rng.random(g)) < dll + dprior
        okobs = ok[idx]
        self._set_effects(block, np.where(ok[:, None], new, cur))
        self.mu = np.where(okobs, mu_new, self.mu)
        self.ll_obs = np.where(okobs, ll_new, self.ll_obs)
        ad.record(ok.astype(float))

    def step_phi_mh(self):
        idx, g = self.lay.phi_idx, self.lay.n_phi
        self.w = sample_mixing_weights(self.phi, self.sigma2_phi, self.rng)
        ad = self.adapt["phi"]
        d = ad.propose(self.rng)[:, 0]
        new = self.phi + d
        mu_new = self.mu + d[idx]
        ll_new = self._obs_ll(mu_new, self.beta_star)
        dll = np.bincount(idx, weights=ll_new - self.ll_obs, minlength=g)
        dprior = -0.5 * self.w * (new ** 2 - self.phi ** 2) / self.sigma2_phi
        ok = np.log(self.rng.random(g)) < dll + dprior
        okobs = ok[idx]
        self.phi = np.where(ok, new, self.phi)
        self.mu = np.where(okobs, mu_new, self.mu)
        self.ll_obs = np.where(okobs, ll_new, self.ll_obs)
        ad.record(ok.astype(float))

    def step_shift(self, block):
        """Move a common offset between each parent and its children.

        Adding ``d`` to a parent pair and subtracting it from all its children
        leaves every mean unchanged, so ``d`` has a normal conditional built
        from the two priors alone. This breaks the strong posterior
        correlation between the levels' intercepts and slopes.
        """
        pidx, n_par = self._parent[block]
        child = self._effects(block)
        cprec = _inv2(self.cov[block])
        if block == "gamma":
            parent = self.alpha[None, :]
            pprec = self._alpha_prior
        else:
            up = {"eta": "gamma", "lambda": "eta"}[block]
            parent = self._effects(up)
            pprec = _inv2(self.cov[up])
        n = np.bincount(pidx, minlength=n_par).astype(float)
        s0 = np.bincount(pidx, weights=child[:, 0], minlength=n_par)
        s1 = np.bincount(pidx, weights=child[:, 1], minlength=n_par)
        r0 = cprec[0, 0] * s0 + cprec[0, 1] * s1 - (pprec[0, 0] * parent[:, 0] + pprec[0, 1] * parent[:, 1])
        r1 = cprec[0, 1] * s0 + cprec[1, 1] * s1 - (pprec[0, 1] * parent[:, 0] + pprec[1, 1] * parent[:, 1])
        d = _draw_from_precision(pprec[0, 0] + n * cprec[0, 0], pprec[0, 1] + n * cprec[0, 1],
                                 pprec[1, 1] + n * cprec[1, 1], r0, r1, self.rng)
        self._set_effects(block, child - d[pidx])
        if block == "gamma":
            self.alpha = self.alpha + d[0]
        else:
            self._set_effects(up, parent + d)

    def _dll(self, shift):
        """Change of the augmented log-likelihood when every mean moves by ``shift``."""
        mu_new = self.mu + shift
        if self.variant.has_variance_link:
            ll_new = self._obs_ll(mu_new, self.beta_star)
            return float(np.sum(ll_new - self.ll_obs)), mu_new, ll_new
        r = self.z - self.mu
        return -0.5 * float(np.sum(shift * (shift - 2.0 * r))) / self.sigma2, mu_new, None

    def scale_proposal(self, block, k, log_c):
        """Log acceptance ratio and new state for rescaling component ``k`` by ``exp(log_c)``.

        Multiplying the k-th column of the effects by ``c`` and the covariance
        by ``D Sigma D`` with ``D = diag(1, c)`` or ``diag(c, 1)`` leaves the
        effects' prior quadratic form unchanged. It moves along the ridge
        between small effects and a small variance, which otherwise mixes
        slowly when a component is weakly identified.
        """
        eff = self._effects(block)
        idx, _ = self._pair[block]
        c = np.exp(log_c)
        col = eff[idx, k]
        dll, mu_new, ll_new = self._dll((c - 1.0) * (col if k == 0 else col * self.lay.t))
        d = np.array([1.0, 1.0])
        d[k] = c
        cov = self.cov[block]
        cov_new = cov * np.outer(d, d)
        new = eff.copy()
        new[:, k] *= c
        # effects' prior and Jacobian cancel; Sigma Jacobian c^3 against the IW(2, S) density's c^-5
        log_r = dll - 2.0 * log_c - 0.5 * (_iw_trace(cov_new) - _iw_trace(cov))
        return log_r, (new, cov_new, mu_new, ll_new)

    def shear_proposal(self, block, s):
        """Log acceptance ratio and new state for adding ``s`` times each intercept to its slope.

        The covariance becomes ``A Sigma A^T`` with ``A = [[1, 0], [s, 1]]``.
        ``A`` has unit determinant, so only the likelihood and the trace term
        of the covariance prior enter the ratio. The move speeds up mixing of
        the intercept-slope correlation.
        """
        eff = self._effects(block)
        idx, _ = self._pair[block]
        dll, mu_new, ll_new = self._dll(s * eff[idx, 0] * self.lay.t)
        a = np.array([[1.0, 0.0], [s, 1.0]])
        cov = self.cov[block]
        cov_new = a @ cov @ a.T
        new = eff.copy()
        new[:, 1] += s * eff[:, 0]
        return dll - 0.5 * (_iw_trace(cov_new) - _iw_trace(cov)), (new, cov_new, mu_new, ll_new)

    def _accept_group_move(self, block, key, log_r, state, tuning):
        ok = bool(np.log(self.rng.random()) < log_r)
        if ok:
            new, cov_new, mu_new, ll_new = state
            self._set_effects(block, new)
            self.cov[block] = cov_new
            self.mu = mu_new
            if ll_new is not None:
                self.ll_obs = ll_new
        if tuning:
            self._scale_step[key] += 0.05 * (float(ok) - 0.3)
        acc = self._scale_acc[block]
        acc[0] += ok
        acc[1] += 1

    def step_scale(self, block, k, tuning=False):
        log_c = np.exp(self._scale_step[(block, k)]) * self.rng.standard_normal()
        log_r, state = self.scale_proposal(block, k, log_c)
        self._accept_group_move(block, (block, k), log_r, state, tuning)

    def step_shear(self, block, tuning=False):
        s = np.exp(self._scale_step[(block, 2)]) * self.rng.standard_normal()
        log_r, state = self.shear_proposal(block, s)
        self._accept_group_move(block, (block, 2), log_r, state, tuning)

    def step_variances(self):
        rng = self.rng
        for b in PAIR_BLOCKS:
            eff = self._effects(b)
            self.cov[b] = sample_inverse_wishart2(IW_DF + eff.shape[0], IW_SCALE + _scatter(eff), rng)
        if self.variant.has_visit_effect:
            self.sigma2_phi = float(sample_inverse_gamma(
                IG_SHAPE + 0.5 * self.phi.size, IG_RATE + 0.5 * np.sum(self.w * self.phi ** 2), rng))
        if not self.variant.has_variance_link:
            ssr = np.sum((self.z - self.mu) ** 2)
            self.sigma2 = float(sample_inverse_gamma(IG_SHAPE + 0.5 * self.z.size, IG_RATE + 0.5 * ssr, rng))

    def sweep(self, tuning=False):
        self.step_latent()
        if self.variant.has_variance_link:
            for _ in range(_AB_STEPS):
                self.step_alpha_beta_star_mh()
            for b in PAIR_BLOCKS:
                self.step_pair_mh(b)
            if self.variant.has_visit_effect:
                self.step_phi_mh()
        else:
            self.step_alpha_gibbs()
            for b in PAIR_BLOCKS:
                self.step_pair_gibbs(b)
            if self.variant.has_visit_effect:
                self.step_phi_gibbs()
        for b in PAIR_BLOCKS:
            self.step_shift(b)
            self.step_scale(b, 0, tuning)
            self.step_scale(b, 1, tuning)
            self.step_shear(b, tuning)
        self.step_variances()

    def pool_row(self):
        row = [self.alpha[0], self.alpha[1]]
        if self.variant.has_variance_link:
            row += [self.beta_star[0], self.beta_star[1]]
        for b in PAIR_BLOCKS:
            row += list(chol_to_vec(cholesky2_batch(self.cov[b])))
        if self.variant.has_visit_effect:
            row.append(self.sigma2_phi)
        if not self.variant.has_variance_link:
            row.append(self.sigma2)
        return row

    def check_finite(self, it):
        vals = [self.alpha, self.beta_star, self.gamma, self.eta, self.lam, self.phi, self.z]
        if not all(np.all(np.isfinite(v)) for v in vals) or not np.isfinite(self.sigma2) \
                or not np.isfinite(self.sigma2_phi):
            raise Stage1Error(f"non-finite state for individual {self.data.individual_id} at iteration {it}")
        if self.variant.has_variance_link and not np.all(np.isfinite(self.ll_obs)):
            raise Stage1Error(f"non-finite likelihood for individual {self.data.individual_id} at iteration {it}")

    def run(self) -> Stage1Result:
        cfg = self.cfg
        adapt_until = int(cfg.burn_in * cfg.adapt_burnin_fraction)
        rows, keep = [], {"alpha": [], "beta_star": [], "sigma2": [], "gamma": [], "eta": [],
                          "lam": [], "phi": []}
        hold_until = cfg.burn_in // 10 if self.variant.has_variance_link else 0
        for it in range(cfg.iterations):
            self.hold_slope = it < hold_until
            tuning = it < adapt_until
            adapting = tuning and bool(self.adapt)
            self.sweep(tuning)
            if adapting and (it + 1) % _ADAPT_WINDOW == 0:
                self._adapt_all(it)
            if it % 500 == 0 or it == cfg.iterations - 1:
                self.check_finite(it)
                # incremental mean updates accumulate round-off
                self.mu = self._full_mu()
                if self.variant.has_variance_link:
                    self.ll_obs = self._obs_ll(self.mu, self.beta_star)
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == cfg.thin - 1:
                rows.append(self.pool_row())
                if cfg.keep_effects:
                    keep["alpha"].append(self.alpha.copy())
                    keep["beta_star"].append(self.beta_star.copy())
                    keep["sigma2"].append(self.sigma2)
                    keep["gamma"].append(self.gamma.copy())
                    keep["eta"].append(self.eta.copy())
                    keep["lam"].append(self.lam.copy())
                    keep["phi"].append(self.phi.copy())
        pool = SamplePool(self.data.individual_id, pool_columns(self.variant), np.array(rows))
        effects = {k: np.array(v) for k, v in keep.items()} if cfg.keep_effects else None
        acc = {k: a.rate for k, a in self.adapt.items()}
        acc.update({f"scale_{b}": a / max(n, 1) for b, (a, n) in self._scale_acc.items()})
        return Stage1Result(pool, effects, acc, self.lay)


def fit_individual(data: IndividualData, cfg: Stage1Config, rng) -> Stage1Result:
    """Fit one individual's stage-1 posterior and return its retained draws.

    ``rng`` is a ``numpy.random.Generator`` or an :class:`RngStream`.
    Sweep order per iteration: latent censored values, individual
    coefficients, gamma/eta/lambda pairs, mixing weights and visit effects,
    then the covariance and variance parameters.
    """
    if isinstance(rng, RngStream):
        rng = rng.generator()
    return _Sampler(data, cfg, rng).run()


def _fit_one(args):
    data, cfg, seed = args
    return fit_individual(data, cfg, RngStream(seed, stream_key(data.individual_id)))


def fit_all(datasets, cfg: Stage1Config, seed: int, jobs: int = 1) -> dict:
    """Fit every individual with its own stream keyed by individual id."""
    datasets = list(datasets)
    tasks = [(d, cfg, seed) for d in datasets]
    if jobs is None or jobs <= 0:
        jobs = os.cpu_count() or 1
    if jobs == 1 or len(tasks) <= 1:
        results = []
        for k, task in enumerate(tasks):
            log.info("stage 1: individual %s (%d/%d)", task[0].individual_id, k + 1, len(tasks))
            results.append(_fit_one(task))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_fit_one, tasks))
    return {d.individual_id: r for d, r in zip(datasets, results)}


def write_pools(results: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ind, res in results.items():
        res.pool.to_csv(directory / f"pool_{ind}.csv")


def read_pools(directory) -> dict:
    directory = Path(directory)
    return {p.stem.removeprefix("pool_"): SamplePool.from_csv(p)
            for p in sorted(directory.glob("pool_*.csv"))}


def write_effects(results: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ind, res in results.items():
        if res.effects is not None:
            np.savez(directory / f"psi_{ind}.npz", **res.effects)


def read_effects(directory) -> dict:
    directory = Path(directory)
    out = {}
    for p in sorted(directory.glob("psi_*.npz")):
        with np.load(p) as z:
            out[p.stem.removeprefix("psi_")] = {k: z[k] for k in z.files}
    return out
