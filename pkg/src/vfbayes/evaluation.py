"""Model assessment: posterior predictive checks, random-effects recovery and DIC.

The predictive check works on stage-1 chains, which keep each individual's
random effects. DIC needs random effects consistent with the stage-2 draws;
those are regenerated by the method of composition: for every selected
stage-2 draw the individual-level parameters are held fixed and the random
effects are sampled by a short blockwise random-walk Metropolis chain,
keeping its final state.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import special

from .distributions import LOG_2PI, logpdf_t3, norm_cdf, norm_pdf, vec_to_cov
from .model import IndividualData, Layout, ModelVariant
from .stage2 import Stage2Result

log = logging.getLogger(__name__)

PPP_LOW, PPP_HIGH = 0.05, 0.95


# ---------------------------------------------------------------------------
# Predictive moments and the discrepancy
# ---------------------------------------------------------------------------

def _sd(mu, variant, beta_star=None, sigma2=None):
    """Residual SD for a batch of linear predictors ``mu`` with shape (K, n)."""
    if ModelVariant(variant).has_variance_link:
        bs = np.asarray(beta_star, dtype=float).reshape(-1, 2)
        return np.exp(bs[:, 0:1] + bs[:, 1:2] * mu)
    s2 = np.asarray(sigma2, dtype=float).reshape(-1, 1)
    return np.sqrt(s2) * np.ones_like(mu)


def predictive_moments(mu, sd, censored_scale: bool = True):
    """Mean and variance of an observation given (mu, sd).

    With ``censored_scale`` the moments are those of ``max(y, 0)``, the
    scale on which recorded values live; otherwise they are ``mu`` and ``sd**2``.
    """
    mu = np.asarray(mu, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("predictive variance must be positive")
    if not censored_scale:
        return mu, sd * sd
    a = mu / sd
    cdf, pdf = norm_cdf(a), norm_pdf(a)
    mean = mu * cdf + sd * pdf
    second = (mu * mu + sd * sd) * cdf + mu * sd * pdf
    var = np.maximum(second - mean * mean, 1e-300)
    return mean, var


def gelman_discrepancy(y, mu, sd, censored_scale: bool = False):
    """Chi-square discrepancy ``sum((y - E[y])^2 / var(y))``.

    ``y``, ``mu`` and ``sd`` broadcast together; the sum runs over the last
    axis so a batch of draws gives one value per draw. Without
    ``censored_scale`` the expectation is the linear predictor itself.
    """
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("zero or negative variance in discrepancy")
    mean, var = predictive_moments(mu, sd, censored_scale)
    r = np.asarray(y, dtype=float) - mean
    out = np.sum(r * r / var, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def ppc_individual(data: IndividualData, chain: dict, variant, rng, max_draws: int | None = None) -> float:
    """Posterior predictive p-value for one individual.

    ``chain`` holds stage-1 draws with the random effects retained (keys
    alpha, beta_star, sigma2, gamma, eta, lam, phi). Each draw simulates a
    replicate, censors it at zero, and compares discrepancies:
    ``mean(D(y_rep) <= D(y))``. Both tails signal misfit.
    """
    variant = ModelVariant(variant)
    k = len(chain.get("alpha", ()))
    if k == 0:
        raise ValueError("empty chain")
    sel = np.arange(k)
    if max_draws is not None and k > max_draws:
        sel = np.unique(np.linspace(0, k - 1, max_draws).round().astype(int))
    lay = data.layout
    phi = chain["phi"][sel] if variant.has_visit_effect else None
    mu = lay.mu(chain["alpha"][sel], chain["gamma"][sel], chain["eta"][sel], chain["lam"][sel], phi)
    sd = _sd(mu, variant, chain["beta_star"][sel], chain["sigma2"][sel])
    d_obs = gelman_discrepancy(lay.y, mu, sd, censored_scale=True)
    y_rep = np.maximum(mu + sd * rng.standard_normal(mu.shape), 0.0)
    d_rep = gelman_discrepancy(y_rep, mu, sd, censored_scale=True)
    return float(np.mean(d_rep <= d_obs))


@dataclass
class PppReport:
    values: dict

    def __post_init__(self):
        for k, v in self.values.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"p-value for {k} outside [0, 1]")

    @property
    def mean_ppp(self) -> float:
        return float(np.mean(list(self.values.values())))

    @property
    def flags(self) -> list:
        return [k for k, v in self.values.items() if v < PPP_LOW or v > PPP_HIGH]

    def sorted(self) -> list:
        return sorted(self.values.items(), key=lambda kv: (kv[1], str(kv[0])))

    def to_csv(self, path) -> None:
        flagged = set(self.flags)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["individual", "ppp", "flag"])
            for k, v in self.sorted():
                w.writerow([k, format(v, ".6f"), int(k in flagged)])

    def text(self, label: str = "") -> str:
        head = f"PPP {label}".rstrip()
        return (f"{head}: mean {self.mean_ppp:.4f} over {len(self.values)} individuals; "
                f"flagged {len(self.flags)} ({', '.join(map(str, self.flags)) or 'none'})")


def ppc_report(datasets, chains: dict, variant, rng, max_draws: int | None = None) -> PppReport:
    return PppReport({d.individual_id: ppc_individual(d, chains[d.individual_id], variant, rng, max_draws)
                      for d in datasets})


# ---------------------------------------------------------------------------
# Method-of-composition recovery
# ---------------------------------------------------------------------------

@dataclass
class RecoveryConfig:
    n_draws: int = 1000
    iterations: int = 500
    adapt_until: int = 250
    adapt_window: int = 25
    ridge_passes: int = 2

    def __post_init__(self):
        if self.n_draws < 1 or self.iterations < 1:
            raise ValueError("n_draws and iterations must be positive")
        if not 0 <= self.adapt_until <= self.iterations:
            raise ValueError("adapt_until must lie in [0, iterations]")


@dataclass
class RecoveredEffects:
    """Random effects for one individual, one row per selected stage-2 draw."""

    individual_id: object
    draw_index: np.ndarray
    omega: dict
    gamma: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    phi: np.ndarray | None
    skipped: list = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return self.draw_index.size


def select_draws(n_total: int, k: int) -> np.ndarray:
    """Evenly strided draw positions."""
    if n_total < 1:
        raise ValueError("no stage-2 draws")
    if k >= n_total:
        return np.arange(n_total)
    return np.unique(np.linspace(0, n_total - 1, k).round().astype(int))


def omega_from_theta(theta, blocks) -> dict:
    """Split theta rows into the individual-level parameters the likelihood needs."""
    theta = np.atleast_2d(theta)
    out, start = {}, 0
    for b in blocks:
        x = theta[:, start:start + b.dim]
        start += b.dim
        if b.name == "alpha":
            out["alpha"] = x
        elif b.name == "beta_star":
            out["beta_star"] = x
        elif b.name == "log_sigma2":
            out["sigma2"] = np.exp(x[:, 0])
        elif b.name == "log_sigma2_phi":
            out["sigma2_phi"] = np.exp(x[:, 0])
        else:
            out[b.name[2:]] = vec_to_cov(x)
    return out


class _Groups:
    """Segment sums and broadcasts over one level's groups, with a draw axis."""

    def __init__(self, idx, n_groups):
        self.idx = idx
        self.sorted = bool(np.all(np.diff(idx) >= 0))
        self.order = None if self.sorted else np.argsort(idx, kind="stable")
        sorted_idx = idx if self.sorted else idx[self.order]
        self.starts = np.r_[0, np.flatnonzero(np.diff(sorted_idx)) + 1]
        if self.starts.size != n_groups:
            raise ValueError("group codes are not dense")
        self.counts = np.diff(np.r_[self.starts, idx.size])

    def sum(self, x):
        if self.sorted:
            return np.add.reduceat(x, self.starts, axis=1)
        return np.add.reduceat(np.take(x, self.order, axis=1), self.starts, axis=1)

    def spread(self, x):
        """Group values (K, G, ...) broadcast to observations (K, n, ...)."""
        if self.sorted:
            return np.repeat(x, self.counts, axis=1)
        return np.take(x, self.idx, axis=1)


def _pair_logprior(x, cov):
    """log N(x; 0, cov) for x (K, G, 2) and cov (K, 2, 2)."""
    a, b, d = cov[:, 0, 0, None], cov[:, 1, 0, None], cov[:, 1, 1, None]
    det = a * d - b * b
    q = (d * x[..., 0] ** 2 - 2 * b * x[..., 0] * x[..., 1] + a * x[..., 1] ** 2) / det
    return -0.5 * q - 0.5 * np.log(det) - LOG_2PI


class _Recovery:
    """Vectorised inner sampler: one independent chain per selected draw."""

    def __init__(self, lay: Layout, omega: dict, variant: ModelVariant, rng):
        # nested levels become contiguous once observations are sorted by location
        perm = np.argsort(lay.lam_idx, kind="stable")
        lay = replace(lay, t=lay.t[perm], y=lay.y[perm], censored=lay.censored[perm],
                      gamma_idx=lay.gamma_idx[perm], eta_idx=lay.eta_idx[perm], lam_idx=lay.lam_idx[perm],
                      phi_idx=lay.phi_idx[perm])
        variant = ModelVariant(variant)
        self.lay, self.om, self.variant, self.rng = lay, omega, variant, rng
        self.link = variant.has_variance_link
        if self.link:
            self.bs0, self.bs1 = omega["beta_star"][:, 0:1], omega["beta_star"][:, 1:2]
        else:
            self.inv_sd = 1.0 / np.sqrt(omega["sigma2"])[:, None]
        self.k = omega["alpha"].shape[0]
        self.cc = np.flatnonzero(lay.censored)
        self.groups = {"gamma": _Groups(lay.gamma_idx, lay.n_gamma), "eta": _Groups(lay.eta_idx, lay.n_eta),
                       "lambda": _Groups(lay.lam_idx, lay.n_lam)}
        self.blocks = ["gamma", "eta", "lambda"]
        if variant.has_visit_effect:
            self.groups["phi"] = _Groups(lay.phi_idx, lay.n_phi)
            self.blocks.append("phi")
            self.phi_scale = np.sqrt(omega["sigma2_phi"])[:, None]
        k = self.k
        self.eff = {"gamma": np.zeros((k, lay.n_gamma, 2)), "eta": np.zeros((k, lay.n_eta, 2)),
                    "lambda": np.zeros((k, lay.n_lam, 2))}
        if variant.has_visit_effect:
            self.eff["phi"] = np.zeros((k, lay.n_phi))
        self.base = omega["alpha"][:, 0:1] + omega["alpha"][:, 1:2] * lay.t
        g_pos = {key: j for j, key in enumerate(lay.gamma_keys)}
        e_pos = {key: j for j, key in enumerate(lay.eta_keys)}
        self.parent = {"eta": ("gamma", np.array([g_pos[key[0]] for key in lay.eta_keys], dtype=np.intp)),
                       "lambda": ("eta", np.array([e_pos[key[:2]] for key in lay.lam_keys], dtype=np.intp))}
        self.inv_cov = {b: np.linalg.inv(omega[b]) for b in ("gamma", "eta", "lambda")}

    def mu(self):
        e = self.eff
        return self.lay.mu(self.om["alpha"], e["gamma"], e["eta"], e["lambda"], e.get("phi"))

    def sd(self, mu):
        return _sd(mu, self.variant, self.om.get("beta_star"), self.om.get("sigma2"))

    def loglik(self, mu):
        if self.link:
            log_sd = self.bs0 + self.bs1 * mu
            inv_sd = np.exp(-log_sd)
        else:
            log_sd, inv_sd = -np.log(self.inv_sd), self.inv_sd
        z = (self.lay.y - mu) * inv_sd
        ll = -0.5 * z * z - log_sd - 0.5 * LOG_2PI
        if self.cc.size:
            inv_c = inv_sd[:, self.cc] if self.link else inv_sd
            ll[:, self.cc] = special.log_ndtr(-mu[:, self.cc] * inv_c)
        return ll

    def logprior(self, block, x):
        if block == "phi":
            return logpdf_t3(x, 0.0, self.phi_scale)
        return _pair_logprior(x, self.om[block])

    def _delta(self, block, d):
        g = self.groups[block]
        if block == "phi":
            return g.spread(d)
        d = g.spread(d)
        return d[..., 0] + d[..., 1] * self.lay.t

    def _precision(self, block, w):
        """Gaussian-approximate conditional precision per (draw, group)."""
        g = self.groups[block]
        t = self.lay.t
        if block == "phi":
            return g.sum(w) + 1.0 / (3.0 * self.om["sigma2_phi"][:, None])
        s0, s1, s2 = g.sum(w), g.sum(w * t), g.sum(w * t * t)
        inv = np.linalg.inv(self.om[block])
        p = np.empty(s0.shape + (2, 2))
        p[..., 0, 0] = s0 + inv[:, None, 0, 0]
        p[..., 0, 1] = p[..., 1, 0] = s1 + inv[:, None, 0, 1]
        p[..., 1, 1] = s2 + inv[:, None, 1, 1]
        return p

    def shift(self, block):
        """Exact Gibbs move of a common offset from each parent group to its children.

        Parent plus child is all the likelihood sees, so the offset's
        conditional involves the two normal priors alone.
        """
        up, pidx = self.parent[block]
        parent, child = self.eff[up], self.eff[block]
        n_par = parent.shape[1]
        a, b = self.inv_cov[up][:, None], self.inv_cov[block][:, None]
        n = np.bincount(pidx, minlength=n_par).astype(float)[None, :, None, None]
        csum = np.zeros_like(parent)
        np.add.at(csum, (slice(None), pidx), child)
        prec = a + n * b
        rhs = np.einsum("kgij,kgj->kgi", b, csum) - np.einsum("kgij,kgj->kgi", a, parent)
        cov = np.linalg.inv(prec)
        mean = np.einsum("kgij,kgj->kgi", cov, rhs)
        z = self.rng.standard_normal(mean.shape)
        d = mean + np.einsum("kgij,kgj->kgi", np.linalg.cholesky(cov), z)
        self.eff[up] = parent + d
        self.eff[block] = child - d[:, pidx]

    def initialize(self, passes):
        """Ridge-regularised least squares per block on the current residuals."""
        for _ in range(passes):
            for block in self.blocks:
                self.eff[block] = np.zeros_like(self.eff[block])
                mu = self.mu()
                w = 1.0 / self.sd(mu) ** 2
                r = w * (self.lay.y - mu)
                g = self.groups[block]
                p = self._precision(block, w)
                if block == "phi":
                    self.eff[block] = g.sum(r) / p
                else:
                    rhs = np.stack([g.sum(r), g.sum(r * self.lay.t)], axis=-1)
                    self.eff[block] = np.linalg.solve(p, rhs[..., None])[..., 0]

    def run(self, cfg: RecoveryConfig):
        rng = self.rng
        self.initialize(cfg.ridge_passes)
        mu = self.mu()
        ll = self.loglik(mu)
        w = 1.0 / self.sd(mu) ** 2
        chol, log_scale, acc = {}, {}, {}
        for block in self.blocks:
            p = self._precision(block, w)
            if block == "phi":
                chol[block] = 1.0 / np.sqrt(p)
                log_scale[block] = np.full(p.shape, np.log(2.38))
            else:
                chol[block] = np.linalg.cholesky(np.linalg.inv(p))
                log_scale[block] = np.full(p.shape[:-2], np.log(1.68))
            acc[block] = np.zeros(log_scale[block].shape)
        for it in range(cfg.iterations):
            for block in self.blocks:
                cur = self.eff[block]
                step = np.exp(log_scale[block])
                if block == "phi":
                    d = step * chol[block] * rng.standard_normal(cur.shape)
                else:
                    d = step[..., None] * np.einsum("kgij,kgj->kgi", chol[block], rng.standard_normal(cur.shape))
                prop = cur + d
                mu_new = mu + self._delta(block, d)
                ll_new = self.loglik(mu_new)
                g = self.groups[block]
                log_r = g.sum(ll_new - ll) + self.logprior(block, prop) - self.logprior(block, cur)
                ok = np.log(rng.random(log_r.shape)) < log_r
                self.eff[block] = np.where(ok[..., None] if block != "phi" else ok, prop, cur)
                ok_obs = g.spread(ok)
                mu = np.where(ok_obs, mu_new, mu)
                ll = np.where(ok_obs, ll_new, ll)
                acc[block] += ok
            self.shift("eta")
            self.shift("lambda")
            if it < cfg.adapt_until and (it + 1) % cfg.adapt_window == 0:
                for block in self.blocks:
                    rate = acc[block] / cfg.adapt_window
                    log_scale[block] += np.where(rate < 0.2, -0.4, np.where(rate > 0.5, 0.4, 0.0))
                    acc[block][:] = 0.0
        return self.eff, np.isfinite(ll.sum(axis=1))


def recover_random_effects(i, stage2: Stage2Result, data: IndividualData, cfg: RecoveryConfig | None = None,
                           rng=None, draw_index=None) -> RecoveredEffects:
    """Sample one individual's random effects given each selected stage-2 draw.

    ``i`` is the individual's position in ``stage2.individuals`` or its id.
    ``draw_index`` indexes the concatenated retained stage-2 iterations and
    defaults to ``cfg.n_draws`` evenly strided positions.
    """
    cfg = cfg or RecoveryConfig()
    if not isinstance(i, (int, np.integer)) or i not in range(len(stage2.individuals)):
        i = stage2.individuals.index(i)
    ind = stage2.individuals[i]
    theta = stage2.theta_draws(i)
    if draw_index is None:
        draw_index = select_draws(theta.shape[0], cfg.n_draws)
    draw_index = np.asarray(draw_index)
    omega = omega_from_theta(theta[draw_index], stage2.blocks)
    sampler = _Recovery(data.layout, omega, stage2.variant, rng)
    eff, finite = sampler.run(cfg)
    skipped = [int(k) for k in draw_index[~finite]]
    if skipped:
        warnings.warn(f"individual {ind}: {len(skipped)} inner chains diverged and were skipped", stacklevel=2)
    keep = finite
    return RecoveredEffects(
        ind, draw_index[keep], {k: v[keep] for k, v in omega.items()},
        eff["gamma"][keep], eff["eta"][keep], eff["lambda"][keep],
        eff["phi"][keep] if "phi" in eff else None, skipped)


def recover_all(stage2: Stage2Result, datasets, cfg: RecoveryConfig | None, seed) -> dict:
    """Recover every individual, each with its own stream keyed by individual id."""
    from .distributions import RngStream, stream_key

    cfg = cfg or RecoveryConfig()
    by_id = {d.individual_id: d for d in datasets}
    out = {}
    for j, ind in enumerate(stage2.individuals):
        if ind not in by_id:
            raise KeyError(f"no data for individual {ind}")
        rng = RngStream(seed, stream_key(f"recover-{ind}")).generator()
        log.info("recovery: individual %s (%d/%d)", ind, j + 1, len(stage2.individuals))
        out[ind] = recover_random_effects(j, stage2, by_id[ind], cfg, rng)
    return out


def write_recovered(recovered: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ind, r in recovered.items():
        arrays = {"draw_index": r.draw_index, "gamma": r.gamma, "eta": r.eta, "lam": r.lam,
                  **{f"omega_{k}": v for k, v in r.omega.items()}}
        if r.phi is not None:
            arrays["phi"] = r.phi
        np.savez(directory / f"recovered_{ind}.npz", **arrays)


def read_recovered(directory) -> dict:
    out = {}
    for p in sorted(Path(directory).glob("recovered_*.npz")):
        ind = p.stem.removeprefix("recovered_")
        with np.load(p) as z:
            omega = {k.removeprefix("omega_"): z[k] for k in z.files if k.startswith("omega_")}
            out[ind] = RecoveredEffects(ind, z["draw_index"], omega, z["gamma"], z["eta"], z["lam"],
                                        z["phi"] if "phi" in z.files else None)
    return out


# ---------------------------------------------------------------------------
# DIC
# ---------------------------------------------------------------------------

def deviance_draws(lay: Layout, omega: dict, gamma, eta, lam, phi, variant) -> np.ndarray:
    """-2 * exact censored log-likelihood, one value per draw."""
    variant = ModelVariant(variant)
    mu = lay.mu(omega["alpha"], gamma, eta, lam, phi if variant.has_visit_effect else None)
    sd = _sd(mu, variant, omega.get("beta_star"), omega.get("sigma2"))
    z = (lay.y - mu) / sd
    ll = np.where(lay.censored, special.log_ndtr(-mu / sd), -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI)
    return -2.0 * ll.sum(axis=-1)


@dataclass
class DicReport:
    dbar: float
    dhat: float

    @property
    def p_D(self) -> float:
        return self.dbar - self.dhat

    @property
    def dic(self) -> float:
        return self.dbar + self.p_D

    def as_dict(self) -> dict:
        return {"dbar": self.dbar, "dhat": self.dhat, "p_D": self.p_D, "dic": self.dic}

    def to_csv(self, path, label: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "dbar", "dhat", "p_D", "dic"])
            w.writerow([label] + [format(v, ".10g") for v in self.as_dict().values()])

    def text(self, label: str = "") -> str:
        head = f"DIC {label}".rstrip()
        return f"{head}: {self.dic:.2f} (Dbar {self.dbar:.2f}, Dhat {self.dhat:.2f}, pD {self.p_D:.2f})"


def compute_dic(recovered: dict, datasets, variant) -> DicReport:
    """DIC from recovered effects; every individual must use the same draws."""
    variant = ModelVariant(variant)
    by_id = {d.individual_id: d for d in datasets}
    ref = None
    total = None
    dhat = 0.0
    for ind, r in recovered.items():
        if ref is None:
            ref = r.draw_index
        elif r.draw_index.shape != ref.shape or np.any(r.draw_index != ref):
            raise ValueError(f"draw indices of individual {ind} do not match the others")
        lay = by_id[ind].layout
        dev = deviance_draws(lay, r.omega, r.gamma, r.eta, r.lam, r.phi, variant)
        total = dev if total is None else total + dev
        om_bar = {k: v.mean(axis=0, keepdims=True) for k, v in r.omega.items()
                  if k in ("alpha", "beta_star", "sigma2")}
        phi_bar = None if r.phi is None else r.phi.mean(axis=0, keepdims=True)
        dhat += float(deviance_draws(lay, om_bar, r.gamma.mean(axis=0, keepdims=True),
                                     r.eta.mean(axis=0, keepdims=True), r.lam.mean(axis=0, keepdims=True),
                                     phi_bar, variant)[0])
    if total is None:
        raise ValueError("no recovered effects")
    return DicReport(float(total.mean()), dhat)
