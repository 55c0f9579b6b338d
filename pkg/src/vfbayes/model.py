"""Domain types and deterministic model functions for the 4-level hierarchy.

An observation is indexed by (individual, eye, hemifield, location, visit).
The latent sensitivity follows

    y = (b0 + a0 + g0 + e0 + l0) + (b1 + a1 + g1 + e1 + l1) * years [+ phi] + eps

with ``eps ~ N(0, sd^2)``; the recorded value is ``max(y, 0)``. In the
variance-link variant ``log sd = beta_star0 + beta_star1 * mu``.

The scalar functions here are the reference implementations. Samplers work
on the vectorised :class:`Layout` view of an individual, whose results are
checked against these functions in the test-suite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .distributions import LOG_2PI, cholesky2, norm_logcdf

N_HEMIFIELDS = 2
N_LOCATIONS = 26


class StructuralError(KeyError):
    """A random-effect entry required by an observation is missing."""


class ModelVariant(enum.IntEnum):
    """Cumulative model variants: 1 base, 2 adds visit effects, 3 adds the variance link."""

    MODEL1 = 1
    MODEL2 = 2
    MODEL3 = 3

    @property
    def has_visit_effect(self) -> bool:
        return self >= ModelVariant.MODEL2

    @property
    def has_variance_link(self) -> bool:
        return self == ModelVariant.MODEL3

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        return cls(int(str(value).lower().replace("model", "")))


def censor(y):
    """Left-censor at the instrument floor: ``y`` if ``y >= 0`` else 0."""
    if np.ndim(y) == 0:
        return float(y) if y >= 0 else 0.0
    y = np.asarray(y, dtype=float)
    return np.where(y >= 0, y, 0.0)


@dataclass(frozen=True)
class Observation:
    individual: object
    eye: int
    hemifield: int
    location: int
    visit: int
    years: float
    observed_db: float
    censored: bool

    def __post_init__(self):
        if self.eye not in (1, 2):
            raise ValueError(f"eye must be 1 or 2, got {self.eye}")
        if self.hemifield not in (1, 2):
            raise ValueError(f"hemifield must be 1 or 2, got {self.hemifield}")
        if not 1 <= self.location <= N_LOCATIONS:
            raise ValueError(f"location must be in 1..{N_LOCATIONS}, got {self.location}")
        if self.years < 0:
            raise ValueError("years must be nonnegative")
        if self.censored and self.observed_db != 0:
            raise ValueError("censored observations must be recorded at 0 dB")
        if not self.censored and self.observed_db < 0:
            raise ValueError("observed sensitivity must be nonnegative")

    @property
    def key(self):
        return (self.individual, self.eye, self.hemifield, self.location, self.visit)


@dataclass
class IndividualData:
    """All observations of one individual, ordered."""

    individual_id: object
    observations: list[Observation]

    def __post_init__(self):
        seen = set()
        for ob in self.observations:
            if ob.individual != self.individual_id:
                raise ValueError("observation belongs to a different individual")
            if ob.key in seen:
                raise ValueError(f"duplicate observation {ob.key}")
            seen.add(ob.key)

    def __len__(self):
        return len(self.observations)

    @property
    def visit_times(self) -> dict[int, list[float]]:
        out: dict[int, set] = {}
        for ob in self.observations:
            out.setdefault(ob.eye, set()).add(ob.years)
        return {e: sorted(v) for e, v in sorted(out.items())}

    @property
    def n_visits(self) -> int:
        return len({ob.visit for ob in self.observations})

    @cached_property
    def layout(self) -> "Layout":
        return Layout.from_observations(self.observations)


@dataclass(frozen=True)
class FixedEffects:
    beta0: float = 0.0
    beta1: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.beta0) and np.isfinite(self.beta1)):
            raise ValueError("fixed effects must be finite")


@dataclass(frozen=True)
class VarianceParams:
    beta_star0: float | None = None
    beta_star1: float | None = None
    sigma2: float | None = None


@dataclass
class CovarianceSpec:
    """A 2x2 SPD covariance together with its lower Cholesky factor."""

    matrix: np.ndarray
    chol: np.ndarray

    @classmethod
    def from_matrix(cls, matrix) -> "CovarianceSpec":
        m = np.asarray(matrix, dtype=float)
        return cls(m, cholesky2(m))

    @classmethod
    def from_chol(cls, chol) -> "CovarianceSpec":
        c = np.asarray(chol, dtype=float)
        if c[0, 0] <= 0 or c[1, 1] <= 0 or c[0, 1] != 0:
            raise ValueError("Cholesky factor must be lower-triangular with positive diagonal")
        return cls(c @ c.T, c)


@dataclass(frozen=True)
class GveScale:
    sigma2_phi: float

    def __post_init__(self):
        if not self.sigma2_phi > 0:
            raise ValueError("sigma2_phi must be positive")


@dataclass
class RandomEffects:
    """Random effects keyed by their position in the hierarchy.

    alpha: ``{i: (a0, a1)}``; gamma: ``{(i, e): ...}``; eta: ``{(i, e, h): ...}``;
    lam: ``{(i, e, h, l): ...}``; phi: ``{(i, e, visit): value}``.
    """

    alpha: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)
    lam: dict = field(default_factory=dict)
    phi: dict = field(default_factory=dict)

    @classmethod
    def zeros_for(cls, data: IndividualData) -> "RandomEffects":
        re = cls()
        for ob in data.observations:
            i, e, h, l, t = ob.key
            re.alpha[i] = (0.0, 0.0)
            re.gamma[(i, e)] = (0.0, 0.0)
            re.eta[(i, e, h)] = (0.0, 0.0)
            re.lam[(i, e, h, l)] = (0.0, 0.0)
            re.phi[(i, e, t)] = 0.0
        return re


@dataclass
class ParameterState:
    """Everything needed to evaluate the likelihood of one or more individuals."""

    fixed: FixedEffects
    variance: VarianceParams
    effects: RandomEffects


def _lookup(table: dict, key, name: str):
    try:
        return table[key]
    except KeyError:
        raise StructuralError(f"missing {name} effect for {key}") from None


def linear_predictor(fixed: FixedEffects, effects: RandomEffects, obs_index, years: float,
                     variant: ModelVariant) -> float:
    """Mean of the latent sensitivity for one observation.

    ``obs_index`` is an :class:`Observation` or an ``(i, e, h, l, visit)`` tuple.
    """
    key = obs_index.key if isinstance(obs_index, Observation) else tuple(obs_index)
    i, e, h, l, t = key
    a = _lookup(effects.alpha, i, "alpha")
    g = _lookup(effects.gamma, (i, e), "gamma")
    et = _lookup(effects.eta, (i, e, h), "eta")
    lm = _lookup(effects.lam, (i, e, h, l), "lambda")
    intercept = fixed.beta0 + a[0] + g[0] + et[0] + lm[0]
    slope = fixed.beta1 + a[1] + g[1] + et[1] + lm[1]
    mu = intercept + slope * years
    if ModelVariant(variant).has_visit_effect:
        mu += _lookup(effects.phi, (i, e, t), "phi")
    return mu


def residual_sd(mu, var_params: VarianceParams, variant: ModelVariant):
    """Residual standard deviation; mean-dependent in the variance-link variant."""
    if ModelVariant(variant).has_variance_link:
        return np.exp(var_params.beta_star0 + var_params.beta_star1 * np.asarray(mu, dtype=float))
    if var_params.sigma2 is None or var_params.sigma2 <= 0:
        raise ValueError("sigma2 must be set and positive for Models 1-2")
    return np.sqrt(var_params.sigma2) * np.ones_like(np.asarray(mu, dtype=float))


def loglik_values(y, censored, mu, sd):
    """Vectorised observation log-likelihood (exact Phi term for censored points)."""
    y = np.asarray(y, dtype=float)
    censored = np.asarray(censored, dtype=bool)
    z = (y - mu) / sd
    dens = -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI
    cens = norm_logcdf(-mu / sd)
    return np.where(censored, cens, dens)


def loglik_observation(obs: Observation, mu: float, sd: float) -> float:
    if not sd > 0:
        raise ValueError("sd must be positive")
    return float(loglik_values(obs.observed_db, obs.censored, mu, sd))


def loglik_individual(data: IndividualData, state: ParameterState, variant: ModelVariant) -> float:
    total = 0.0
    for ob in data.observations:
        mu = linear_predictor(state.fixed, state.effects, ob, ob.years, variant)
        sd = float(residual_sd(mu, state.variance, variant))
        total += loglik_observation(ob, mu, sd)
    return total


# ---------------------------------------------------------------------------
# Vectorised layout
# ---------------------------------------------------------------------------

@dataclass
class Layout:
    """Integer-coded arrays for one individual's observations.

    Group indices are dense, 0-based, and cover only the units present in
    the data (an eye with no observations gets no gamma slot).
    """

    t: np.ndarray
    y: np.ndarray
    censored: np.ndarray
    gamma_idx: np.ndarray
    eta_idx: np.ndarray
    lam_idx: np.ndarray
    phi_idx: np.ndarray
    gamma_keys: list
    eta_keys: list
    lam_keys: list
    phi_keys: list

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Layout":
        def codes(keys):
            uniq = sorted(set(keys))
            pos = {k: j for j, k in enumerate(uniq)}
            return np.array([pos[k] for k in keys], dtype=np.intp), uniq

        g_idx, g_keys = codes([ob.eye for ob in observations])
        e_idx, e_keys = codes([(ob.eye, ob.hemifield) for ob in observations])
        l_idx, l_keys = codes([(ob.eye, ob.hemifield, ob.location) for ob in observations])
        p_idx, p_keys = codes([(ob.eye, ob.visit) for ob in observations])
        return cls(
            t=np.array([ob.years for ob in observations], dtype=float),
            y=np.array([ob.observed_db for ob in observations], dtype=float),
            censored=np.array([ob.censored for ob in observations], dtype=bool),
            gamma_idx=g_idx, eta_idx=e_idx, lam_idx=l_idx, phi_idx=p_idx,
            gamma_keys=g_keys, eta_keys=e_keys, lam_keys=l_keys, phi_keys=p_keys,
        )

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def n_gamma(self) -> int:
        return len(self.gamma_keys)

    @property
    def n_eta(self) -> int:
        return len(self.eta_keys)

    @property
    def n_lam(self) -> int:
        return len(self.lam_keys)

    @property
    def n_phi(self) -> int:
        return len(self.phi_keys)

    def mu(self, alpha, gamma, eta, lam, phi=None):
        """Linear predictor for every observation.

        All effect arrays may carry a leading batch axis (e.g. draws); the
        result then has shape ``(batch, n)``.
        """
        alpha = np.asarray(alpha)
        icpt = (alpha[..., 0:1] + gamma[..., self.gamma_idx, 0] + eta[..., self.eta_idx, 0]
                + lam[..., self.lam_idx, 0])
        slope = (alpha[..., 1:2] + gamma[..., self.gamma_idx, 1] + eta[..., self.eta_idx, 1]
                 + lam[..., self.lam_idx, 1])
        out = icpt + slope * self.t
        if phi is not None:
            out = out + phi[..., self.phi_idx]
        return out

    def effects_to_dict(self, individual, alpha, gamma, eta, lam, phi=None) -> RandomEffects:
        """Convert layout arrays into a keyed :class:`RandomEffects`."""
        re = RandomEffects()
        re.alpha[individual] = tuple(map(float, alpha))
        for j, e in enumerate(self.gamma_keys):
            re.gamma[(individual, e)] = tuple(map(float, gamma[j]))
        for j, (e, h) in enumerate(self.eta_keys):
            re.eta[(individual, e, h)] = tuple(map(float, eta[j]))
        for j, (e, h, l) in enumerate(self.lam_keys):
            re.lam[(individual, e, h, l)] = tuple(map(float, lam[j]))
        if phi is not None:
            for j, (e, t) in enumerate(self.phi_keys):
                re.phi[(individual, e, t)] = float(phi[j])
        return re
