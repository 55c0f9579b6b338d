"""Random-number and density primitives shared by both estimation stages.

All samplers take an explicit ``numpy.random.Generator``. Reproducible
streams are built with :class:`RngStream`, keyed by a run seed and a
per-worker stream id (one stream per individual per chain).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special

LOG_2PI = np.log(2.0 * np.pi)

#: Degrees of freedom of the global-visit-effect t-distribution.
GVE_DF = 3.0

#: Below this standardized bound the truncated normal uses the tail sampler.
TAIL_THRESHOLD = -6.0


class CholeskyError(ValueError):
    """Raised when a matrix is not symmetric positive definite."""


@dataclass(frozen=True)
class RngStream:
    """Identifies one reproducible random stream.

    Identical ``(seed, stream_id)`` pairs always yield identical draw
    sequences, independent of process or scheduling.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, sub_id: int) -> "RngStream":
        """Derive a new stream, e.g. for chain ``sub_id`` of this worker."""
        key = zlib.crc32(f"{self.stream_id}:{sub_id}".encode())
        return RngStream(self.seed, key)


def stream_key(label) -> int:
    """Stable 32-bit stream id for an individual identifier."""
    return zlib.crc32(str(label).encode("utf-8"))


# ---------------------------------------------------------------------------
# Normal CDF helpers
# ---------------------------------------------------------------------------

def norm_cdf(x):
    return special.ndtr(x)


def norm_logcdf(x):
    """log Phi(x), accurate far into the lower tail."""
    return special.log_ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - 0.5 * LOG_2PI)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def _standard_upper_tail(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw Z ~ N(0, 1) conditioned on Z > a, for a > 0 (exponential rejection)."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    rate = 0.5 * (a + np.sqrt(a * a + 4.0))
    todo = np.arange(a.size)
    af, rf = a.ravel(), rate.ravel()
    flat = out.ravel()
    while todo.size:
        x = af[todo] + rng.exponential(size=todo.size) / rf[todo]
        u = rng.random(todo.size)
        ok = np.log(u) <= -0.5 * (x - rf[todo]) ** 2
        flat[todo[ok]] = x[ok]
        todo = todo[~ok]
    return flat.reshape(a.shape)


def sample_truncated_normal(mu, sd, upper, rng: np.random.Generator):
    """Draw from Normal(mu, sd) conditioned on the value being below ``upper``.

    Broadcasts over array arguments. Uses the inverse CDF on the log scale
    unless the standardized bound is below ``TAIL_THRESHOLD``, in which case
    an exponential-proposal rejection sampler handles the far tail.
    """
    mu, sd, upper = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sd, dtype=float), np.asarray(upper, dtype=float)
    )
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    b = (upper - mu) / sd
    z = np.empty(b.shape)
    tail = b < TAIL_THRESHOLD
    body = ~tail
    if np.any(body):
        bb = b[body]
        u = rng.random(bb.shape)
        # P(Z <= z) = u * Phi(b), evaluated in logs for small Phi(b)
        logp = np.log(u) + special.log_ndtr(bb)
        zb = special.ndtri_exp(logp)
        z[body] = np.minimum(zb, bb)
    if np.any(tail):
        z[tail] = -_standard_upper_tail(-b[tail], rng)
    out = mu + sd * z
    return out if out.ndim else float(out)


def cholesky2(matrix) -> np.ndarray:
    """Lower-triangular Cholesky factor of a 2x2 SPD matrix.

    Raises :class:`CholeskyError` if the matrix is not symmetric or a
    leading minor is not above 1e-12.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape != (2, 2):
        raise CholeskyError(f"expected a 2x2 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise CholeskyError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(m))))
    if abs(m[0, 1] - m[1, 0]) > 1e-12 * scale:
        raise CholeskyError("matrix is not symmetric")
    a = m[0, 0]
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if a <= 1e-12 or det <= 1e-12:
        raise CholeskyError("matrix is not positive definite")
    l11 = np.sqrt(a)
    l21 = m[1, 0] / l11
    l22 = np.sqrt(m[1, 1] - l21 * l21)
    return np.array([[l11, 0.0], [l21, l22]])


def cholesky2_batch(m: np.ndarray) -> np.ndarray:
    """Vectorised 2x2 Cholesky over a ``(..., 2, 2)`` stack (no validation)."""
    l11 = np.sqrt(m[..., 0, 0])
    l21 = m[..., 1, 0] / l11
    l22 = np.sqrt(m[..., 1, 1] - l21 * l21)
    out = np.zeros(m.shape)
    out[..., 0, 0] = l11
    out[..., 1, 0] = l21
    out[..., 1, 1] = l22
    return out


def chol_to_vec(chol: np.ndarray) -> np.ndarray:
    """Pack lower-triangular 2x2 factors as ``(C1, C2, C3) = (L11, L21, L22)``."""
    chol = np.asarray(chol)
    return np.stack([chol[..., 0, 0], chol[..., 1, 0], chol[..., 1, 1]], axis=-1)


def vec_to_chol(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    out = np.zeros(vec.shape[:-1] + (2, 2))
    out[..., 0, 0] = vec[..., 0]
    out[..., 1, 0] = vec[..., 1]
    out[..., 1, 1] = vec[..., 2]
    return out


def vec_to_cov(vec) -> np.ndarray:
    """Covariance ``L L^T`` from packed Cholesky elements."""
    l = vec_to_chol(vec)
    return l @ np.swapaxes(l, -1, -2)


def sample_mvn2(mean, cov, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``mean + chol(cov) @ z`` for a bivariate normal.

    ``cov`` may be a 2x2 array or a :class:`vfbayes.model.CovarianceSpec`.
    """
    chol = getattr(cov, "chol", None)
    if chol is None:
        chol = cholesky2(cov)
    mean = np.asarray(mean, dtype=float)
    shape = (2,) if size is None else (size, 2)
    z = rng.standard_normal(shape)
    return mean + z @ chol.T


def sample_inverse_wishart(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Draw from IW(df, scale) via the Bartlett decomposition of its inverse."""
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df <= p - 1:
        raise ValueError(f"df must exceed {p - 1}, got {df}")
    # Sigma^-1 ~ Wishart(df, scale^-1)
    lw = np.linalg.cholesky(np.linalg.inv(scale))
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    il = np.tril_indices(p, -1)
    a[il] = rng.standard_normal(len(il[0]))
    t = lw @ a
    tinv = np.linalg.inv(t)
    sigma = tinv.T @ tinv
    return 0.5 * (sigma + sigma.T)


def sample_inverse_wishart2(df: float, scale, rng: np.random.Generator) -> np.ndarray:
    """2x2 inverse-Wishart draw; same construction as the general sampler, in closed form."""
    s = np.asarray(scale, dtype=float)
    if s.shape != (2, 2):
        raise ValueError("scale must be 2x2")
    if df < 2:
        raise ValueError("df must be at least the dimension (2)")
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    # inverse scale and its Cholesky factor
    q00, q01, q11 = s[1, 1] / det, -s[0, 1] / det, s[0, 0] / det
    l11 = np.sqrt(q00)
    l21 = q01 / l11
    l22 = np.sqrt(q11 - l21 * l21)
    c = np.sqrt(rng.chisquare(df - np.arange(2)))
    n = rng.standard_normal(1)[0]
    # T = L A with A = [[c0, 0], [n, c1]]
    t11 = l11 * c[0]
    t21 = l21 * c[0] + l22 * n
    t22 = l22 * c[1]
    i11, i22 = 1.0 / t11, 1.0 / t22
    i21 = -t21 * i11 * i22
    # Sigma = T^-T T^-1
    s00 = i11 * i11 + i21 * i21
    s01 = i21 * i22
    s11 = i22 * i22
    return np.array([[s00, s01], [s01, s11]])


def sample_inverse_gamma(shape: float, rate: float, rng: np.random.Generator, size=None):
    return rate / rng.gamma(shape, 1.0, size=size)


def sample_gve_t(sigma_phi: float, rng: np.random.Generator, size=None):
    """Draw visit effects from t(0, sigma_phi^2, 3) as ``sigma_phi * z / sqrt(w / 3)``."""
    if sigma_phi <= 0:
        raise ValueError("sigma_phi must be positive")
    z = rng.standard_normal(size)
    w = rng.chisquare(GVE_DF, size)
    return sigma_phi * z / np.sqrt(w / GVE_DF)


def sample_mixing_weights(phi, sigma2_phi: float, rng: np.random.Generator):
    """Gamma full conditional of the scale-mixture weights behind t(0, s2, 3)."""
    phi = np.asarray(phi, dtype=float)
    shape = 0.5 * (GVE_DF + 1.0)
    rate = 0.5 * (GVE_DF + phi * phi / sigma2_phi)
    return rng.gamma(shape, 1.0, size=phi.shape) / rate


# ---------------------------------------------------------------------------
# Log densities
# ---------------------------------------------------------------------------

def logpdf_normal(x, mean=0.0, sd=1.0):
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI


def logpdf_mvn2(x, mean, cov):
    chol = getattr(cov, "chol", None)
    if chol is None:
        chol = cholesky2(cov)
    return logpdf_mvn(x, mean, chol=chol)


def logpdf_mvn(x, mean, cov=None, chol=None):
    """Multivariate normal log density, vectorised over leading axes of ``x``."""
    if chol is None:
        chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    d = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    p = chol.shape[-1]
    sol = np.linalg.solve(chol, d.reshape(-1, p).T).T.reshape(d.shape)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * np.sum(sol * sol, axis=-1) - 0.5 * logdet - 0.5 * p * LOG_2PI


def logpdf_inverse_gamma(x, shape: float, rate: float):
    if shape <= 0 or rate <= 0:
        raise ValueError("shape and rate must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = shape * np.log(rate) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x
    return np.where(x > 0, out, -np.inf)


def logpdf_t3(x, loc=0.0, scale=1.0):
    """Log density of the generalized t with 3 df, location ``loc``, scale ``scale``."""
    if np.any(np.asarray(scale) <= 0):
        raise ValueError("scale must be positive")
    nu = GVE_DF
    z = (np.asarray(x, dtype=float) - loc) / scale
    return (
        special.gammaln(0.5 * (nu + 1.0))
        - special.gammaln(0.5 * nu)
        - 0.5 * np.log(nu * np.pi)
        - np.log(scale)
        - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)
    )


def logpdf_inverse_wishart(x, df: float, scale) -> float:
    x = np.asarray(x, dtype=float)
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df <= p - 1:
        raise ValueError(f"df must exceed {p - 1}")
    _, logdet_s = np.linalg.slogdet(scale)
    sign, logdet_x = np.linalg.slogdet(x)
    if sign <= 0:
        return -np.inf
    return float(
        0.5 * df * logdet_s
        - 0.5 * df * p * np.log(2.0)
        - special.multigammaln(0.5 * df, p)
        - 0.5 * (df + p + 1.0) * logdet_x
        - 0.5 * np.trace(scale @ np.linalg.inv(x))
    )


def log_jacobian_chol2(vec) -> np.ndarray:
    """log |d Sigma / d L| for Sigma = L L^T (2x2), i.e. log(4 L11^2 L22)."""
    vec = np.asarray(vec, dtype=float)
    return np.log(4.0) + 2.0 * np.log(vec[..., 0]) + np.log(vec[..., 2])


def logpdf_iw2_chol(vec, df: float, scale) -> np.ndarray:
    """IW(df, scale) log density pushed to packed Cholesky coordinates.

    Vectorised over leading axes of ``vec`` (shape ``(..., 3)``). Entries with
    a non-positive diagonal get ``-inf``.
    """
    vec = np.asarray(vec, dtype=float)
    scale = np.asarray(scale, dtype=float)
    l11, l21, l22 = vec[..., 0], vec[..., 1], vec[..., 2]
    valid = (l11 > 0) & (l22 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logdet = 2.0 * (np.log(np.abs(l11)) + np.log(np.abs(l22)))
        # tr(S Sigma^-1) with Sigma^-1 = L^-T L^-1
        i11 = 1.0 / l11
        i22 = 1.0 / l22
        i21 = -l21 / (l11 * l22)
        # rows of L^-1: [i11, 0], [i21, i22]; Sigma^-1 = L^-T L^-1
        p00 = i11 * i11 + i21 * i21
        p01 = i21 * i22
        p11 = i22 * i22
        tr = scale[0, 0] * p00 + 2.0 * scale[0, 1] * p01 + scale[1, 1] * p11
        _, logdet_s = np.linalg.slogdet(scale)
        out = (
            0.5 * df * logdet_s
            - df * np.log(2.0)
            - special.multigammaln(0.5 * df, 2)
            - 0.5 * (df + 3.0) * logdet
            - 0.5 * tr
            + log_jacobian_chol2(np.abs(vec))
        )
    return np.where(valid, out, -np.inf)
