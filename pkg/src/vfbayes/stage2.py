"""Stage 2: combine the per-individual pools into population estimates.

Each sweep (i) resamples every individual's parameter vector from its own
stage-1 pool with an independence Metropolis-Hastings step, then (ii) draws
the population means and (iii) the population covariances from their
conjugate full conditionals.

Because the proposal is the stage-1 posterior, the likelihood cancels from
the acceptance ratio and only ``p_population(theta) / p_stage1_prior(theta)``
remains. The per-individual variance parameters enter on the log scale.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import split_rhat, summarize_draws
from .distributions import (
    RngStream,
    logpdf_inverse_gamma,
    logpdf_iw2_chol,
    sample_inverse_gamma,
    sample_inverse_wishart,
    stream_key,
)
from .model import FixedEffects, ModelVariant
from .stage1 import IG_RATE, IG_SHAPE, IW_DF, IW_SCALE, PAIR_BLOCKS, PRIOR_VAR, SamplePool

log = logging.getLogger(__name__)

#: Vague normal hyperprior variance on every population mean.
HYPER_VAR = 1e8
#: Inverse-Wishart hyperprior scale multiplier (df equals the block dimension).
HYPER_IW_SCALE = 0.01
#: Inverse-gamma hyperprior on scalar population variances.
HYPER_IG = (0.001, 0.001)

INIT_RULES = ("min", "mean", "max")
REPORTED = ("beta0", "beta1", "beta_star0", "beta_star1", "sigma2", "sigma2_phi")
SMALL_POOL = 100


@dataclass(frozen=True)
class Block:
    name: str
    columns: tuple
    log_scale: bool = False

    @property
    def dim(self) -> int:
        return len(self.columns)


def theta_blocks(variant: ModelVariant) -> list[Block]:
    variant = ModelVariant(variant)
    blocks = [Block("alpha", ("alpha0", "alpha1"))]
    if variant.has_variance_link:
        blocks.append(Block("beta_star", ("beta_star0", "beta_star1")))
    for b in PAIR_BLOCKS:
        blocks.append(Block(f"c_{b}", tuple(f"c_{b}{r}" for r in (1, 2, 3))))
    if variant.has_visit_effect:
        blocks.append(Block("log_sigma2_phi", ("sigma2_phi",), log_scale=True))
    if not variant.has_variance_link:
        blocks.append(Block("log_sigma2", ("sigma2",), log_scale=True))
    return blocks


def _slices(blocks):
    out, start = {}, 0
    for b in blocks:
        out[b.name] = slice(start, start + b.dim)
        start += b.dim
    return out


def pool_theta(pool: SamplePool, blocks) -> np.ndarray:
    """Pool draws arranged block by block, variances on the log scale."""
    cols = []
    for b in blocks:
        for c in b.columns:
            v = pool.column(c)
            cols.append(np.log(v) if b.log_scale else v)
    return np.stack(cols, axis=1)


def stage1_logprior(theta, blocks) -> np.ndarray:
    """Stage-1 prior density of theta rows, in theta's own coordinates."""
    sl = _slices(blocks)
    out = np.zeros(theta.shape[:-1])
    for b in blocks:
        x = theta[..., sl[b.name]]
        if b.name in ("alpha", "beta_star"):
            out += np.sum(-0.5 * x * x / PRIOR_VAR - 0.5 * np.log(2 * np.pi * PRIOR_VAR), axis=-1)
        elif b.name.startswith("c_"):
            out += logpdf_iw2_chol(x, IW_DF, IW_SCALE)
        else:
            # inverse-gamma on the variance, Jacobian of the log transform
            out += logpdf_inverse_gamma(np.exp(x[..., 0]), IG_SHAPE, IG_RATE) + x[..., 0]
    return out


@dataclass
class PopulationState:
    """Population means and covariances of every theta block."""

    mean: dict
    cov: dict

    def copy(self) -> "PopulationState":
        return PopulationState({k: v.copy() for k, v in self.mean.items()},
                               {k: v.copy() for k, v in self.cov.items()})

    @property
    def beta(self) -> FixedEffects:
        return FixedEffects(*map(float, self.mean["alpha"]))

    @property
    def beta_star(self):
        return self.mean.get("beta_star")

    @property
    def Sigma_alpha(self):
        return self.cov["alpha"]

    @property
    def sigma2_phi_pop(self):
        m = self.mean.get("log_sigma2_phi")
        return None if m is None else float(np.exp(m[0]))

    @property
    def Sigma_phi(self):
        c = self.cov.get("log_sigma2_phi")
        return None if c is None else float(c[0, 0])

    @property
    def sigma2_pop(self):
        m = self.mean.get("log_sigma2")
        return None if m is None else float(np.exp(m[0]))

    def validate(self) -> None:
        for k, c in self.cov.items():
            if not np.all(np.linalg.eigvalsh(c) > 0):
                raise ValueError(f"population covariance {k} is not SPD")


@dataclass
class IndividualTheta:
    index: int
    values: np.ndarray


@dataclass
class Stage2Config:
    iterations: int = 4000
    burn_in: int = 2000
    chains: int = 3
    init_rule: tuple = INIT_RULES
    thin: int = 1
    mh_steps: int = 100

    def __post_init__(self):
        if not 2 <= self.chains <= len(INIT_RULES):
            raise ValueError("chains must be 2 or 3 (one distinct init rule per chain)")
        self.init_rule = tuple(self.init_rule)[: self.chains]
        if len(set(self.init_rule)) != self.chains or not set(self.init_rule) <= set(INIT_RULES):
            raise ValueError("init_rule must give a distinct min/mean/max rule per chain")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.mh_steps < 1:
            raise ValueError("mh_steps must be >= 1")


# ---------------------------------------------------------------------------
# Conjugate conditionals
# ---------------------------------------------------------------------------

def population_mean_conditional(thetas, cov, prior_var: float = HYPER_VAR):
    """Normal full conditional (mean, cov) of a population mean given theta_i ~ N(m, cov)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n, d = thetas.shape
    cov_inv = np.linalg.inv(np.asarray(cov, dtype=float).reshape(d, d))
    prec = n * cov_inv + np.eye(d) / prior_var
    post_cov = np.linalg.inv(prec)
    post_mean = post_cov @ (cov_inv @ thetas.sum(axis=0))
    return post_mean, 0.5 * (post_cov + post_cov.T)


def population_cov_conditional(thetas, mean):
    """Conjugate posterior parameters for a block covariance given its mean.

    Returns ``(df, scale)`` of an inverse-Wishart for vector blocks and
    ``(shape, rate)`` of an inverse-gamma for scalar blocks.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n, d = thetas.shape
    dev = thetas - np.asarray(mean, dtype=float)
    if d == 1:
        return HYPER_IG[0] + 0.5 * n, HYPER_IG[1] + 0.5 * float(np.sum(dev ** 2))
    return float(d + n), HYPER_IW_SCALE * np.eye(d) + dev.T @ dev


def update_population_means(state: PopulationState, thetas, blocks, rng) -> PopulationState:
    """Draw every block mean from its conjugate normal full conditional."""
    sl = _slices(blocks)
    new = state.copy()
    for b in blocks:
        m, c = population_mean_conditional(thetas[:, sl[b.name]], state.cov[b.name])
        new.mean[b.name] = m + np.linalg.cholesky(c) @ rng.standard_normal(b.dim)
    return new


def update_population_covariances(state: PopulationState, thetas, blocks, rng) -> PopulationState:
    """Draw every block covariance from its inverse-Wishart / inverse-gamma conditional."""
    sl = _slices(blocks)
    new = state.copy()
    for b in blocks:
        a, s = population_cov_conditional(thetas[:, sl[b.name]], state.mean[b.name])
        if b.dim == 1:
            new.cov[b.name] = np.array([[float(sample_inverse_gamma(a, s, rng))]])
        else:
            new.cov[b.name] = sample_inverse_wishart(a, s, rng)
    return new


def population_logpdf(state: PopulationState, theta, blocks) -> np.ndarray:
    """log p(theta | population means, covariances), vectorised over rows."""
    sl = _slices(blocks)
    theta = np.asarray(theta, dtype=float)
    out = np.zeros(theta.shape[:-1])
    for b in blocks:
        x = theta[..., sl[b.name]] - state.mean[b.name]
        cov = state.cov[b.name]
        prec = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        out += -0.5 * np.sum((x @ prec) * x, axis=-1) - 0.5 * logdet - 0.5 * b.dim * np.log(2 * np.pi)
    return out


def mh_accept_indices(current, proposed, log_weight, rng):
    """Independence MH over pool rows with target proportional to ``exp(log_weight)``.

    ``current``/``proposed`` are integer row arrays; returns the new rows.
    """
    log_r = log_weight[proposed] - log_weight[current]
    accept = np.log(rng.random(np.shape(current))) < log_r
    return np.where(accept, proposed, current)


def pool_log_weights(state: PopulationState, theta, logprior, blocks) -> np.ndarray:
    """Independence-sampler target weight of every pool row, on the log scale."""
    return population_logpdf(state, theta, blocks) - logprior


def mh_update_individual(current: IndividualTheta, pool: SamplePool, state: PopulationState, rng,
                         blocks=None, log_weight=None) -> IndividualTheta:
    """One independence-sampler step for an individual, proposing a uniform pool row.

    ``log_weight`` may hold :func:`pool_log_weights` for this pool and state;
    it depends on the population state alone and can be reused between steps.
    """
    blocks = blocks or theta_blocks(pool.variant)
    prop = int(rng.integers(pool.retained_count))
    if log_weight is None:
        theta = pool_theta(pool, blocks)
        pair = theta[[current.index, prop]]
        lw = pool_log_weights(state, pair, stage1_logprior(pair, blocks), blocks)
        log_r = lw[1] - lw[0]
    else:
        log_r = log_weight[prop] - log_weight[current.index]
    if np.log(rng.random()) < log_r:
        return IndividualTheta(prop, pool_theta(pool, blocks)[prop])
    return current


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass
class Stage2Result:
    individuals: list
    blocks: list
    variant: ModelVariant
    population: list          # per chain: dict column -> (n_kept,) array
    indices: np.ndarray       # (chains, n_kept, N) pool row per individual
    thetas: list              # per individual: (pool_size, p) theta matrix
    init_rule: tuple = INIT_RULES
    warnings: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return list(self.population[0].keys())

    def stacked(self, name: str) -> np.ndarray:
        """Parameter draws with shape (chains, n_kept)."""
        return np.stack([c[name] for c in self.population])

    def reported(self) -> list[str]:
        return [p for p in REPORTED if p in self.population[0]]

    def summary(self) -> list[dict]:
        rows = []
        for name in self.columns:
            draws = self.stacked(name)
            row = {"parameter": name, **summarize_draws(draws)}
            row["rhat"] = split_rhat(draws) if draws.shape[1] >= 4 else float("nan")
            rows.append(row)
        return rows

    def theta_draws(self, i: int, chain: int | None = None) -> np.ndarray:
        """Theta_i values along the retained iterations (chains concatenated)."""
        idx = self.indices[:, :, i] if chain is None else self.indices[chain:chain + 1, :, i]
        return self.thetas[i][idx.reshape(-1)]


def _init_state(thetas, blocks, rule):
    """Chain start: per-individual min/mean/max vector, snapped to the nearest pool row."""
    sl = _slices(blocks)
    picks, targets = [], []
    for th in thetas:
        target = {"min": th.min(axis=0), "mean": th.mean(axis=0), "max": th.max(axis=0)}[rule]
        scale = th.std(axis=0) + 1e-12
        picks.append(int(np.argmin(np.sum(((th - target) / scale) ** 2, axis=1))))
        targets.append(target)
    targets = np.array(targets)
    centres = np.array([th.mean(axis=0) for th in thetas])
    mean, cov = {}, {}
    for b in blocks:
        s = sl[b.name]
        mean[b.name] = targets[:, s].mean(axis=0)
        within = np.mean([np.atleast_2d(np.cov(th[:, s].T)) for th in thetas], axis=0)
        between = np.atleast_2d(np.cov(centres[:, s].T)) if len(thetas) > 1 else 0.0
        cov[b.name] = within + between + 1e-6 * np.eye(b.dim)
    return np.array(picks), PopulationState(mean, cov)


@np.errstate(over="ignore")
def _population_row(state: PopulationState, blocks) -> dict:
    # a barely identified log-variance mean may wander far enough to report inf
    row = {}
    for b in blocks:
        m, c = state.mean[b.name], state.cov[b.name]
        if b.name == "alpha":
            row["beta0"], row["beta1"] = m
        elif b.name == "beta_star":
            row["beta_star0"], row["beta_star1"] = m
        elif b.name == "log_sigma2_phi":
            row["sigma2_phi"] = float(np.exp(m[0]))
        elif b.name == "log_sigma2":
            row["sigma2"] = float(np.exp(m[0]))
        else:
            for r in range(b.dim):
                row[f"mean_{b.name}{r + 1}"] = m[r]
    for b in blocks:
        c = state.cov[b.name]
        label = {"alpha": "Sigma_alpha", "beta_star": "Sigma_beta_star", "log_sigma2_phi": "Sigma_phi",
                 "log_sigma2": "Sigma_log_sigma2"}.get(b.name, f"Sigma_{b.name}")
        if b.dim == 1:
            row[label] = c[0, 0]
        else:
            for a in range(b.dim):
                for k in range(a + 1):
                    row[f"{label}_{a + 1}{k + 1}"] = c[a, k]
    return row


def run_chain(thetas, logprior, blocks, cfg: Stage2Config, rule: str, rng):
    """One chain. Returns retained population rows and pool indices per individual.

    The individual step caches the target weight of every pool row once per
    sweep, since it depends on the population state alone, and then takes
    ``cfg.mh_steps`` independence-sampler steps with uniform proposals.
    """
    n_ind = len(thetas)
    cur, state = _init_state(thetas, blocks, rule)
    sizes = np.array([th.shape[0] for th in thetas])
    offsets = np.r_[0, np.cumsum(sizes)[:-1]]
    all_theta = np.concatenate(thetas)
    all_prior = np.concatenate(logprior)
    cur = cur + offsets
    rows, idx_keep = [], []
    for it in range(cfg.iterations):
        log_w = pool_log_weights(state, all_theta, all_prior, blocks)
        for _ in range(cfg.mh_steps):
            prop = offsets + np.floor(rng.random(n_ind) * sizes).astype(np.intp)
            cur = mh_accept_indices(cur, prop, log_w, rng)
        th = all_theta[cur]
        state = update_population_means(state, th, blocks, rng)
        state = update_population_covariances(state, th, blocks, rng)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            rows.append(_population_row(state, blocks))
            idx_keep.append(cur - offsets)
    population = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    return population, np.array(idx_keep)


def run_stage2(pools: dict, cfg: Stage2Config, rng) -> Stage2Result:
    """Run all chains of the population sampler.

    ``pools`` maps individual id to :class:`SamplePool`. ``rng`` is a seed
    or :class:`RngStream`; each chain gets its own stream keyed by chain number.
    """
    if not pools:
        raise ValueError("no sample pools given")
    ids = list(pools)
    columns = {tuple(p.columns) for p in pools.values()}
    if len(columns) != 1:
        raise ValueError("pools come from different model variants")
    variant = next(iter(pools.values())).variant
    notes = []
    for i, p in pools.items():
        if p.retained_count < SMALL_POOL:
            msg = f"pool for individual {i} has only {p.retained_count} draws; the sampler may stick"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
    blocks = theta_blocks(variant)
    thetas = [pool_theta(pools[i], blocks) for i in ids]
    logprior = [stage1_logprior(th, blocks) for th in thetas]
    seed = rng.seed if isinstance(rng, RngStream) else int(rng)
    populations, indices = [], []
    for c, rule in enumerate(cfg.init_rule):
        gen = RngStream(seed, stream_key(f"stage2-chain-{c}")).generator()
        log.info("stage 2: chain %d (%s init)", c + 1, rule)
        pop, idx = run_chain(thetas, logprior, blocks, cfg, rule, gen)
        populations.append(pop)
        indices.append(idx)
    return Stage2Result(ids, blocks, variant, populations, np.array(indices), thetas, cfg.init_rule, notes)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_chains(result: Stage2Result, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c, pop in enumerate(result.population, start=1):
        with open(directory / f"chain_{c}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = list(pop)
            w.writerow(cols)
            for k in range(len(pop[cols[0]])):
                w.writerow([format(float(pop[col][k]), ".17g") for col in cols])
    np.savez(directory / "theta_indices.npz", indices=result.indices,
             individuals=np.array([str(i) for i in result.individuals]))
    write_summary(result.summary(), directory / "summary.csv")


def write_summary(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "mean", "sd", "ci2.5", "ci97.5", "median", "rhat"])
        for r in rows:
            w.writerow([r["parameter"]] + [format(r[k], ".10g")
                                           for k in ("mean", "sd", "ci2.5", "ci97.5", "median", "rhat")])


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "parameter" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def read_chains(directory, pools: dict) -> Stage2Result:
    """Rebuild a :class:`Stage2Result` from chain files and the pools they index."""
    directory = Path(directory)
    population = []
    for path in sorted(directory.glob("chain_*.csv"), key=lambda p: int(p.stem.split("_")[1])):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array(rows[1:], dtype=float)
        population.append({c: data[:, j] for j, c in enumerate(rows[0])})
    with np.load(directory / "theta_indices.npz") as z:
        indices, ids = z["indices"], [str(i) for i in z["individuals"]]
    missing = [i for i in ids if i not in pools]
    if missing:
        raise KeyError(f"pools missing for individuals: {', '.join(missing)}")
    variant = next(iter(pools.values())).variant
    blocks = theta_blocks(variant)
    thetas = [pool_theta(pools[i], blocks) for i in ids]
    return Stage2Result(ids, blocks, variant, population, indices, thetas)
