import numpy as np
import pytest
from scipy import stats

from vfbayes.data_io import TruthConfig, ingest, simulate
from vfbayes.diagnostics import batch_mean_se
from vfbayes.distributions import cholesky2
from vfbayes.model import ModelVariant
from vfbayes.stage1 import (
    SamplePool,
    Stage1Config,
    conditional_pair_moments,
    fit_all,
    fit_individual,
    gibbs_update_random_effect_pair,
    pool_columns,
    read_pools,
    update_latent_censored,
    variant_from_columns,
    write_pools,
)

from conftest import simulated, toy_individual
from oracles import augmented_gibbs, censored_toy, quadrature_posterior

SMALL = dict(iterations=3000, burn_in=1000, thin=10)


def test_config_validation():
    assert Stage1Config.preset("desk").retained == 1000
    assert Stage1Config.preset("paper").retained == 5000
    with pytest.raises(ValueError):
        Stage1Config(iterations=1000, burn_in=1000)
    with pytest.raises(ValueError):
        Stage1Config(iterations=1000, burn_in=0, thin=20)
    with pytest.raises(ValueError):
        Stage1Config(thin=0)


def test_pool_columns_identify_variant():
    for v in ModelVariant:
        assert variant_from_columns(pool_columns(v)) is v
    assert "sigma2_phi" not in pool_columns(1)
    assert "sigma2" not in pool_columns(3)


# --- conjugate pair update -------------------------------------------------

def _dual_form_moments(t, resid, noise_var, prior_cov):
    """Normal-normal posterior via joint Gaussian conditioning (observation-space form)."""
    x = np.stack([np.ones_like(t), t], axis=1)
    s = x @ prior_cov @ x.T + np.diag(noise_var)
    gain = prior_cov @ x.T @ np.linalg.inv(s)
    return gain @ resid, prior_cov - gain @ x @ prior_cov


def test_pair_moments_two_observation_oracle():
    t = np.array([0.0, 2.5])
    resid = np.array([1.2, -0.4])
    noise = np.array([4.0, 2.0])
    prior = np.array([[3.0, 0.2], [0.2, 0.5]])
    mean, cov = conditional_pair_moments(t, resid, 1 / noise, np.zeros(2, dtype=np.intp), 1, prior)
    m_ref, c_ref = _dual_form_moments(t, resid, noise, prior)
    assert np.allclose(mean[0], m_ref, rtol=1e-12, atol=1e-14)
    assert np.allclose(cov[0], c_ref, rtol=1e-12, atol=1e-14)


def test_pair_moments_limits():
    # flat intercept prior, one observation at t = 0: mean intercept is the residual
    mean, _ = conditional_pair_moments(np.array([0.0]), np.array([3.7]), np.array([1.0]),
                                       np.zeros(1, dtype=np.intp), 1, np.diag([1e12, 1.0]))
    assert np.isclose(mean[0, 0], 3.7, rtol=1e-9)
    # a group with no data keeps its prior
    prior = np.array([[2.0, 0.1], [0.1, 0.3]])
    mean, cov = conditional_pair_moments(np.array([1.0]), np.array([1.0]), np.array([1.0]),
                                         np.zeros(1, dtype=np.intp), 2, prior)
    assert np.allclose(mean[1], 0.0) and np.allclose(cov[1], prior)


def test_pair_draw_moments(rng):
    t = np.array([0.0, 2.5])
    resid = np.array([1.2, -0.4])
    noise = np.array([4.0, 2.0])
    prior = np.array([[3.0, 0.2], [0.2, 0.5]])
    groups = 200_000
    tt, rr, ww = np.tile(t, groups), np.tile(resid, groups), np.tile(1 / noise, groups)
    idx = np.repeat(np.arange(groups), 2)
    draws = gibbs_update_random_effect_pair(tt, rr, ww, idx, groups, prior, rng)
    m_ref, c_ref = _dual_form_moments(t, resid, noise, prior)
    se = np.sqrt(np.diag(c_ref) / groups)
    assert np.all(np.abs(draws.mean(axis=0) - m_ref) < 3 * se)
    assert np.allclose(np.cov(draws.T), c_ref, rtol=0.02, atol=1e-3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pair_singular_precision_raises(rng):
    with pytest.raises(np.linalg.LinAlgError):
        gibbs_update_random_effect_pair(np.array([0.0]), np.array([1.0]), np.array([0.0]),
                                        np.zeros(1, dtype=np.intp), 1, np.diag([np.inf, np.inf]), rng)


# --- latent augmentation -----------------------------------------------------

def test_latent_half_normal_mean(rng):
    x = update_latent_censored(np.zeros(200_000), 1.0, np.ones(200_000, dtype=bool), rng)
    assert np.all(x < 0)
    assert abs(x.mean() + np.sqrt(2 / np.pi)) < 3 * np.sqrt((1 - 2 / np.pi) / x.size)


def test_latent_inactive_truncation_and_empty(rng):
    x = update_latent_censored(np.full(100_000, -10.0), 1.0, np.ones(100_000, dtype=bool), rng)
    assert abs(x.mean() + 10.0) < 0.02
    assert update_latent_censored(np.zeros(3), 1.0, np.zeros(3, dtype=bool), rng).size == 0


def test_augmented_sampler_matches_quadrature(rng):
    t, y, cens, sd = censored_toy()
    assert 0 < cens.sum() < cens.size
    q_mean, _ = quadrature_posterior(t, y, cens, sd)
    g_mean, g_se = augmented_gibbs(t, y, cens, sd, rng)
    assert abs(g_mean - q_mean) < 3 * g_se


# --- full sampler ------------------------------------------------------------

def _noiseless_alpha_individual(visits=8, seed=0):
    tiny = 1e-4 * np.eye(2)
    cfg = TruthConfig(model=1, beta0=20.0, beta1=-0.3, sigma2=4.0, cov_alpha=tiny, cov_gamma=tiny, cov_eta=tiny,
                      cov_lambda=tiny, n_eyes=1)
    records, _ = simulate(cfg, 1, visits, np.random.default_rng(seed))
    return ingest(records)[0]


def test_model1_recovers_known_line():
    d = _noiseless_alpha_individual()
    res = fit_individual(d, Stage1Config(model=1, **SMALL), np.random.default_rng(1))
    a0, a1 = res.pool.column("alpha0"), res.pool.column("alpha1")
    assert abs(a0.mean() - 20.0) < 3 * a0.std()
    assert abs(a1.mean() + 0.3) < 3 * a1.std()


def test_all_censored_pushes_intercept_negative():
    d = toy_individual(np.zeros((2, 4)), [0.0, 0.5, 1.0, 1.5])
    res = fit_individual(d, Stage1Config(model=1, **SMALL), np.random.default_rng(2))
    assert np.median(res.pool.column("alpha0")) < 0


def test_constant_data_shrinks_sigma2():
    d = toy_individual(np.full((3, 5), 20.0), [0.0, 0.5, 1.0, 1.5, 2.0])
    res = fit_individual(d, Stage1Config(model=1, **SMALL), np.random.default_rng(3))
    assert np.median(res.pool.column("sigma2")) < 1e-2


def test_single_visit_refused():
    d = toy_individual([[10.0]], [0.0])
    with pytest.raises(ValueError, match="2 visits"):
        fit_individual(d, Stage1Config(model=1, **SMALL), np.random.default_rng(0))


@pytest.mark.parametrize("model", [1, 2, 3])
def test_pool_draws_valid_and_stationary(model):
    _, _, data = simulated("table2", 1, 6, 11)
    res = fit_individual(data[0], Stage1Config(model=model, iterations=6000, burn_in=2000, thin=4),
                         np.random.default_rng(model))
    pool = res.pool
    assert pool.retained_count == 1000
    for row in range(0, pool.retained_count, 50):
        for block in ("gamma", "eta", "lambda"):
            cholesky2(pool.covariance(block, row))
    half = pool.retained_count // 2
    for k, name in enumerate(pool.columns):
        x = pool.draws[:, k]
        # log scale for the variance-type columns, whose draws are heavy-tailed
        if name.startswith("sigma2") or name[-1] in "13" and name.startswith("c_"):
            x = np.log(x)
        a, b = x[:half], x[half:]
        se = np.hypot(batch_mean_se(a, 10), batch_mean_se(b, 10))
        assert abs(a.mean() - b.mean()) < 3 * se + 1e-12, name
    if model == 3:
        assert all(0.1 < r < 0.7 for r in res.acceptance.values()), res.acceptance


def test_bit_reproducible():
    _, _, data = simulated("table2", 1, 4, 1)
    cfg = Stage1Config(model=3, iterations=150, burn_in=0, thin=1)
    a = fit_individual(data[0], cfg, np.random.default_rng(9)).pool.draws
    b = fit_individual(data[0], cfg, np.random.default_rng(9)).pool.draws
    assert np.array_equal(a, b)


def test_fit_all_independent_of_jobs():
    _, _, data = simulated("table2", 3, 4, 2)
    cfg = Stage1Config(model=2, iterations=300, burn_in=100, thin=2)
    serial = fit_all(data, cfg, seed=5, jobs=1)
    parallel = fit_all(data, cfg, seed=5, jobs=2)
    for k in serial:
        assert np.array_equal(serial[k].pool.draws, parallel[k].pool.draws)
    ids = list(serial)
    assert not np.array_equal(serial[ids[0]].pool.draws, serial[ids[1]].pool.draws)


def test_pool_csv_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(0)
    draws = rng.normal(size=(120, len(pool_columns(3))))
    cols = pool_columns(3)
    for c in ("c_gamma1", "c_gamma3", "c_eta1", "c_eta3", "c_lambda1", "c_lambda3"):
        draws[:, cols.index(c)] = np.exp(draws[:, cols.index(c)])
    pool = SamplePool("P7", cols, draws)
    write_pools({"P7": type("R", (), {"pool": pool})()}, tmp_path)
    back = read_pools(tmp_path)["P7"]
    assert back.columns == cols and np.array_equal(back.draws, draws)
    assert back.variant is ModelVariant.MODEL3


def test_pool_rejects_bad_cholesky():
    cols = pool_columns(1)
    draws = np.ones((2, len(cols)))
    draws[0, cols.index("c_eta1")] = -1.0
    with pytest.raises(ValueError):
        SamplePool("x", cols, draws)


# --- group moves -----------------------------------------------------------

def _log_post(sm, block, eff, cov):
    """Terms of the augmented log posterior that a move on ``block`` can change (scipy reference)."""
    effects = {"gamma": sm.gamma, "eta": sm.eta, "lambda": sm.lam, block: eff}
    phi = sm.phi if sm.variant.has_visit_effect else None
    mu = sm.lay.mu(sm.alpha, effects["gamma"], effects["eta"], effects["lambda"], phi)
    sd = np.exp(sm.beta_star[0] + sm.beta_star[1] * mu) if sm.variant.has_variance_link else np.sqrt(sm.sigma2)
    out = stats.norm.logpdf(sm.z, mu, sd).sum()
    out += stats.multivariate_normal(np.zeros(2), cov).logpdf(eff).sum()
    return out + stats.invwishart(2.0, 0.01 * np.eye(2)).logpdf(cov)


@pytest.mark.parametrize("model", [1, 3])
@pytest.mark.parametrize("block", ["gamma", "eta", "lambda"])
def test_group_move_ratios_are_exact(model, block):
    from vfbayes.stage1 import _Sampler

    _, _, data = simulated("table2", 1, 4, 6)
    sm = _Sampler(data[0], Stage1Config(model=model, iterations=200, burn_in=50, thin=1), np.random.default_rng(0))
    for _ in range(30):
        sm.sweep()
    before = _log_post(sm, block, sm._effects(block), sm.cov[block])
    n_groups = sm._effects(block).shape[0]
    for k in (0, 1):
        log_c = 0.07 if k == 0 else -0.05
        log_r, (eff, cov, _, _) = sm.scale_proposal(block, k, log_c)
        jac = (n_groups + 3) * log_c
        assert np.isclose(log_r, _log_post(sm, block, eff, cov) - before + jac, rtol=1e-8, atol=1e-7)
    log_r, (eff, cov, _, _) = sm.shear_proposal(block, 0.03)
    assert np.isclose(log_r, _log_post(sm, block, eff, cov) - before, rtol=1e-8, atol=1e-7)


def test_shift_move_keeps_means():
    from vfbayes.stage1 import _Sampler

    _, _, data = simulated("table2", 1, 4, 6)
    sm = _Sampler(data[0], Stage1Config(model=1, iterations=200, burn_in=50, thin=1), np.random.default_rng(0))
    for _ in range(10):
        sm.sweep()
    mu = sm._full_mu()
    lam = sm.lam.copy()
    sm.step_shift("lambda")
    assert not np.allclose(sm.lam, lam)
    assert np.allclose(sm._full_mu(), mu, atol=1e-9)
