import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from vfbayes.model import (
    FixedEffects,
    IndividualData,
    ModelVariant,
    Observation,
    ParameterState,
    RandomEffects,
    StructuralError,
    VarianceParams,
    censor,
    linear_predictor,
    loglik_individual,
    loglik_observation,
    loglik_values,
    residual_sd,
)

from conftest import simulated


def test_variant_flags_and_parse():
    assert not ModelVariant.MODEL1.has_visit_effect
    assert ModelVariant.MODEL2.has_visit_effect and not ModelVariant.MODEL2.has_variance_link
    assert ModelVariant.MODEL3.has_variance_link
    assert ModelVariant.parse("model3") is ModelVariant.MODEL3
    assert ModelVariant.parse(2) is ModelVariant.MODEL2
    with pytest.raises(ValueError):
        ModelVariant.parse(4)


def test_censor():
    assert censor(-3.2) == 0.0
    assert censor(0.0) == 0.0
    assert censor(17.5) == 17.5
    assert np.array_equal(censor(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_observation_invariants():
    Observation("a", 1, 1, 1, 1, 0.0, 0.0, True)
    with pytest.raises(ValueError):
        Observation("a", 1, 1, 1, 1, 0.0, 3.0, True)
    with pytest.raises(ValueError):
        Observation("a", 3, 1, 1, 1, 0.0, 3.0, False)
    with pytest.raises(ValueError):
        Observation("a", 1, 1, 27, 1, 0.0, 3.0, False)
    with pytest.raises(ValueError):
        Observation("a", 1, 1, 1, 1, -0.5, 3.0, False)


def test_individual_rejects_duplicates_and_foreign_rows():
    ob = Observation("a", 1, 1, 1, 1, 0.0, 3.0, False)
    with pytest.raises(ValueError):
        IndividualData("a", [ob, ob])
    with pytest.raises(ValueError):
        IndividualData("b", [ob])


def _effects(i="a"):
    re = RandomEffects()
    re.alpha[i] = (1.0, 0.1)
    re.gamma[(i, 1)] = (0.5, -0.05)
    re.eta[(i, 1, 2)] = (-0.2, 0.02)
    re.lam[(i, 1, 2, 7)] = (0.3, -0.01)
    re.phi[(i, 1, 4)] = 0.8
    return re


def test_linear_predictor_sums_levels():
    fixed = FixedEffects(20.0, -0.3)
    key = ("a", 1, 2, 7, 4)
    mu1 = linear_predictor(fixed, _effects(), key, 2.0, ModelVariant.MODEL1)
    assert np.isclose(mu1, (20 + 1 + 0.5 - 0.2 + 0.3) + (-0.3 + 0.1 - 0.05 + 0.02 - 0.01) * 2.0)
    mu2 = linear_predictor(fixed, _effects(), key, 2.0, ModelVariant.MODEL2)
    assert np.isclose(mu2 - mu1, 0.8)


def test_linear_predictor_zero_effects_is_fixed_line():
    re = RandomEffects()
    re.alpha["a"], re.gamma[("a", 1)], re.eta[("a", 1, 1)] = (0, 0), (0, 0), (0, 0)
    re.lam[("a", 1, 1, 1)], re.phi[("a", 1, 1)] = (0, 0), 0.0
    assert linear_predictor(FixedEffects(20, -1), re, ("a", 1, 1, 1, 1), 3.0, 2) == 17.0


def test_missing_effect_is_structural_error():
    re = _effects()
    del re.eta[("a", 1, 2)]
    with pytest.raises(StructuralError):
        linear_predictor(FixedEffects(), re, ("a", 1, 2, 7, 4), 0.0, 1)


def test_residual_sd():
    vp = VarianceParams(beta_star0=2.82, beta_star1=-0.08, sigma2=13.0)
    assert np.isclose(residual_sd(10.0, vp, 3), np.exp(2.82 - 0.8))
    assert np.isclose(residual_sd(10.0, vp, 1), np.sqrt(13.0))
    with pytest.raises(ValueError):
        residual_sd(1.0, VarianceParams(), 1)


def test_censored_loglik_matches_quadrature_grid():
    """Censored contribution equals log of the integrated normal density below 0 (100-point grid)."""
    worst = 0.0
    for mu in np.linspace(-5, 30, 10):
        for sd in np.linspace(0.5, 12, 10):
            ob = Observation("a", 1, 1, 1, 1, 0.0, 0.0, True)
            # factor out the density at the bound so deep tails do not underflow
            c = -mu / sd
            tail, _ = integrate.quad(lambda u: np.exp(-c * u - 0.5 * u * u), -np.inf, 0.0, epsabs=0,
                                     epsrel=1e-12, limit=200)
            exact = stats.norm.logpdf(c) + np.log(tail)
            # relative error of the integrated mass; well defined where the log is ~0
            worst = max(worst, abs(np.expm1(loglik_observation(ob, mu, sd) - exact)))
    assert worst <= 1e-6


def test_uncensored_loglik_is_normal_density():
    ob = Observation("a", 1, 1, 1, 1, 0.0, 14.0, False)
    assert np.isclose(loglik_observation(ob, 12.0, 3.0), stats.norm.logpdf(14.0, 12.0, 3.0))
    with pytest.raises(ValueError):
        loglik_observation(ob, 12.0, 0.0)


def test_censored_loglik_far_tail_finite():
    assert np.isfinite(loglik_values(0.0, True, 400.0, 1.0))


def _state_for(data, truth, variant):
    re = RandomEffects(truth.alpha, truth.gamma, truth.eta, truth.lam, truth.phi)
    c = truth.config
    return ParameterState(FixedEffects(c.beta0, c.beta1),
                          VarianceParams(c.beta_star0, c.beta_star1, c.sigma2), re)


@pytest.mark.parametrize("variant", [1, 2, 3])
def test_layout_matches_scalar_reference(variant):
    _, truth, data = simulated("table2", 1, 4, 3)
    d = data[0]
    state = _state_for(d, truth, variant)
    lay = d.layout
    i = d.individual_id
    alpha = np.array(truth.alpha[i]) + [state.fixed.beta0, state.fixed.beta1]
    g = np.array([truth.gamma[(i, e)] for e in lay.gamma_keys])
    et = np.array([truth.eta[(i, *k)] for k in lay.eta_keys])
    lm = np.array([truth.lam[(i, *k)] for k in lay.lam_keys])
    ph = np.array([truth.phi[(i, *k)] for k in lay.phi_keys])
    v = ModelVariant(variant)
    mu_vec = lay.mu(alpha, g, et, lm, ph if v.has_visit_effect else None)
    mu_ref = np.array([linear_predictor(state.fixed, state.effects, ob, ob.years, v) for ob in d.observations])
    assert np.allclose(mu_vec, mu_ref, atol=1e-12)
    sd = residual_sd(mu_vec, state.variance, v)
    total = loglik_values(lay.y, lay.censored, mu_vec, sd).sum()
    assert np.isclose(total, loglik_individual(d, state, v), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(a0=st.floats(-20, 20), a1=st.floats(-2, 2), t=st.floats(0, 12))
def test_layout_mu_batch_axis(a0, a1, t):
    obs = [Observation("x", 1, 1, 1, 1, 0.0, 5.0, False), Observation("x", 1, 1, 1, 2, t, 5.0, False)]
    lay = IndividualData("x", obs).layout
    alpha = np.array([[a0, a1], [a0 + 1, a1]])
    z = np.zeros((2, 1, 2))
    mu = lay.mu(alpha, z, z, z)
    assert mu.shape == (2, 2)
    assert np.allclose(mu[1] - mu[0], 1.0)
    assert np.isclose(mu[0, 1], a0 + a1 * t)


def test_effects_to_dict_roundtrip():
    _, truth, data = simulated("table2", 1, 3, 5)
    lay = data[0].layout
    g = np.arange(lay.n_gamma * 2, dtype=float).reshape(-1, 2)
    re = lay.effects_to_dict("P1", (1.0, 2.0), g, np.zeros((lay.n_eta, 2)), np.zeros((lay.n_lam, 2)),
                             np.zeros(lay.n_phi))
    assert re.gamma[("P1", 1)] == (0.0, 1.0)
    assert len(re.lam) == lay.n_lam and len(re.phi) == lay.n_phi


def test_loglik_invariant_to_observation_order():
    _, truth, data = simulated("table2", 1, 4, 3)
    d = data[0]
    state = _state_for(d, truth, 3)
    obs = list(d.observations)
    np.random.default_rng(0).shuffle(obs)
    shuffled = IndividualData(d.individual_id, obs)
    assert np.isclose(loglik_individual(shuffled, state, 3), loglik_individual(d, state, 3), rtol=1e-12)
