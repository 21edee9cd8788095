import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_markov.markov_core import ModelDomainError, propagate
from latent_markov.model_zoo import (
    FRANCE_ESTIMATED,
    FRANCE_TABLE_ROWS,
    SIM_BASELINE,
    SIURD_ZERO,
    Homog3Params,
    SidParams,
    SiurdParams,
    TwoRegionSiParams,
    baseline_scenario,
    build_homog3,
    build_sid,
    build_siurd,
    build_two_region_si,
    france_start,
    get_family,
    siurd_shares,
)

simplex5 = arrays(float, 5, elements=st.floats(0.0, 1.0)).filter(lambda w: w.sum() > 0).map(lambda w: w / w.sum())


def test_homog3_examples():
    np.testing.assert_array_equal(build_homog3(Homog3Params()).matrix([1, 0, 0]), np.eye(3))
    P = build_homog3(Homog3Params(p12=0.08, p13=0.02, p23=0.05)).matrix([1, 0, 0])
    np.testing.assert_allclose(P, [[0.9, 0.08, 0.02], [0, 0.95, 0.05], [0, 0, 1]], atol=1e-15)
    with pytest.raises(ValueError, match="diagonal"):
        Homog3Params(p12=0.7, p13=0.5)
    with pytest.raises(ValueError):
        Homog3Params(p21=-0.1)


@given(arrays(float, 6, elements=st.floats(0, 0.5)))
def test_homog3_rows_sum_to_one(v):
    P = build_homog3(Homog3Params(*v)).matrix(np.full(3, 1 / 3))
    for i in range(3):
        assert abs(sum(P[i, j] for j in range(3)) - 1.0) <= 1e-15


def test_sid_examples():
    m = build_sid(SidParams(0.0, 0.0, 0.01, 0.05))
    np.testing.assert_allclose(m.matrix([0.3, 0.3, 0.4])[0], [0.495, 0.495, 0.01])
    m = build_sid(SidParams(-800.0, 0.0, 0.01, 0.05))
    np.testing.assert_allclose(m.matrix([1.0, 0, 0])[0], [0.99, 0.0, 0.01], atol=1e-300)
    m = build_sid(SidParams(-5.0, 10.0, 0.001, 0.01))
    ell = 1.0 / (1.0 + math.exp(3.0))
    row = m.matrix([0.7, 0.2, 0.1])[0]
    np.testing.assert_allclose(row, [0.999 * (1 - ell), 0.999 * ell, 0.001], rtol=1e-14)
    np.testing.assert_array_equal(m.matrix([0.7, 0.2, 0.1])[1:], [[0, 0.99, 0.01], [0, 0, 1]])


def test_sid_mortality_ordering_is_a_warning():
    with pytest.warns(UserWarning):
        SidParams(0.0, 0.0, 0.05, 0.01)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        SidParams(0.0, 0.0, 0.01, 0.05)


def test_siurd_equal_utilities():
    params = SiurdParams(0, 0, 0, 0, 0, 0, 1e-4, 0.01, 0.02, 0.003, 0.04, 0.01, 1e-5)
    pi = siurd_shares(np.array([0.9, 0.05, 0.05, 0, 0]), params.to_array())
    np.testing.assert_allclose(pi, [1 / 3] * 3, rtol=1e-15)


def test_siurd_intercept_ratio():
    pi = siurd_shares(np.array([1.0, 0, 0, 0, 0]), SIM_BASELINE.to_array())
    assert pi[1] / pi[2] == pytest.approx(3.0, rel=1e-14)


def test_siurd_baseline_first_row():
    P = build_siurd(SIM_BASELINE).matrix([1.0, 0, 0, 0, 0])
    u = np.array([1.0, 3e-6, 1e-6])
    np.testing.assert_allclose(P[0, :3], (1 - 3e-5) * u / u.sum(), rtol=1e-13)
    assert P[0, 2] / (1 - 3e-5) == pytest.approx(1e-6, rel=5e-6)
    assert P[0, 4] == 3e-5


def test_siurd_overflow_names_index():
    m = build_siurd(SIM_BASELINE)
    with pytest.raises(ModelDomainError, match="logit index .* exceeds 700"):
        m.matrix([0.5, 0.5, 0, 0, 0])


@given(simplex5, st.integers(0, 2**31))
def test_siurd_row_stochastic_and_zero_pattern(p, seed):
    rng = np.random.default_rng(seed)
    params = SiurdParams(
        *rng.normal(-5, 2, 2), *rng.normal(0, 50, 4), rng.uniform(0, 0.1), *rng.dirichlet(np.ones(4))[:3] * 0.5,
        *rng.dirichlet(np.ones(3))[:2] * 0.5, rng.uniform(0, 0.1),
    )
    P = build_siurd(params).matrix(p)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(P[SIURD_ZERO] == 0.0)
    assert P[4, 4] == 1.0
    pi = siurd_shares(p, params.to_array())
    assert abs(pi.sum() - 1.0) <= 1e-14 and np.all(pi > 0)


@given(simplex5, st.floats(0.0, 200.0))
def test_siurd_b1_monotone(p, bump):
    p = p.copy()
    p[1] = max(p[1], 1e-3)
    p /= p.sum()
    th = FRANCE_ESTIMATED.to_array()
    base = siurd_shares(p, th)[1]
    th2 = th.copy()
    th2[2] += bump
    assert siurd_shares(p, th2)[1] >= base


@given(simplex5, st.floats(0.01, 50.0))
def test_siurd_covariate_scale_identity(p, s):
    th = FRANCE_ESTIMATED.to_array()
    q = p.copy()
    q[1] *= s
    q[2] *= s
    np.testing.assert_array_equal(siurd_shares(p, th, s), siurd_shares(q, th, 1.0))


def test_siurd_builder_vectorised():
    m = build_siurd(SIM_BASELINE)
    path = propagate(m, [1, 0, 0, 0, 0], 10)
    stacked = m.matrix(path)
    for t in range(len(path)):
        np.testing.assert_array_equal(stacked[t], m.matrix(path[t]))


def test_two_region_identity_limit():
    m = build_two_region_si(TwoRegionSiParams(-800, -800, 0, 0, 0, 0))
    np.testing.assert_allclose(m.matrix([0.4, 0.4, 0.1, 0.1]), np.eye(4), atol=1e-300)


def test_two_region_symmetry():
    m = build_two_region_si(TwoRegionSiParams(-4, -4, 5, 2, 2, 5))
    path = propagate(m, [0.49, 0.49, 0.01, 0.01], 50)
    np.testing.assert_allclose(path[:, 2], path[:, 3], rtol=1e-14)


def test_two_region_aggregates_brute_force():
    m = build_two_region_si(TwoRegionSiParams(-5, -3, 8, 1, 2, 6))
    A = m.metadata["aggregation"]
    p = np.array([0.6, 0.38, 0.015, 0.005])
    path = propagate(m, p, 30)
    agg = path @ A.rows.T
    # independent scalar propagation of the disaggregated chain
    s1, s2, i1, i2 = p
    for t in range(1, 31):
        l1 = 1 / (1 + math.exp(-(-5 + 8 * i1 + 1 * i2)))
        l2 = 1 / (1 + math.exp(-(-3 + 2 * i1 + 6 * i2)))
        s1, s2, i1, i2 = s1 * (1 - l1), s2 * (1 - l2), i1 + s1 * l1, i2 + s2 * l2
        assert abs(agg[t, 0] - (s1 + s2)) < 1e-14
        assert abs(agg[t, 1] - (i1 + i2)) < 1e-14


def test_baseline_scenarios():
    model, p0, pop = baseline_scenario("sim-baseline")
    prm = model.params
    assert prm["p25"] == 0.004 and prm["p35"] == 0.013
    assert prm["b2"] == pytest.approx(500 * math.log(25), rel=1e-15)
    assert prm["b2"] == pytest.approx(1609.44, abs=5e-3)
    assert math.exp(2 * prm["b2"] / 1000) == pytest.approx(25.0, rel=1e-14)
    assert math.exp(prm["a1"]) == pytest.approx(3 * math.exp(prm["a2"]), rel=1e-14)
    assert prm["p15"] == prm["p45"] == 3e-5
    assert prm["p24"] == prm["p34"] == 0.03 and prm["p23"] == 1e-6
    np.testing.assert_array_equal(p0, [1, 0, 0, 0, 0])
    assert pop == 60_000_000
    dbl, _, _ = baseline_scenario("sim-double-prop")
    half, _, _ = baseline_scenario("sim-half-prop")
    for k in ("b1", "b2", "c1", "c2"):
        assert dbl.params[k] == 2 * prm[k] and half.params[k] == 0.5 * prm[k]
    with pytest.raises(KeyError):
        baseline_scenario("nope")


def test_france_scenario_parameters():
    model, p0, pop = baseline_scenario("france-estimated")
    assert pop == 66_900_000
    prm = model.params
    for k, v in dict(a1=-8.6517, a2=-11.1481, b1=0.0034, b2=2.499e-5, c1=8.482e-5, c2=0.00028, p15=3.1575e-5).items():
        assert prm[k] == v
    np.testing.assert_allclose(p0.sum(), 1.0, atol=1e-15)
    np.testing.assert_array_equal(p0, france_start())


def test_france_rows_off_diagonals_match_table():
    P = baseline_scenario("france-estimated")[0].matrix(france_start())
    for i in range(3):
        off = [j for j in range(5) if j != i + 1]
        np.testing.assert_array_equal(P[i + 1, off], FRANCE_TABLE_ROWS[i, off])
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)


def test_france_printed_id_row_is_not_stochastic():
    # the printed ID row (0, 0, 0.7926, 0.1032, 0.0158) sums to 0.9116; the
    # model keeps the printed exits and implies the stay probability
    assert abs(FRANCE_TABLE_ROWS[1].sum() - 0.9116) < 1e-12
    P = baseline_scenario("france-estimated")[0].matrix(france_start())
    assert P[2, 2] == pytest.approx(1 - 0.1032 - 0.0158, abs=1e-15)


def test_get_family_unknown():
    with pytest.raises(KeyError):
        get_family("seir")
    assert get_family("siurd", 3.0).build(SIM_BASELINE.to_array()).metadata["covariate_scale"] == 3.0
