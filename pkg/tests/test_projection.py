import numpy as np
import pytest

from latent_markov.markov_core import constant_model, propagate, simulate_panel
from latent_markov.model_zoo import baseline_scenario, france_start
from latent_markov.projection import Scenario, compare_panels, project, sensitivity_scan

PROP = ("b1", "b2", "c1", "c2")


def _baseline(h=60, name="sim-baseline"):
    model, p0, pop = baseline_scenario(name)
    return Scenario(model, p0, pop, h, label=name)


def test_scenario_validation():
    m = constant_model(np.eye(2))
    with pytest.raises(ValueError):
        Scenario(m, [1, 0], 10, 0)
    with pytest.raises(ValueError):
        Scenario(m, [1, 0], 0, 5)


def test_identity_has_no_new_counts():
    m = constant_model(np.eye(3))
    out = project(Scenario(m, [0.5, 0.3, 0.2], 1000, 10, new_count_states=("s2", "s3")))
    for v in out.new_counts.values():
        assert np.all(v == 0)


def test_new_counts_definition():
    scen = _baseline()
    out = project(scen)
    path = propagate(scen.model, scen.p_start, 60)
    np.testing.assert_array_equal(out.marginals, path)
    np.testing.assert_allclose(out.new_counts["ID"], np.diff(path[:, 2]) * 60_000_000)
    np.testing.assert_allclose(out.new_counts["D"], np.diff(path[:, 4]) * 60_000_000)
    assert out.horizon == 60


def test_early_new_id_magnitude():
    out = project(_baseline())
    early = out.new_counts["ID"][0:4]  # increments into days 1..4
    assert np.all((early >= 30) & (early <= 120))


def test_peaks_by_brute_scan():
    out = project(_baseline(200))
    for j, lab in enumerate(out.labels):
        col = out.marginals[:, j]
        best = 0
        for t in range(len(col)):
            if col[t] > col[best]:
                best = t
        assert out.peaks[lab]["day"] == best and out.peaks[lab]["value"] == col[best]


def test_baseline_flattening():
    p3 = project(_baseline()).series("ID")
    d1 = np.diff(p3)
    d2 = np.diff(p3, 2)
    k = int(np.argmax(d1))
    assert k < len(d1) - 1
    assert np.all(d2[k:] < 0)


def test_sensitivity_identity_and_unknown():
    base = _baseline()
    same = sensitivity_scan(base, [1.0], PROP)[0]
    np.testing.assert_array_equal(same.marginals, project(base).marginals)
    with pytest.raises(KeyError):
        sensitivity_scan(base, [2.0], ("beta",))


def test_scaling_zero_parameter_is_noop():
    scen = _baseline(name="france-estimated")
    model = scen.model.with_params(c1=0.0)
    scen = Scenario(model, scen.p_start, scen.population, 30)
    out = sensitivity_scan(scen, [3.0], ("c1",))[0]
    np.testing.assert_array_equal(out.marginals, project(scen).marginals)


def test_sensitivity_ordering_and_overlap():
    base = _baseline()
    half, dbl = sensitivity_scan(base, [0.5, 2.0], PROP)
    mid = project(base)
    assert "x0.5" in half.label and "x2" in dbl.label
    for j in (1, 2, 3):
        after = slice(5, None)
        assert np.all(dbl.marginals[after, j] >= mid.marginals[after, j])
        assert np.all(mid.marginals[after, j] >= half.marginals[after, j])
    d = np.stack([half.series("D"), mid.series("D"), dbl.series("D")])
    gap = (d.max(axis=0) - d.min(axis=0))[1:] / d.min(axis=0)[1:]
    assert gap.max() < 0.2


def test_france_long_horizon():
    model, p0, pop = baseline_scenario("france-estimated")
    out = project(Scenario(model, p0, pop, 9125, label="france-estimated"))
    np.testing.assert_allclose(out.marginals.sum(axis=1), 1.0, atol=1e-12)
    assert out.marginals.min() >= 0
    for lab in ("IU", "ID"):
        k = out.peaks[lab]["day"]
        assert 0 < k < 9125
    assert np.all(np.diff(out.series("D")) >= -1e-12)
    np.testing.assert_array_equal(out.marginals[0], france_start())


def test_compare_panels_same_model():
    scen = _baseline(40)
    panel = simulate_panel(scen.model, scen.p_start, 100_000, 41, seed=8)
    rep = compare_panels(project(scen), panel)
    assert rep.max_abs_normalized <= 5
    assert rep.gaps.shape == (41, 5)


def test_compare_panels_single_individual():
    m = constant_model([[0.7, 0.3], [0.0, 1.0]])
    out = project(Scenario(m, [1.0, 0.0], 1, 5))
    panel = simulate_panel(m, [1.0, 0.0], 1, 6, seed=2)
    rep = compare_panels(out, panel)
    p = out.marginals
    assert np.all(np.isclose(rep.gaps, -p) | np.isclose(rep.gaps, 1 - p))


def test_compare_panels_negative_control():
    # the baseline epidemic is slow: doubling propagation moves p(t) by under
    # one standard error at N=1e5 within 40 days, so the control uses a larger
    # panel over a longer window
    scen = _baseline(150)
    dbl, _, _ = baseline_scenario("sim-double-prop")
    panel = simulate_panel(dbl, scen.p_start, 1_000_000, 151, seed=8, num_threads=4)
    assert compare_panels(project(scen), panel).max_abs_normalized > 5


def test_compare_panels_shape_mismatch():
    scen = _baseline(10)
    panel = simulate_panel(scen.model, scen.p_start, 100, 5, seed=1)
    with pytest.raises(ValueError):
        compare_panels(project(scen), panel)
