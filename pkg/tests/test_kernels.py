import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_markov import _kernels_py, kernels
from latent_markov.markov_core import cumulative_rows

try:
    from latent_markov import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

needs_ext = pytest.mark.skipif(_kernels_c is None, reason="compiled kernels not built")


def test_splitmix_reference_value():
    # first output of the reference SplitMix64 generator seeded with 0
    assert _kernels_py._fmix_int(0x9E3779B97F4A7C15) == 0xE220A8397B1DCDAF


def test_uniforms_range_and_moments():
    u = _kernels_py.uniforms(7, 3, 200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 5 * np.sqrt(1 / 12 / u.size)
    assert abs(np.corrcoef(u[:-1], u[1:])[0, 1]) < 0.01


def test_streams_differ():
    a = _kernels_py.uniforms(7, 3, 100)
    b = _kernels_py.uniforms(7, 4, 100)
    c = _kernels_py.uniforms(8, 3, 100)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


def test_backend_selection_reported():
    assert kernels.BACKEND in ("cython", "python")
    if _kernels_c is not None:
        assert kernels.BACKEND == "cython"


@needs_ext
@given(st.integers(0, 2**64 - 1), st.integers(0, 10_000), st.integers(1, 500))
def test_uniforms_bit_identical(seed, stream, n):
    np.testing.assert_array_equal(_kernels_c.uniforms(seed, stream, n), _kernels_py.uniforms(seed, stream, n))
    assert _kernels_c.stream_key(seed, stream) == _kernels_py.stream_key(seed, stream)


@needs_ext
@given(st.integers(0, 2**32), st.integers(2, 6), st.integers(1, 300))
def test_categorical_step_bit_identical(seed, J, N):
    rng = np.random.default_rng(seed)
    P = rng.uniform(size=(J, J)) * (rng.uniform(size=(J, J)) > 0.3)
    P[:, 0] += 1e-3
    P /= P.sum(axis=1, keepdims=True)
    cum = cumulative_rows(P)
    states = rng.integers(0, J, N).astype(np.int64)
    a = _kernels_c.categorical_step(states, cum, seed, 5, 1)
    b = _kernels_py.categorical_step(states, cum, seed, 5)
    c = _kernels_c.categorical_step(states, cum, seed, 5, 3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_categorical_step_frequencies():
    P = np.array([[0.2, 0.5, 0.3]])
    out = kernels.categorical_step(np.zeros(300_000, dtype=np.int64), cumulative_rows(P), 1, 0)
    freq = np.bincount(out, minlength=3) / out.size
    assert np.all(np.abs(freq - P[0]) < 5 * np.sqrt(P[0] * (1 - P[0]) / out.size))


def test_pure_python_panel_matches(monkeypatch):
    from latent_markov import markov_core
    from latent_markov.model_zoo import baseline_scenario

    model, p0, _ = baseline_scenario("sim-baseline")
    p0 = np.array([0.999, 5e-4, 3e-4, 1e-4, 1e-4])
    a = markov_core.simulate_panel(model, p0, 30000, 8, seed=17)
    monkeypatch.setattr(markov_core, "kernels", _kernels_py)
    b = markov_core.simulate_panel(model, p0, 30000, 8, seed=17)
    np.testing.assert_array_equal(a.histories, b.histories)
