"""Pure numpy versions of the panel-simulation kernels.

Same counter-based generator (SplitMix64 finalizer over ``key + (i+1)*golden``)
as the compiled module, so both backends give bit-identical panels.
"""
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _fmix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _fmix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed, stream):
    seed = int(seed) & _MASK
    return _fmix_int(_fmix_int((seed + 0x9E3779B97F4A7C15) & _MASK) ^ (int(stream) & _MASK))


def _raw_uniforms(key: int, n: int) -> np.ndarray:
    counters = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + counters * _GOLDEN
        bits = _fmix(z)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def uniforms(seed, stream, n):
    """``n`` doubles in [0, 1) from the counter stream ``(seed, stream)``."""
    return _raw_uniforms(stream_key(seed, stream), int(n))


def categorical_step(states, cum, seed, stream, num_threads=1):
    states = np.asarray(states, dtype=np.int64)
    cum = np.asarray(cum, dtype=np.float64)
    u = _raw_uniforms(stream_key(seed, stream), states.shape[0])
    J = cum.shape[1]
    # index of first cum entry exceeding u, capped at J-1 like the loop version
    rows = cum[states, : J - 1]
    return (u[:, None] >= rows).sum(axis=1).astype(np.int64)
