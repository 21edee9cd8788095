"""Backend selection for the simulation kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``LATENT_MARKOV_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("LATENT_MARKOV_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

uniforms = _impl.uniforms
categorical_step = _impl.categorical_step
stream_key = _impl.stream_key

__all__ = ["BACKEND", "uniforms", "categorical_step", "stream_key"]
