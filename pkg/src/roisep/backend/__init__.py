"""Backend selection for the hot kernels.

At import time the compiled Cython core is preferred when it built
successfully; otherwise the pure-numpy fallback is used. Override with the
``ROISEP_BACKEND`` environment variable (``auto``, ``compiled``, ``python``)
or :func:`use` at runtime.

The compiled core implements the float32 paths (plus float64 for the RIR
scatter); float64 kernel calls always route to the numpy fallback, which is
what the double-precision test oracles use.
"""

import os

import numpy as np

from . import python as _py

try:
    from . import _core as _core
except ImportError:
    _core = None

_active = "python"


def available():
    """Names of usable backends."""
    return ("python", "compiled") if _core is not None else ("python",)


def use(name):
    """Select the kernel backend: 'auto', 'compiled' or 'python'."""
    global _active
    if name == "auto":
        _active = "compiled" if _core is not None else "python"
    elif name == "compiled":
        if _core is None:
            raise RuntimeError("compiled backend is not available (extension not built)")
        _active = "compiled"
    elif name == "python":
        _active = "python"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return _active


def active():
    """Name of the backend currently in use."""
    return _active


def _impl(dtype):
    if _active == "compiled" and dtype == np.float32:
        return _core
    return _py


def gru_seq_forward(xw, h0, u):
    return _impl(xw.dtype).gru_seq_forward(xw, h0, u)


def gru_seq_backward(h_seq, h0, u, z, r, n, hun, gh_seq):
    return _impl(h_seq.dtype).gru_seq_backward(h_seq, h0, u, z, r, n, hun, gh_seq)


def conv2d_frame(xpair, w, b):
    mod = _impl(xpair.dtype)
    if mod is _core:
        xpair = np.ascontiguousarray(xpair)
    return mod.conv2d_frame(xpair, w, b)


def tconv2d_frame(xpair, w, b, out_f):
    mod = _impl(xpair.dtype)
    if mod is _core:
        xpair = np.ascontiguousarray(xpair)
    return mod.tconv2d_frame(xpair, w, b, out_f)


def ism_scatter(delays, amps, out_len):
    if _active == "compiled":
        return _core.ism_scatter(
            np.ascontiguousarray(delays, dtype=np.float64),
            np.ascontiguousarray(amps, dtype=np.float64),
            out_len,
        )
    return _py.ism_scatter(delays, amps, out_len)


use(os.environ.get("ROISEP_BACKEND", "auto"))
