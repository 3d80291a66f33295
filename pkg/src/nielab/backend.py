"""Backend selection for the hot kernels.

The compiled Cython extension is preferred; the pure numpy implementation
is used when the extension is unavailable or NIELAB_PURE is set to a
non-empty value other than "0". Both backends share one contract, so the
choice only affects speed.
"""

import os

import numpy as np

from . import _pykernels


def _want_pure():
    return os.environ.get("NIELAB_PURE", "0") not in ("", "0")


if _want_pure():
    _impl = _pykernels
    COMPILED = False
else:
    try:
        from . import _ckernels as _impl
        COMPILED = True
    except ImportError:
        _impl = _pykernels
        COMPILED = False

BACKEND_NAME = "compiled" if COMPILED else "pure"


def interp_gather(values, idx, w):
    values = np.ascontiguousarray(values, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    return _impl.interp_gather(values, idx, w)


def interp_scatter(dout, idx, w, n_grid):
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    return _impl.interp_scatter(dout, idx, w, int(n_grid))


def masked_softmax_fwd(scores, mask):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if mask is not None:
        mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return _impl.masked_softmax_fwd(scores, mask)


def masked_softmax_bwd(probs, dprobs):
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    dprobs = np.ascontiguousarray(dprobs, dtype=np.float64)
    return _impl.masked_softmax_bwd(probs, dprobs)


def _c3(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def rowmatvec(kmat, vec):
    return _impl.rowmatvec(_c3(kmat), _c3(vec))


def rowmatvec_bwd_k(grad, vec):
    return _impl.rowmatvec_bwd_k(_c3(grad), _c3(vec))


def rowmatvec_bwd_v(kmat, grad):
    return _impl.rowmatvec_bwd_v(_c3(kmat), _c3(grad))
