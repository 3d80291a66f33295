"""Pure numpy fallbacks for the compiled hot kernels.

Same call signatures and numerical contracts as ``nielab._ckernels``.
Inputs are assumed validated and C-contiguous by ``nielab.backend``.
"""

import numpy as np


def interp_gather(values, idx, w):
    """Linear interpolation gather.

    values: [B, N, d], idx: int64 [M] with idx[m] in [0, N-2], w: [M].
    Returns out[b, m, :] = (1-w[m]) * values[b, idx[m], :] + w[m] * values[b, idx[m]+1, :].
    """
    lo = values[:, idx, :]
    hi = values[:, idx + 1, :]
    wc = w[None, :, None]
    return (1.0 - wc) * lo + wc * hi


def interp_scatter(dout, idx, w, n_grid):
    """Adjoint of interp_gather: scatter-add dout back onto the grid rows."""
    b, _, d = dout.shape
    wc = w[None, :, None]
    dvalues = np.zeros((b, n_grid, d), dtype=np.float64)
    np.add.at(dvalues, (slice(None), idx), (1.0 - wc) * dout)
    np.add.at(dvalues, (slice(None), idx + 1), wc * dout)
    return dvalues


def masked_softmax_fwd(scores, mask):
    """Row-wise softmax over the last axis with optional exclusion mask.

    scores: [R, L]; mask: uint8 [M, L] (nonzero = key participates) or None,
    where M divides R and row r uses mask row r % M (cyclic broadcast, so a
    shared [L, L] mask serves a whole batch without copies). Masked entries
    get probability exactly 0. Raises on fully-masked rows.
    """
    if mask is None:
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    keep = mask != 0
    if not keep.any(axis=1).all():
        raise ValueError("softmax row has every entry masked")
    r, l = scores.shape
    m = keep.shape[0]
    blocks = scores.reshape(r // m, m, l)
    row_max = np.where(keep[None], blocks, -np.inf).max(axis=2, keepdims=True)
    e = np.where(keep[None], np.exp(blocks - row_max), 0.0)
    out = e / e.sum(axis=2, keepdims=True)
    return out.reshape(r, l)


def masked_softmax_bwd(probs, dprobs):
    """VJP of masked_softmax_fwd: p * (dp - sum(p * dp)) per row."""
    inner = (probs * dprobs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def rowmatvec(kmat, vec):
    """Row-wise matrix-vector products, batched on the vector side.

    kmat: [M, d, d]; vec: [B, M, d]. out[b, m, r] = sum_c kmat[m,r,c] * vec[b,m,c].
    """
    return np.einsum("mrc,bmc->bmr", kmat, vec)


def rowmatvec_bwd_k(grad, vec):
    """d(out)/d(kmat): [M, d, d], summed over the batch axis."""
    return np.einsum("bmr,bmc->mrc", grad, vec)


def rowmatvec_bwd_v(kmat, grad):
    """d(out)/d(vec): [B, M, d]."""
    return np.einsum("mrc,bmr->bmc", kmat, grad)
