# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: interpolation gather/scatter and masked softmax.

Mirrors nielab._pykernels. The scatter accumulates in the same order as
the numpy fallback (all low-node contributions, then all high-node ones)
so both backends produce bitwise-identical gradients.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, INFINITY

cnp.import_array()


def interp_gather(const double[:, :, ::1] values, const long[::1] idx, const double[::1] w):
    cdef Py_ssize_t nb = values.shape[0]
    cdef Py_ssize_t nd = values.shape[2]
    cdef Py_ssize_t nm = idx.shape[0]
    cdef cnp.ndarray out_arr = np.empty((nb, nm, nd), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, m, c, j
    cdef double wm
    for b in range(nb):
        for m in range(nm):
            j = idx[m]
            wm = w[m]
            for c in range(nd):
                out[b, m, c] = (1.0 - wm) * values[b, j, c] + wm * values[b, j + 1, c]
    return out_arr


def interp_scatter(const double[:, :, ::1] dout, const long[::1] idx, const double[::1] w, Py_ssize_t n_grid):
    cdef Py_ssize_t nb = dout.shape[0]
    cdef Py_ssize_t nm = dout.shape[1]
    cdef Py_ssize_t nd = dout.shape[2]
    cdef cnp.ndarray dv_arr = np.zeros((nb, n_grid, nd), dtype=np.float64)
    cdef double[:, :, ::1] dv = dv_arr
    cdef Py_ssize_t b, m, c, j
    cdef double wm
    # Two passes keep the accumulation order identical to the numpy fallback.
    for b in range(nb):
        for m in range(nm):
            j = idx[m]
            wm = 1.0 - w[m]
            for c in range(nd):
                dv[b, j, c] += wm * dout[b, m, c]
    for b in range(nb):
        for m in range(nm):
            j = idx[m] + 1
            wm = w[m]
            for c in range(nd):
                dv[b, j, c] += wm * dout[b, m, c]
    return dv_arr


def masked_softmax_fwd(const double[:, ::1] scores, mask):
    cdef Py_ssize_t nr = scores.shape[0]
    cdef Py_ssize_t nl = scores.shape[1]
    cdef cnp.ndarray out_arr = np.empty((nr, nl), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef const cnp.uint8_t[:, ::1] mk
    cdef bint has_mask = mask is not None
    cdef Py_ssize_t r, l, mrows = 1, mr = 0
    cdef double row_max, total, e
    if has_mask:
        mk = mask
        mrows = mk.shape[0]
    for r in range(nr):
        if has_mask:
            mr = r % mrows
        row_max = -INFINITY
        for l in range(nl):
            if (not has_mask or mk[mr, l]) and scores[r, l] > row_max:
                row_max = scores[r, l]
        if row_max == -INFINITY:
            raise ValueError("softmax row has every entry masked")
        total = 0.0
        for l in range(nl):
            if has_mask and not mk[mr, l]:
                out[r, l] = 0.0
            else:
                e = c_exp(scores[r, l] - row_max)
                out[r, l] = e
                total += e
        for l in range(nl):
            out[r, l] /= total
    return out_arr


def masked_softmax_bwd(const double[:, ::1] probs, const double[:, ::1] dprobs):
    cdef Py_ssize_t nr = probs.shape[0]
    cdef Py_ssize_t nl = probs.shape[1]
    cdef cnp.ndarray out_arr = np.empty((nr, nl), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, l
    cdef double inner
    for r in range(nr):
        inner = 0.0
        for l in range(nl):
            inner += probs[r, l] * dprobs[r, l]
        for l in range(nl):
            out[r, l] = probs[r, l] * (dprobs[r, l] - inner)
    return out_arr


def rowmatvec(const double[:, :, ::1] kmat, const double[:, :, ::1] vec):
    cdef Py_ssize_t nm = kmat.shape[0]
    cdef Py_ssize_t nd = kmat.shape[1]
    cdef Py_ssize_t nb = vec.shape[0]
    cdef cnp.ndarray out_arr = np.empty((nb, nm, nd), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, m, r, c
    cdef double acc
    for b in range(nb):
        for m in range(nm):
            for r in range(nd):
                acc = 0.0
                for c in range(nd):
                    acc += kmat[m, r, c] * vec[b, m, c]
                out[b, m, r] = acc
    return out_arr


def rowmatvec_bwd_k(const double[:, :, ::1] grad, const double[:, :, ::1] vec):
    cdef Py_ssize_t nb = grad.shape[0]
    cdef Py_ssize_t nm = grad.shape[1]
    cdef Py_ssize_t nd = grad.shape[2]
    cdef cnp.ndarray out_arr = np.zeros((nm, nd, nd), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, m, r, c
    for b in range(nb):
        for m in range(nm):
            for r in range(nd):
                for c in range(nd):
                    out[m, r, c] += grad[b, m, r] * vec[b, m, c]
    return out_arr


def rowmatvec_bwd_v(const double[:, :, ::1] kmat, const double[:, :, ::1] grad):
    cdef Py_ssize_t nb = grad.shape[0]
    cdef Py_ssize_t nm = kmat.shape[0]
    cdef Py_ssize_t nd = kmat.shape[1]
    cdef cnp.ndarray out_arr = np.empty((nb, nm, nd), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, m, r, c
    cdef double acc
    for b in range(nb):
        for m in range(nm):
            for c in range(nd):
                acc = 0.0
                for r in range(nd):
                    acc += kmat[m, r, c] * grad[b, m, r]
                out[b, m, c] = acc
    return out_arr
