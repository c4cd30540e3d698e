# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel-sum primitives; same contract as ``_fallback``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 1.0 / sqrt(2.0)
cdef double INV_SQRT2PI = 1.0 / sqrt(2.0 * 3.14159265358979323846)


def llr_moments(object y_in, object X_in, object w0_in, object XQ_in, object h_in):
    """Weighted local-linear moment sums at each query point."""
    cdef double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef double[:, ::1] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef double[::1] w0 = np.ascontiguousarray(w0_in, dtype=np.float64)
    cdef double[:, ::1] XQ = np.ascontiguousarray(XQ_in, dtype=np.float64)
    cdef double[::1] h = np.ascontiguousarray(h_in, dtype=np.float64)

    cdef Py_ssize_t nq = XQ.shape[0]
    cdef Py_ssize_t d = XQ.shape[1]
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = d + 1

    A_arr = np.zeros((nq, p, p))
    b_arr = np.zeros((nq, p))
    sw_arr = np.zeros(nq)
    sw2_arr = np.zeros(nq)
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, ::1] b = b_arr
    cdef double[::1] sw = sw_arr
    cdef double[::1] sw2 = sw2_arr

    cdef Py_ssize_t q, i, j, k
    cdef double w, t, acc
    cdef double[8] u  # design row; supports up to 7 regressors

    if d > 7:
        raise ValueError("llr_moments supports at most 7 regressors")

    for q in range(nq):
        for i in range(n):
            acc = 0.0
            u[0] = 1.0
            for j in range(d):
                t = (X[i, j] - XQ[q, j]) / h[j]
                acc += t * t
                u[j + 1] = X[i, j] - XQ[q, j]
            w = w0[i] * exp(-0.5 * acc)
            if w == 0.0:
                continue
            sw[q] += w
            sw2[q] += w * w
            for j in range(p):
                b[q, j] += w * u[j] * y[i]
                for k in range(j, p):
                    A[q, j, k] += w * u[j] * u[k]
        for j in range(p):
            for k in range(j + 1, p):
                A[q, k, j] = A[q, j, k]
    return A_arr, b_arr, sw_arr, sw2_arr


def cdf_ll_moments(object ms_in, object X_in, object w0_in, object XQ_in,
                   object m_nodes_in, double hm, object h_in):
    """Local-linear moment sums for the smoothed conditional CDF."""
    cdef double[::1] ms = np.ascontiguousarray(ms_in, dtype=np.float64)
    cdef double[:, ::1] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef double[::1] w0 = np.ascontiguousarray(w0_in, dtype=np.float64)
    cdef double[:, ::1] XQ = np.ascontiguousarray(XQ_in, dtype=np.float64)
    cdef double[::1] m_nodes = np.ascontiguousarray(m_nodes_in, dtype=np.float64)
    cdef double[::1] h = np.ascontiguousarray(h_in, dtype=np.float64)

    cdef Py_ssize_t nq = XQ.shape[0]
    cdef Py_ssize_t d = XQ.shape[1]
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_m = m_nodes.shape[0]
    cdef Py_ssize_t p = d + 1

    if d > 7:
        raise ValueError("cdf_ll_moments supports at most 7 regressors")

    # responses shared across queries
    resp_a_arr = np.empty((n_m, n))
    resp_b_arr = np.empty((n_m, n))
    cdef double[:, ::1] resp_a = resp_a_arr
    cdef double[:, ::1] resp_b = resp_b_arr
    cdef Py_ssize_t i, q, j, k, t
    cdef double tv
    for t in range(n_m):
        for i in range(n):
            tv = (m_nodes[t] - ms[i]) / hm
            resp_a[t, i] = 0.5 * (1.0 + erf(tv * INV_SQRT2))
            resp_b[t, i] = exp(-0.5 * tv * tv) * INV_SQRT2PI / hm

    A_arr = np.zeros((nq, p, p))
    B_arr = np.zeros((nq, n_m, 2, p))
    sw_arr = np.zeros(nq)
    sw2_arr = np.zeros(nq)
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, :, :, ::1] B = B_arr
    cdef double[::1] sw = sw_arr
    cdef double[::1] sw2 = sw2_arr

    cdef double w, acc, wa, wb
    cdef double[8] u

    for q in range(nq):
        for i in range(n):
            if w0[i] == 0.0:
                continue
            acc = 0.0
            u[0] = 1.0
            for j in range(d):
                tv = (X[i, j] - XQ[q, j]) / h[j]
                acc += tv * tv
                u[j + 1] = X[i, j] - XQ[q, j]
            w = w0[i] * exp(-0.5 * acc)
            if w < 1e-300:
                continue
            sw[q] += w
            sw2[q] += w * w
            for j in range(p):
                for k in range(j, p):
                    A[q, j, k] += w * u[j] * u[k]
            for t in range(n_m):
                wa = w * resp_a[t, i]
                wb = w * resp_b[t, i]
                for j in range(p):
                    B[q, t, 0, j] += wa * u[j]
                    B[q, t, 1, j] += wb * u[j]
        for j in range(p):
            for k in range(j + 1, p):
                A[q, k, j] = A[q, j, k]
    return A_arr, B_arr, sw_arr, sw2_arr


def cdf_moments(object ms_in, object Xc_in, object W_in, object mq_in,
                object XQ_in, double hm, object hX_in):
    """Weighted sums behind the smoothed conditional CDF and its partials."""
    cdef double[::1] ms = np.ascontiguousarray(ms_in, dtype=np.float64)
    cdef double[:, ::1] Xc = np.ascontiguousarray(Xc_in, dtype=np.float64)
    cdef double[:, ::1] W = np.ascontiguousarray(W_in, dtype=np.float64)
    cdef double[::1] mq = np.ascontiguousarray(mq_in, dtype=np.float64)
    cdef double[:, ::1] XQ = np.ascontiguousarray(XQ_in, dtype=np.float64)
    cdef double[::1] hX = np.ascontiguousarray(hX_in, dtype=np.float64)

    cdef Py_ssize_t nq = mq.shape[0]
    cdef Py_ssize_t n = ms.shape[0]
    cdef Py_ssize_t nw = W.shape[0]
    cdef Py_ssize_t dX = Xc.shape[1] if Xc.size else 0
    cdef Py_ssize_t nout = 3 + 2 * dX

    out_arr = np.zeros((nq, nw, nout))
    cdef double[:, :, ::1] out = out_arr

    cdef Py_ssize_t q, i, j, w
    cdef double t, acc, K, a, pdf, wv, aKw, Kw, dj
    cdef double[8] d_loc

    if dX > 8:
        raise ValueError("cdf_moments supports at most 8 kernel dimensions")

    for q in range(nq):
        for i in range(n):
            acc = 0.0
            for j in range(dX):
                t = (Xc[i, j] - XQ[q, j]) / hX[j]
                acc += t * t
                d_loc[j] = (Xc[i, j] - XQ[q, j]) / (hX[j] * hX[j])
            K = exp(-0.5 * acc)
            if K == 0.0:
                continue
            t = (mq[q] - ms[i]) / hm
            a = 0.5 * (1.0 + erf(t * INV_SQRT2))
            pdf = exp(-0.5 * t * t) * INV_SQRT2PI / hm
            for w in range(nw):
                wv = W[w, i]
                if wv == 0.0:
                    continue
                aKw = a * K * wv
                Kw = K * wv
                out[q, w, 0] += aKw
                out[q, w, 1] += pdf * Kw
                out[q, w, 2] += Kw
                for j in range(dX):
                    dj = d_loc[j]
                    out[q, w, 3 + j] += aKw * dj
                    out[q, w, 3 + dX + j] += Kw * dj
    return out_arr
