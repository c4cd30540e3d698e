"""NumPy implementations of the kernel-sum primitives.

Chunked over query points to bound the size of broadcast temporaries.
Both functions return raw weighted sums; assembling estimates out of them
is the caller's job so that the Cython backend can share the same contract.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

_CHUNK = 64
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def llr_moments(y, X, w0, XQ, h):
    """Weighted local-linear moment sums at each query point.

    For query q with Gaussian product weights w_i = w0_i * prod_j
    exp(-((X_ij-q_j)/h_j)^2 / 2) and design u_i = (1, X_i - q), returns

        A[q] = sum_i w_i u_i u_i',  b[q] = sum_i w_i u_i y_i,
        sw[q] = sum_i w_i,          sw2[q] = sum_i w_i^2.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    w0 = np.ascontiguousarray(w0, dtype=np.float64)
    XQ = np.ascontiguousarray(XQ, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    nq, d = XQ.shape
    p = d + 1
    A = np.empty((nq, p, p))
    b = np.empty((nq, p))
    sw = np.empty(nq)
    sw2 = np.empty(nq)
    for s in range(0, nq, _CHUNK):
        q = XQ[s : s + _CHUNK]  # (c, d)
        dx = X[None, :, :] - q[:, None, :]  # (c, N, d)
        t = dx / h
        w = np.exp(-0.5 * np.einsum("cnd,cnd->cn", t, t)) * w0  # (c, N)
        u = np.concatenate([np.ones_like(dx[..., :1]), dx], axis=2)  # (c, N, p)
        A[s : s + _CHUNK] = np.einsum("cn,cni,cnj->cij", w, u, u)
        b[s : s + _CHUNK] = np.einsum("cn,cni,n->ci", w, u, y)
        sw[s : s + _CHUNK] = w.sum(axis=1)
        sw2[s : s + _CHUNK] = (w * w).sum(axis=1)
    return A, b, sw, sw2


def cdf_ll_moments(ms, X, w0, XQ, m_nodes, hm, h):
    """Local-linear moment sums for the smoothed conditional CDF.

    For query q with weights w_i = w0_i * prod_j exp(-((X_ij-XQ_qj)/h_j)^2/2)
    and design u_i = (1, X_i - XQ_q), with responses a_i = Phi((m-ms_i)/hm)
    and b_i = phi((m-ms_i)/hm)/hm for every m in m_nodes, returns

        A[q] = sum w u u',  B[q, t, 0] = sum w u a_i(m_t),
        B[q, t, 1] = sum w u b_i(m_t),  sw[q], sw2[q].

    Solving A x = B gives the CDF level and its slopes in the conditioning
    directions (response a) and the response density (response b, intercept),
    free of the density-gradient bias of raw kernel derivatives.
    """
    ms = np.ascontiguousarray(ms, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    w0 = np.ascontiguousarray(w0, dtype=np.float64)
    XQ = np.ascontiguousarray(XQ, dtype=np.float64)
    m_nodes = np.ascontiguousarray(m_nodes, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    nq, d = XQ.shape
    n_m = m_nodes.shape[0]
    p = d + 1
    t = (m_nodes[:, None] - ms[None, :]) / hm  # (n_m, N)
    resp_a = ndtr(t)
    resp_b = np.exp(-0.5 * t * t) * (_INV_SQRT2PI / hm)
    A = np.empty((nq, p, p))
    B = np.empty((nq, n_m, 2, p))
    sw = np.empty(nq)
    sw2 = np.empty(nq)
    for q in range(nq):
        dx = X - XQ[q]  # (N, d)
        tt = dx / h
        w = w0 * np.exp(-0.5 * np.einsum("nd,nd->n", tt, tt))
        u = np.concatenate([np.ones((X.shape[0], 1)), dx], axis=1)  # (N, p)
        wu = u * w[:, None]
        A[q] = u.T @ wu
        B[q, :, 0, :] = resp_a @ wu
        B[q, :, 1, :] = resp_b @ wu
        sw[q] = w.sum()
        sw2[q] = (w * w).sum()
    return A, B, sw, sw2


def cdf_moments(ms, Xc, W, mq, XQ, hm, hX):
    """Weighted sums behind the smoothed conditional CDF and its partials.

    With t_i = (mq_q - ms_i)/hm, a_i = Phi(t_i), p_i = phi(t_i)/hm,
    K_i = prod_j exp(-((Xc_ij - XQ_qj)/hX_j)^2 / 2) and
    d_ij = (Xc_ij - XQ_qj)/hX_j^2, returns for every query q and every
    sample-weight row w in W:

        out[q, w] = [sum a K w, sum p K w, sum K w,
                     {sum a K w d_j}_j, {sum K w d_j}_j].
    """
    ms = np.ascontiguousarray(ms, dtype=np.float64)
    Xc = np.ascontiguousarray(Xc, dtype=np.float64)
    W = np.ascontiguousarray(W, dtype=np.float64)
    mq = np.ascontiguousarray(mq, dtype=np.float64)
    XQ = np.ascontiguousarray(XQ, dtype=np.float64)
    hX = np.ascontiguousarray(hX, dtype=np.float64)
    nq = mq.shape[0]
    nw = W.shape[0]
    dX = Xc.shape[1] if Xc.size else 0
    nout = 3 + 2 * dX
    out = np.empty((nq, nw, nout))
    for s in range(0, nq, _CHUNK):
        mqc = mq[s : s + _CHUNK]
        t = (mqc[:, None] - ms[None, :]) / hm  # (c, N)
        a = ndtr(t)
        pdf = np.exp(-0.5 * t * t) * (_INV_SQRT2PI / hm)
        if dX:
            q = XQ[s : s + _CHUNK]
            dx = Xc[None, :, :] - q[:, None, :]  # (c, N, dX)
            u = dx / hX
            K = np.exp(-0.5 * np.einsum("cnd,cnd->cn", u, u))
        else:
            K = np.ones_like(a)
        aK = a * K
        for w in range(nw):
            wv = W[w]
            out[s : s + _CHUNK, w, 0] = aK @ wv
            out[s : s + _CHUNK, w, 1] = (pdf * K) @ wv
            out[s : s + _CHUNK, w, 2] = K @ wv
            for j in range(dX):
                dj = dx[..., j] / (hX[j] * hX[j])
                out[s : s + _CHUNK, w, 3 + j] = (aK * dj) @ wv
                out[s : s + _CHUNK, w, 3 + dX + j] = (K * dj) @ wv
    return out
