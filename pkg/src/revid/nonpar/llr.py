"""Local-linear conditional means on tensor grids and scattered points."""

from __future__ import annotations

import itertools
import logging

import numpy as np

from . import backend
from .grid import GridFn

logger = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    pass


def llr_at_points(
    y: np.ndarray,
    X: np.ndarray,
    queries: np.ndarray,
    h: np.ndarray,
    w0: np.ndarray | None = None,
    widen: float = 1.6,
    max_widen: int = 3,
    min_neff: float | None = None,
):
    """Local-linear fit of E[y|X] at scattered query points.

    Returns (values, gradients, neff).  Queries whose effective local sample
    is too thin are re-fit with widened bandwidths; queries that stay
    singular raise.
    """
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise ValueError("bandwidths must be positive")
    n, d = X.shape
    p = d + 1
    if min_neff is None:
        min_neff = p + 1.0
    if w0 is None:
        w0 = np.ones(n)

    out_val = np.full(queries.shape[0], np.nan)
    out_grad = np.full((queries.shape[0], d), np.nan)
    out_neff = np.zeros(queries.shape[0])

    todo = np.arange(queries.shape[0])
    h_cur = h.copy()
    for attempt in range(max_widen + 1):
        A, b, sw, sw2 = backend.llr_moments(y, X, w0, queries[todo], h_cur)
        neff = np.divide(sw * sw, sw2, out=np.zeros_like(sw), where=sw2 > 0)
        ok = neff >= min_neff
        if ok.any():
            Ao = A[ok]
            ridge = 1e-10 * np.trace(Ao, axis1=1, axis2=2)[:, None] / p
            Ao = Ao + ridge[:, :, None] * np.eye(p)
            try:
                coef = np.linalg.solve(Ao, b[ok][..., None])[..., 0]
            except np.linalg.LinAlgError:
                coef = np.einsum("qij,qj->qi", np.linalg.pinv(Ao), b[ok])
            idx = todo[ok]
            out_val[idx] = coef[:, 0]
            out_grad[idx] = coef[:, 1:]
            out_neff[idx] = neff[ok]
        todo = todo[~ok]
        if todo.size == 0:
            break
        if attempt < max_widen:
            h_cur = h_cur * widen
            logger.warning(
                "%d query point(s) with thin local sample; widening bandwidths to %s",
                todo.size,
                np.array2string(h_cur, precision=4),
            )
    if todo.size:
        raise EstimationError(
            f"{todo.size} query point(s) remain singular after widening the "
            f"bandwidth {max_widen} times"
        )
    return out_val, out_grad, out_neff


def cond_mean(
    y: np.ndarray,
    X: np.ndarray,
    axes: list[np.ndarray],
    h: np.ndarray,
    w0: np.ndarray | None = None,
    names: list[str] | None = None,
) -> GridFn:
    """Local-linear estimate of E[y|X] on a tensor query grid.

    Returns a GridFn whose analytic per-axis derivative tensors are the
    local-linear slopes.  Queries outside the data's support hull are
    flagged with a warning (they are still estimated, not extrapolated by a
    separate rule, but their neighborhoods are one-sided).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    axes = [np.asarray(a, dtype=float) for a in axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    queries = np.column_stack([g.ravel() for g in mesh])
    lo, hi = X.min(axis=0), X.max(axis=0)
    outside = int(np.sum(np.any((queries < lo) | (queries > hi), axis=1)))
    if outside:
        logger.warning("%d grid node(s) outside the data hull", outside)
    vals, grads, _ = llr_at_points(y, X, queries, h, w0=w0)
    shape = tuple(len(a) for a in axes)
    derivs = {j: grads[:, j].reshape(shape) for j in range(len(axes))}
    return GridFn(axes=axes, values=vals.reshape(shape), names=names, derivs=derivs)


def product_axes(*arrays: np.ndarray) -> np.ndarray:
    """Cartesian product of 1-d arrays as an (n, d) point matrix."""
    return np.array(list(itertools.product(*[np.asarray(a).tolist() for a in arrays])))
