"""Axis-aligned path integration of derivative fields.

The identification arguments reconstruct functions from their estimated
partial derivatives by telescoping along one axis at a time: when segment j
is integrated, axes earlier in the ordering sit at the origin and axes later
sit at the target.
"""

from __future__ import annotations

import numpy as np


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-8, max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature of a scalar function on [a, b]."""
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, fa, b, fb, m, fm, whole, tol, depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return recurse(a, fa, m, fm, lm, flm, left, 0.5 * tol, depth + 1) + recurse(
            m, fm, b, fb, rm, frm, right, 0.5 * tol, depth + 1
        )

    return recurse(a, fa, b, fb, m, fm, whole, tol, 0)


def path_integrate(
    derivs: dict[int, object],
    origin: np.ndarray,
    target: np.ndarray,
    order: list[int] | None = None,
    tol: float = 1e-8,
) -> float:
    """Sum of 1-d integrals of per-axis derivative evaluators along the
    axis-aligned path from origin to target.

    ``derivs[j]`` must be callable on an (n, ndim) point array (a GridFn of
    the j-th partial works).  Axes absent from ``order`` are required to
    agree between origin and target.
    """
    origin = np.asarray(origin, dtype=float)
    target = np.asarray(target, dtype=float)
    ndim = origin.shape[0]
    if order is None:
        order = [j for j in range(ndim) if not np.isclose(origin[j], target[j])] or [0]
    total = 0.0
    for pos, ax in enumerate(order):
        if np.isclose(origin[ax], target[ax]):
            continue
        point = target.copy()
        for earlier in order[:pos]:
            point[earlier] = origin[earlier]

        fn = derivs[ax]

        def seg(s, point=point, ax=ax, fn=fn):
            pt = point.copy()
            pt[ax] = s
            val = np.asarray(fn(pt[None, :]), dtype=float).ravel()[0]
            if not np.isfinite(val):
                raise FloatingPointError(
                    f"derivative evaluator for axis {ax} returned a non-finite "
                    f"value on the integration path at {pt}"
                )
            return val

        total += adaptive_simpson(seg, origin[ax], target[ax], tol=tol)
    return total


def cumtrapz_from(ax: np.ndarray, vals: np.ndarray, i0: int, axis: int = 0) -> np.ndarray:
    """Cumulative trapezoid integral along ``axis`` anchored at index i0.

    Entry i holds the integral from ax[i0] to ax[i]; entries before the
    anchor are negative.  Exact for the piecewise-linear interpolant of the
    sampled derivative field.
    """
    vals = np.moveaxis(np.asarray(vals, dtype=float), axis, 0)
    n = vals.shape[0]
    if ax.shape[0] != n:
        raise ValueError("axis length mismatch")
    steps = np.diff(ax).reshape((n - 1,) + (1,) * (vals.ndim - 1)) if n > 1 else None
    out = np.zeros_like(vals)
    if n > 1:
        seg = 0.5 * (vals[1:] + vals[:-1]) * steps
        csum = np.concatenate([np.zeros_like(vals[:1]), np.cumsum(seg, axis=0)], axis=0)
        out = csum - csum[i0]
    return np.moveaxis(out, 0, axis)


def integrate_grid(
    axes: list[np.ndarray],
    deriv_grids: dict[int, np.ndarray],
    origin_idx: list[int],
    order: list[int],
) -> np.ndarray:
    """Value grid whose path integral from the origin node matches
    ``path_integrate`` of the piecewise-linear derivative fields.

    Segment j contributes the cumulative integral of deriv_grids[j] along
    axis j with earlier axes pinned at the origin node, broadcast over them.
    """
    shape = tuple(len(a) for a in axes)
    total = np.zeros(shape)
    done: list[int] = []
    for ax in order:
        if axes[ax].size == 1:
            done.append(ax)
            continue
        g = deriv_grids[ax]
        if g.shape != shape:
            raise ValueError("derivative grid shape mismatch")
        sl = [slice(None)] * len(shape)
        for earlier in done:
            sl[earlier] = slice(origin_idx[earlier], origin_idx[earlier] + 1)
        seg = cumtrapz_from(axes[ax], g[tuple(sl)], origin_idx[ax], axis=ax)
        total = total + seg  # broadcasting over pinned axes
        done.append(ax)
    return total
