"""Tensor-grid functions with multilinear interpolation.

GridFn carries estimated functions (revenue mean, control function,
production function, ...) on rectilinear grids, together with optional
per-axis derivative tensors produced analytically by the estimators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


@dataclass
class GridFn:
    """Real-valued function on a rectilinear grid.

    ``axes`` are strictly increasing breakpoint arrays (singleton axes
    allowed); ``values`` has shape ``tuple(len(a) for a in axes)``.
    ``derivs`` may cache analytic partial-derivative tensors by axis index.
    """

    axes: list[np.ndarray]
    values: np.ndarray
    names: list[str] | None = None
    derivs: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        self.values = np.asarray(self.values, dtype=float)
        if tuple(len(a) for a in self.axes) != self.values.shape:
            raise ValueError("axes lengths do not match values shape")
        for a in self.axes:
            if a.size > 1 and np.any(np.diff(a) <= 0):
                raise ValueError("axes must be strictly increasing")

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def in_hull(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ok = np.ones(pts.shape[0], dtype=bool)
        for j, a in enumerate(self.axes):
            ok &= (pts[:, j] >= a[0] - 1e-12) & (pts[:, j] <= a[-1] + 1e-12)
        return ok

    def _weights(self, pts: np.ndarray):
        idx = []
        frac = []
        for j, a in enumerate(self.axes):
            x = pts[:, j]
            if a.size == 1:
                idx.append(np.zeros(x.shape, dtype=np.intp))
                frac.append(np.zeros_like(x))
                continue
            i = np.clip(np.searchsorted(a, x, side="right") - 1, 0, a.size - 2)
            t = (x - a[i]) / (a[i + 1] - a[i])
            idx.append(i)
            frac.append(np.clip(t, 0.0, 1.0))
        return idx, frac

    def __call__(self, pts, tensor: np.ndarray | None = None) -> np.ndarray:
        """Multilinear interpolation at points (n, ndim); clamps outside the
        hull (use ``in_hull`` to flag those separately)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != self.ndim:
            raise ValueError(f"expected points with {self.ndim} columns")
        vals = self.values if tensor is None else tensor
        idx, frac = self._weights(pts)
        out = np.zeros(pts.shape[0])
        for corner in range(1 << self.ndim):
            w = np.ones(pts.shape[0])
            ind = []
            for j in range(self.ndim):
                hi = (corner >> j) & 1
                if self.axes[j].size == 1:
                    ind.append(idx[j])
                    if hi:
                        w = w * 0.0
                    continue
                ind.append(idx[j] + hi)
                w = w * (frac[j] if hi else (1.0 - frac[j]))
            if np.all(w == 0.0):
                continue
            out += w * vals[tuple(ind)]
        return out

    def partial(self, axis: int) -> "GridFn":
        """Derivative along an axis: the cached analytic tensor when present,
        otherwise central differences of the value grid."""
        if axis in self.derivs:
            dv = self.derivs[axis]
        elif self.axes[axis].size == 1:
            dv = np.zeros_like(self.values)
        else:
            dv = np.gradient(self.values, self.axes[axis], axis=axis)
        return GridFn(axes=list(self.axes), values=dv, names=self.names)

    def eval_partial(self, axis: int, pts) -> np.ndarray:
        if axis in self.derivs:
            return self(pts, tensor=self.derivs[axis])
        return self.partial(axis)(pts)

    # -- serialization -----------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        names = self.names or [f"x{j}" for j in range(self.ndim)]
        mesh = np.meshgrid(*self.axes, indexing="ij")
        data = {nm: g.ravel() for nm, g in zip(names, mesh)}
        data["value"] = self.values.ravel()
        for ax, dv in self.derivs.items():
            data[f"d_{names[ax]}"] = dv.ravel()
        return pd.DataFrame(data)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_json(self, path) -> None:
        payload = {
            "names": self.names or [f"x{j}" for j in range(self.ndim)],
            "axes": [a.tolist() for a in self.axes],
            "values": self.values.tolist(),
            "derivs": {str(k): v.tolist() for k, v in self.derivs.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "GridFn":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            axes=[np.asarray(a) for a in payload["axes"]],
            values=np.asarray(payload["values"]),
            names=payload.get("names"),
            derivs={int(k): np.asarray(v) for k, v in payload.get("derivs", {}).items()},
        )


def quantile_axis(
    x: np.ndarray,
    n_points: int = 21,
    lo: float = 0.05,
    hi: float = 0.95,
    include: tuple[float, ...] = (),
) -> np.ndarray:
    """Quantile-spaced breakpoints on [lo, hi] with extra points inserted.

    Estimation happens on-support only: the grid spans the central mass of
    the data and callers flag anything outside it.
    """
    qs = np.quantile(np.asarray(x, dtype=float), np.linspace(lo, hi, n_points))
    inc = np.unique(np.asarray(include, dtype=float))
    span = max(float(qs[-1] - qs[0]), 1e-12)
    if inc.size:
        # inserted points must survive verbatim; drop quantiles sitting on them
        tol = 1e-9 * span
        qs = qs[np.all(np.abs(qs[:, None] - inc[None, :]) > tol, axis=1)]
    pts = np.unique(np.concatenate([qs, inc]))
    # collapse near-duplicate quantiles that would ill-condition interpolation
    keep = [pts[0]]
    for v in pts[1:]:
        if v - keep[-1] > 1e-9 * span or np.any(np.isclose(v, inc, rtol=0, atol=0)):
            keep.append(v)
    return np.asarray(keep)
