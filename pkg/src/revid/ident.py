"""Three-step recovery of the control function, TFP, markups, production
function, prices and quantities from a firm-panel cross section.

Step 1 regresses observed log revenue on inputs and the demand shifter to
strip measurement error.  Step 2 inverts the material demand through the
conditional CDF of material: derivative ratios at a fixed lagged anchor
point give the partial derivatives of the control function up to one scale,
the scale is pinned by the two normalization points, and path integration
rebuilds the function.  Step 3 combines the revenue gradient, the control
function and the material share into markups and output elasticities, and
integrates the latter into the production function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .dgp import NormPoints
from .nonpar.condcdf import LAG_COLS, CondCdf, fit_cond_cdf
from .nonpar.grid import GridFn, quantile_axis
from .nonpar.integrate import cumtrapz_from, integrate_grid
from .nonpar.llr import cond_mean, llr_at_points
from .panel import PanelPair, V_COLUMNS

logger = logging.getLogger(__name__)


class IdentError(RuntimeError):
    pass


class AnchorError(IdentError):
    """No lagged variable satisfies the rank condition."""


class WeakInstrumentError(IdentError):
    pass


@dataclass(frozen=True)
class EstimationSettings:
    """Every tunable of the pipeline; all values land in the run manifest."""

    grid_points: int = 21
    grid_lo: float = 0.05
    grid_hi: float = 0.95
    bw_scale_current: float = 1.0
    bw_scale_lag: float = 2.5
    bw_scale_m: float = 1.0
    bw_rule: str = "silverman"
    norm_quantiles: tuple[float, float] = (0.30, 0.70)
    min_cell: int = 50
    anchor_grid_points: int = 5
    anchor_rel_floor: float = 0.02
    anchor_m_floor: float = 1e-2
    anchor_scan_widen: float = 2.0  # extra lag smoothing for the relevance scan
    density_floor: float = 1e-6
    field_trim_factor: float = 10.0
    field_smooth: int = 3  # odd window for the ratio-field median filter; 1 = off
    #: anchor-column quantiles pooled into the derivative fields; each sees a
    #: different productivity band, together they cover the support
    anchor_point_quantiles: tuple[float, ...] = (0.15, 0.3, 0.5, 0.7, 0.85)
    path_tol: float = 1e-8
    min_neff: float = 5.0
    overid_corr_threshold: float = 0.9
    overid_disc_threshold: float = 0.25
    weak_iv_fstat: float = 10.0

    def as_dict(self) -> dict:
        return {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()
        }


@dataclass(frozen=True)
class Anchor:
    """Chosen lagged variable and evaluation point for the derivative ratios."""

    col: str  # one of m_lag, k_lag, l_lag, z_lag
    point: dict[str, float]  # values for every lag column
    score: float
    scan: list[dict] = field(default_factory=list)


@dataclass
class Step1Result:
    revenue_fn: GridFn  # E[r | m, k, l, z] with analytic gradients
    rbar: np.ndarray
    eps: np.ndarray
    interior: np.ndarray
    h: np.ndarray


@dataclass
class ControlResult:
    anchor: Anchor
    anchor_scale: float  # the common factor multiplying every ratio field
    dh_anchor: float  # response of the lag-mean to the anchor variable there
    control_fn: GridFn  # over (m, k, l, z)
    omega: np.ndarray
    lagmean_fn: GridFn  # E[omega | lagged inputs, lagged shifter]
    eta: np.ndarray
    eta_sorted: np.ndarray
    interior: np.ndarray
    cell_offsets: dict[float, float] | None = None  # discrete-z constants
    lag_offsets: dict[float, float] | None = None
    norm: NormPoints | None = None
    settings: EstimationSettings | None = None
    usable_frac: float = 1.0
    fill_frac: float = 0.0  # grid cells carried over starved regions

    def eta_cdf(self, x) -> np.ndarray:
        return np.searchsorted(self.eta_sorted, np.asarray(x), side="right") / len(
            self.eta_sorted
        )


@dataclass
class Step3Result:
    markup: np.ndarray
    markup_fn: GridFn
    elasticity_m: GridFn
    elasticity_k: GridFn
    elasticity_l: GridFn
    prod_fn: GridFn  # over (m, k, l)
    y: np.ndarray
    p: np.ndarray
    elasticities: np.ndarray  # per-firm (d f/d m, d f/d k, d f/d l)
    valid: np.ndarray  # markup denominator positive
    interior: np.ndarray
    rbar: np.ndarray
    share: np.ndarray
    scale: float = 1.0  # set by the cross-period normalization stage


@dataclass
class OveridReport:
    anchors: list[str]
    corr: np.ndarray
    discrepancy: np.ndarray
    flagged: bool
    corr_threshold: float
    disc_threshold: float
    note: str = ""


@dataclass
class LaborIvResult:
    H: np.ndarray
    d: float
    theta_l_hat: float
    first_stage_f: float
    ols_theta_l: float
    resid_mean: float
    resid_instr_corr: float


# ---------------------------------------------------------------------------
# shared helpers


def _z_cells(pair: PanelPair) -> list[float] | list[None]:
    if pair.z_discrete:
        return sorted(np.unique(pair.z).tolist())
    return [None]


def _axis_index(ax: np.ndarray, v: float) -> int:
    i = int(np.argmin(np.abs(ax - v)))
    if not np.isclose(ax[i], v, rtol=0, atol=1e-9 * max(1.0, abs(v))):
        raise IdentError(f"value {v} is not a grid breakpoint")
    return i


def default_norm_points(pair: PanelPair, settings: EstimationSettings | None = None) -> NormPoints:
    """Normalization anchors: two interior material quantiles at the medians
    of the other inputs and the modal (or median) shifter value."""
    settings = settings or EstimationSettings()
    q0, q1 = settings.norm_quantiles
    m0, m1 = np.quantile(pair.m, [q0, q1])
    if pair.z_discrete:
        levels, counts = np.unique(pair.z, return_counts=True)
        z_star = float(levels[np.argmax(counts)])
    else:
        z_star = float(np.median(pair.z))
    return NormPoints(
        m0=float(m0),
        m1=float(m1),
        k=float(np.median(pair.k)),
        l=float(np.median(pair.l)),
        z=z_star,
    )


def current_axes(
    pair: PanelPair, norm: NormPoints, settings: EstimationSettings
) -> tuple[list[np.ndarray], list[str]]:
    """Grid axes over the current cross section (m, k, l [, z])."""
    s = settings
    axes = [
        quantile_axis(pair.m, s.grid_points, s.grid_lo, s.grid_hi, include=(norm.m0, norm.m1)),
        quantile_axis(pair.k, s.grid_points, s.grid_lo, s.grid_hi, include=(norm.k,)),
        quantile_axis(pair.l, s.grid_points, s.grid_lo, s.grid_hi, include=(norm.l,)),
    ]
    names = ["m", "k", "l"]
    if pair.z_discrete:
        axes.append(np.unique(pair.z))
    else:
        axes.append(quantile_axis(pair.z, s.grid_points, s.grid_lo, s.grid_hi, include=(norm.z,)))
    names.append("z")
    return axes, names


def lag_axes(
    pair: PanelPair, settings: EstimationSettings, include_point: dict[str, float] | None = None
) -> tuple[list[np.ndarray], list[str]]:
    s = settings
    inc = include_point or {}
    axes = [
        quantile_axis(
            pair.m_lag, s.grid_points, s.grid_lo, s.grid_hi, include=tuple(
                [inc["m_lag"]] if "m_lag" in inc else []
            )
        ),
        quantile_axis(
            pair.k_lag, s.grid_points, s.grid_lo, s.grid_hi, include=tuple(
                [inc["k_lag"]] if "k_lag" in inc else []
            )
        ),
        quantile_axis(
            pair.l_lag, s.grid_points, s.grid_lo, s.grid_hi, include=tuple(
                [inc["l_lag"]] if "l_lag" in inc else []
            )
        ),
    ]
    names = ["m_lag", "k_lag", "l_lag"]
    if pair.z_discrete:
        axes.append(np.unique(pair.z_lag))
    else:
        axes.append(
            quantile_axis(
                pair.z_lag, s.grid_points, s.grid_lo, s.grid_hi, include=tuple(
                    [inc["z_lag"]] if "z_lag" in inc else []
                )
            )
        )
    names.append("z_lag")
    return axes, names


def _interior_mask(pts: np.ndarray, cols: list[np.ndarray], lo: float, hi: float) -> np.ndarray:
    ok = np.ones(pts.shape[0], dtype=bool)
    for j, col in enumerate(cols):
        a, b = np.quantile(col, [lo, hi])
        ok &= (pts[:, j] >= a) & (pts[:, j] <= b)
    return ok


# ---------------------------------------------------------------------------
# step 1


def step1(pair: PanelPair, settings: EstimationSettings | None = None) -> Step1Result:
    """Strip measurement error: local-linear mean of r given (m, k, l, z)."""
    settings = settings or EstimationSettings()
    norm = default_norm_points(pair, settings)
    axes, names = current_axes(pair, norm, settings)
    from .nonpar.bandwidth import silverman

    h3 = settings.bw_scale_current * np.array(
        [silverman(pair.m, "m"), silverman(pair.k, "k"), silverman(pair.l, "l")]
    )
    X3 = np.column_stack([pair.m, pair.k, pair.l])
    shape = tuple(len(a) for a in axes)
    values = np.empty(shape)
    derivs = {j: np.empty(shape) for j in range(3)}

    if pair.z_discrete:
        for c, lev in enumerate(axes[3]):
            sel = np.isclose(pair.z, lev)
            sub = cond_mean(pair.r[sel], X3[sel], axes[:3], h3, names=names[:3])
            values[..., c] = sub.values
            for j in range(3):
                derivs[j][..., c] = sub.derivs[j]
        derivs[3] = np.zeros(shape)
        fn = GridFn(axes=axes, values=values, names=names, derivs=derivs)
        h = h3
    else:
        hz = settings.bw_scale_current * silverman(pair.z, "z")
        h = np.append(h3, hz)
        X4 = np.column_stack([X3, pair.z])
        fn = cond_mean(pair.r, X4, axes, h, names=names)

    pts = np.column_stack([pair.m, pair.k, pair.l, pair.z])
    rbar = fn(pts)
    eps = pair.r - rbar
    interior = _interior_mask(
        pts[:, :3], [pair.m, pair.k, pair.l], settings.grid_lo, settings.grid_hi
    )
    return Step1Result(revenue_fn=fn, rbar=rbar, eps=eps, interior=interior, h=h)


# ---------------------------------------------------------------------------
# anchor selection


def _anchor_base_weight(
    cdf: CondCdf, point: dict[str, float], widen: float = 1.0
) -> np.ndarray:
    """Kernel/indicator weights pinning the lagged conditioning columns."""
    disc = {c: point[c] for c in LAG_COLS if cdf.is_discrete(c)}
    w = cdf.cell_weight(disc) if disc else np.ones(cdf.n)
    for c in LAG_COLS:
        if cdf.is_discrete(c):
            continue
        h = widen * cdf.h_v[c]
        t = (cdf.column(c) - point[c]) / h
        w = w * np.exp(-0.5 * t * t)
    return w


def _candidate_points(cdf: CondCdf, col: str) -> list[dict[str, float]]:
    """A few lagged points per candidate variable: medians with the
    candidate coordinate moved across its central quantiles."""
    base = {}
    for c in LAG_COLS:
        if cdf.is_discrete(c):
            levels, counts = np.unique(cdf.column(c), return_counts=True)
            base[c] = float(levels[np.argmax(counts)])
        else:
            base[c] = float(np.median(cdf.column(c)))
    pts = []
    for q in (0.35, 0.5, 0.65):
        p = dict(base)
        p[col] = float(np.quantile(cdf.column(col), q))
        pts.append(p)
    return pts


def _scan_grid(cdf: CondCdf, n: int) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Current-period evaluation lines: material quantiles at two central
    locations of the other current columns (where the scale integral lives)."""
    cur_cont = [c for c in ("k", "l", "z") if not cdf.is_discrete(c)]
    mline = np.quantile(cdf.m, np.linspace(0.1, 0.9, max(3 * n, 15)))
    locs = [
        [float(np.quantile(cdf.column(c), q)) for c in cur_cont] for q in (0.35, 0.65)
    ]
    mq = np.concatenate([mline for _ in locs])
    if cur_cont:
        XQ = np.vstack([np.tile(loc, (mline.size, 1)) for loc in locs])
    else:
        XQ = np.empty((mq.size, 0))
    return mq, XQ, cur_cont


def select_anchor(
    cdf: CondCdf,
    settings: EstimationSettings | None = None,
    candidates: tuple[str, ...] | None = None,
) -> Anchor:
    """Pick the lagged variable and point with the strongest, everywhere
    non-degenerate response of the conditional CDF.

    A candidate's score is the minimum, over scan points where the CDF
    responds to material at all, of the candidate's bandwidth-scaled
    response relative to the material one (the common density factor
    cancels from this ratio, so it is flat where the model holds and
    collapses through zero when the lag moves nothing, as under degenerate
    persistence).
    """
    settings = settings or EstimationSettings()
    if candidates is None:
        candidates = tuple(c for c in LAG_COLS if not cdf.is_discrete(c))
    mq, XQ, cur_cont = _scan_grid(cdf, settings.anchor_grid_points)
    Xc = (
        np.column_stack([cdf.column(c) for c in cur_cont])
        if cur_cont
        else np.empty((cdf.n, 0))
    )
    hX = np.array([cdf.h_v[c] for c in cur_cont])
    disc_cur = [c for c in ("z",) if cdf.is_discrete(c)]

    results = []
    for col in candidates:
        if cdf.is_discrete(col):
            continue
        h_col = settings.anchor_scan_widen * cdf.h_v[col]
        for point in _candidate_points(cdf, col):
            w0 = _anchor_base_weight(cdf, point, widen=settings.anchor_scan_widen)
            # discrete current columns: scan each cell separately
            ratios = []
            used = 0
            total = 0
            for zlev in np.unique(cdf.column("z")) if disc_cur else [None]:
                w = w0 * cdf.cell_weight({"z": zlev}) if zlev is not None else w0
                if w.sum() <= 0:
                    continue
                u = (cdf.column(col) - point[col]) / h_col**2
                from .nonpar import backend

                sums = backend.cdf_moments(
                    cdf.m, Xc, np.vstack([w, w * u]), mq, XQ, cdf.h_m, hX
                )
                den = np.where(sums[:, 0, 2] > 0, sums[:, 0, 2], np.nan)
                G = sums[:, 0, 0] / den
                dG_dcol = (sums[:, 1, 0] - G * sums[:, 1, 2]) / den
                dG_dm = sums[:, 0, 1] / den
                m_resp = np.abs(dG_dm) * cdf.h_m
                usable = m_resp > settings.anchor_m_floor
                total += m_resp.size
                used += int(usable.sum())
                if usable.any():
                    ratios.append(dG_dcol[usable] * h_col / m_resp[usable])
            if not ratios or used == 0:
                continue
            signed = np.concatenate(ratios)
            # the response of the CDF to a relevant lag keeps one sign over
            # the whole scan (one common density factor); noise flips
            same_sign = bool(np.all(signed > 0) or np.all(signed < 0))
            score = float(np.nanmin(np.abs(signed)))
            results.append(
                {
                    "col": col,
                    "point": point,
                    "score": score,
                    "floor": settings.anchor_rel_floor,
                    "used_frac": used / max(total, 1),
                    "admissible": same_sign
                    and score > settings.anchor_rel_floor
                    and used / max(total, 1) >= 0.2,
                }
            )
    admissible = [r for r in results if r["admissible"]]
    if not admissible:
        raise AnchorError(
            "no lagged variable moves the conditional CDF of material everywhere "
            "on the evaluation grid; the rank condition fails (for instance when "
            "productivity has no persistence), so the control function cannot be "
            "recovered from input dynamics"
        )
    order = {c: i for i, c in enumerate(("m_lag", "k_lag", "l_lag", "z_lag"))}
    best = max(admissible, key=lambda r: (r["score"], -order[r["col"]]))
    return Anchor(col=best["col"], point=best["point"], score=best["score"], scan=results)


# ---------------------------------------------------------------------------
# step 2: control-function fields


def _control_fields(
    cdf: CondCdf,
    anchor: Anchor,
    axes: list[np.ndarray],
    z_level: float | None,
    settings: EstimationSettings,
):
    """Derivative-ratio fields of the control function on the current grid.

    Local-linear CDF regression at every (current grid) x (anchor point)
    node: slopes give the response of the CDF to the conditioning columns
    without the density-gradient bias of raw kernel derivatives.  Returns
    per-axis ratio grids T[q] = (dG/dq) / (dG/d anchor) for q in
    (m, k, l[, z]) plus the usability mask.
    """
    from .nonpar import backend

    cur_cont = [c for c in ("k", "l", "z") if not cdf.is_discrete(c)]
    lag_cont = [c for c in LAG_COLS if not cdf.is_discrete(c)]
    cols = cur_cont + lag_cont
    disc = {}
    if cdf.is_discrete("z_lag"):
        disc["z_lag"] = anchor.point["z_lag"]
    if z_level is not None:
        disc["z"] = z_level
    w0 = cdf.cell_weight(disc) if disc else np.ones(cdf.n)
    keep = w0 > 0

    grid_axes = axes[1 : 3 + (z_level is None)]
    mesh = np.meshgrid(*grid_axes, indexing="ij")
    cur_shape = tuple(len(a) for a in grid_axes)
    nq = int(np.prod(cur_shape))
    cur_pts = np.column_stack([g.ravel() for g in mesh])
    lag_vals = np.array([anchor.point[c] for c in lag_cont])
    XQ = np.column_stack([cur_pts, np.tile(lag_vals, (nq, 1))])
    X = np.column_stack([cdf.column(c)[keep] for c in cols])
    h = np.array([cdf.h_v[c] for c in cols])

    A, B, sw, sw2 = backend.cdf_ll_moments(
        cdf.m[keep], X, w0[keep], XQ, axes[0], cdf.h_m, h
    )
    p = len(cols) + 1
    ridge = 1e-10 * np.trace(A, axis1=1, axis2=2)[:, None] / p
    A = A + ridge[:, :, None] * np.eye(p)
    coef = np.linalg.solve(A[:, None, None], B[..., None])[..., 0]
    # coef[q, t, 0, :] solves the CDF response; coef[q, t, 1, 0] the density
    n_m = axes[0].size

    def to_grid(flat_qt):
        return np.moveaxis(flat_qt.reshape(cur_shape + (n_m,)), -1, 0)

    dG = {"m": to_grid(coef[:, :, 1, 0])}
    for j, c in enumerate(cols):
        dG[c] = to_grid(coef[:, :, 0, 1 + j])

    norm_const = np.prod([cdf.h_v[c] * np.sqrt(2 * np.pi) for c in cols])
    density = np.broadcast_to(
        (sw / (cdf.n * norm_const)).reshape((1,) + cur_shape), (n_m,) + cur_shape
    ).copy()
    neff = np.broadcast_to(
        np.divide(sw * sw, sw2, out=np.zeros_like(sw), where=sw2 > 0).reshape(
            (1,) + cur_shape
        ),
        (n_m,) + cur_shape,
    ).copy()
    return dG, density, neff


def _combined_fields(
    cdf: CondCdf,
    anchor: Anchor,
    axes: list[np.ndarray],
    z_level: float | None,
    settings: EstimationSettings,
):
    """Pool CDF responses over several anchor points along the anchor column.

    A single anchor point only resolves the control function on the band of
    material values its own lagged state makes likely; spreading anchor
    points over the column's quantiles covers the support.  Responses from
    different points share the local density factor per node, and their
    anchor responses differ by one constant each (the lag-mean gradient at
    that point): after calibrating those constants on overlap nodes, the
    pooled numerator over pooled denominator is free of the thin-denominator
    noise that plagues single-point ratios.
    """
    qs = settings.anchor_point_quantiles
    col_vals = np.quantile(cdf.column(anchor.col), qs)
    ref_j = int(np.argmin(np.abs(np.asarray(qs) - 0.5)))
    cur_cont = [c for c in ("k", "l", "z") if not cdf.is_discrete(c)]
    h_anchor = cdf.h_v[anchor.col]

    panels = []
    for v in col_vals:
        pt = dict(anchor.point)
        pt[anchor.col] = float(v)
        dG, density, neff = _control_fields(
            cdf, Anchor(col=anchor.col, point=pt, score=anchor.score), axes, z_level, settings
        )
        m_resp = dG["m"] * cdf.h_m
        a_resp = np.abs(dG[anchor.col]) * h_anchor
        solo = (
            (m_resp > settings.anchor_m_floor)
            & (a_resp > settings.anchor_rel_floor * m_resp)
            & (np.abs(dG[anchor.col]) > settings.density_floor * density)
            & (neff >= settings.min_neff)
        )
        panels.append({"dG": dG, "solo": solo, "density": density, "neff": neff})

    ref = panels[ref_j]
    rel = np.full(len(panels), np.nan)
    rel[ref_j] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ref = np.where(ref["solo"], ref["dG"]["m"] / ref["dG"][anchor.col], np.nan)
        for j, pan in enumerate(panels):
            if j == ref_j:
                continue
            t_j = np.where(pan["solo"], pan["dG"]["m"] / pan["dG"][anchor.col], np.nan)
            both = np.isfinite(t_ref) & np.isfinite(t_j)
            if both.sum() < 10:
                continue
            # anchor responses differ across points by the constant t_j/t_ref
            rel[j] = float(np.nanmedian(t_j[both] / t_ref[both]))
    valid = [j for j in range(len(panels)) if np.isfinite(rel[j])]
    if not valid:
        raise IdentError("no usable anchor point; the rank condition fails on the grid")

    shape = ref["dG"]["m"].shape
    pooled = {q: np.zeros(shape) for q in ["m"] + cur_cont}
    pooled_anchor = np.zeros(shape)
    pooled_density = np.zeros(shape)
    pooled_neff = np.zeros(shape)
    for j in valid:
        dG = panels[j]["dG"]
        for q in ["m"] + cur_cont:
            pooled[q] += dG[q] / len(valid)
        pooled_anchor += dG[anchor.col] / (rel[j] * len(valid))
        pooled_density += panels[j]["density"] / len(valid)
        pooled_neff += panels[j]["neff"]

    m_resp = pooled["m"] * cdf.h_m
    a_resp = np.abs(pooled_anchor) * h_anchor
    usable = (
        (m_resp > settings.anchor_m_floor)
        & (a_resp > settings.anchor_rel_floor * m_resp)
        & (np.abs(pooled_anchor) > settings.density_floor * pooled_density)
        & (pooled_neff >= settings.min_neff)
    )
    T = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        for q in pooled:
            t = pooled[q] / pooled_anchor
            t[~usable] = np.nan
            T[q] = t
    return T, usable


def _trim_fields(
    T: dict,
    m_ax: np.ndarray,
    i_m0: int,
    i_m1: int,
    i_k: int,
    i_l: int,
    settings: EstimationSettings,
) -> dict:
    """Mask ratio values implausibly far above their scale on the
    normalization line, where the estimate is densest and most reliable.

    Starved far corners can clear the response floors yet still produce
    ratios orders of magnitude off; relative to the normalization-line
    median they are unmistakable and get refilled from usable neighbors.
    """
    line = slice(min(i_m0, i_m1), max(i_m0, i_m1) + 1)
    out = {}
    for q, arr in T.items():
        if arr.ndim == 3:
            ref_vals = arr[line, i_k, i_l]
        else:
            ref_vals = arr[line, i_k, i_l, ...].ravel()
        ref = np.nanmedian(np.abs(ref_vals))
        if not np.isfinite(ref) or ref == 0:
            out[q] = arr
            continue
        trimmed = arr.copy()
        trimmed[np.abs(arr) > settings.field_trim_factor * ref] = np.nan
        out[q] = trimmed
    return out


def _smooth_field(arr: np.ndarray, size: int) -> np.ndarray:
    """NaN-aware median filter over a cubic window.

    The ratio fields are smooth in truth; their estimation noise at thin
    nodes is heavy-tailed (a noisy denominator), which a median suppresses
    far better than a mean.  NaN cells stay NaN.
    """
    if size <= 1:
        return arr
    r = size // 2
    offsets = np.meshgrid(*[np.arange(-r, r + 1)] * arr.ndim, indexing="ij")
    offsets = np.column_stack([o.ravel() for o in offsets])
    stack = np.full((offsets.shape[0],) + arr.shape, np.nan)
    for idx, off in enumerate(offsets):
        src = tuple(
            slice(max(-o, 0), arr.shape[d] - max(o, 0)) for d, o in enumerate(off)
        )
        dst = tuple(
            slice(max(o, 0), arr.shape[d] - max(-o, 0)) for d, o in enumerate(off)
        )
        stack[(idx,) + dst] = arr[src]
    with np.errstate(all="ignore"):
        out = np.nanmedian(stack, axis=0)
    out[~np.isfinite(arr)] = np.nan
    return out


def _fill_along(arr: np.ndarray, axis: int) -> tuple[np.ndarray, int]:
    """Extend each 1-d line of ``arr`` along ``axis`` by its nearest finite
    value (frozen at the usable boundary).  Lines with no finite entry are
    left as NaN.  Returns the filled array and the number of filled cells.

    Integration paths may only cross regions where the conditional CDF is
    informative; outside them the derivative fields are extended at their
    boundary value and the affected nodes are counted and flagged.
    """
    moved = np.moveaxis(np.asarray(arr, dtype=float).copy(), axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    n_fill = 0
    idx = np.arange(flat.shape[1])
    for row in flat:
        good = np.isfinite(row)
        if not good.any() or good.all():
            continue
        n_fill += int((~good).sum())
        gi = idx[good]
        nearest = gi[np.clip(np.searchsorted(gi, idx[~good]), 0, gi.size - 1)]
        left = gi[np.clip(np.searchsorted(gi, idx[~good]) - 1, 0, gi.size - 1)]
        pick = np.where(
            np.abs(nearest - idx[~good]) <= np.abs(idx[~good] - left), nearest, left
        )
        row[~good] = row[pick]
    return np.moveaxis(flat.reshape(moved.shape), -1, axis), n_fill


def _extend_fields(T: dict, axis_of: dict[str, int]) -> tuple[dict, float]:
    """Extend every ratio field along its own integration axis, then along
    the material axis (the dominant support direction)."""
    filled = {}
    n_fill = 0
    n_tot = 0
    for q, arr in T.items():
        out, nf = _fill_along(arr, axis_of[q])
        if axis_of[q] != 0:
            out, nf2 = _fill_along(out, 0)
            nf += nf2
        for ax in range(out.ndim):
            if not np.isfinite(out).all():
                out, nf3 = _fill_along(out, ax)
                nf += nf3
        filled[q] = out
        n_fill += nf
        n_tot += arr.size
    return filled, n_fill / max(n_tot, 1)


def _line_scale(T_m_line: np.ndarray, m_ax: np.ndarray, i0: int, i1: int) -> float:
    """Inverse of the ratio-field integral between the normalization points,
    taken on the same grid line the value grid integrates over (so the two
    pinned values are exact)."""
    lo, hi = min(i0, i1), max(i0, i1)
    seg = T_m_line[lo : hi + 1]
    if np.any(~np.isfinite(seg)):
        raise IdentError(
            "density floor violated on the normalization segment; choose "
            "different normalization points or anchors"
        )
    integral = float(np.trapezoid(seg, m_ax[lo : hi + 1]))
    if i1 < i0:
        integral = -integral
    if abs(integral) < 1e-12:
        raise IdentError("degenerate scale: the ratio field integrates to zero")
    return 1.0 / integral


def step2(
    pair: PanelPair,
    cdf: CondCdf,
    anchor: Anchor,
    norm: NormPoints,
    settings: EstimationSettings | None = None,
) -> ControlResult:
    """Recover the control function, TFP, the lag-mean and the innovations.

    Uses only the material column and the conditioning vector; observed
    revenue never enters.  Routes to the per-cell variant when the shifter
    is discrete.
    """
    settings = settings or EstimationSettings()
    if pair.z_discrete:
        return step2_discrete_z(pair, cdf, anchor, norm, settings)

    axes, names = current_axes(pair, norm, settings)
    i_m0 = _axis_index(axes[0], norm.m0)
    i_m1 = _axis_index(axes[0], norm.m1)
    i_k = _axis_index(axes[1], norm.k)
    i_l = _axis_index(axes[2], norm.l)
    i_z = _axis_index(axes[3], norm.z)
    T, usable = _combined_fields(cdf, anchor, axes, None, settings)

    T = _trim_fields(T, axes[0], i_m0, i_m1, i_k, i_l, settings)
    T = {q: _smooth_field(arr, settings.field_smooth) for q, arr in T.items()}
    scale = _line_scale(T["m"][:, i_k, i_l, i_z], axes[0], i_m0, i_m1)
    T, fill_frac = _extend_fields(T, {"m": 0, "k": 1, "l": 2, "z": 3})
    deriv_grids = {0: scale * T["m"], 1: scale * T["k"], 2: scale * T["l"], 3: scale * T["z"]}
    origin = [i_m0, i_k, i_l, i_z]
    values = integrate_grid(axes, deriv_grids, origin, order=[0, 1, 2, 3])
    control = GridFn(axes=axes, values=values, names=names, derivs=deriv_grids)
    return _finish_step2(
        pair, control, anchor, scale, norm, settings,
        usable_frac=float(usable.mean()), fill_frac=fill_frac,
    )


def step2_discrete_z(
    pair: PanelPair,
    cdf: CondCdf,
    anchor: Anchor,
    norm: NormPoints,
    settings: EstimationSettings | None = None,
) -> ControlResult:
    """Per-cell control recovery for a finite-support shifter.

    The continuous machinery runs within each current-shifter cell; the
    per-cell additive constants (and the lag-cell constants of the lag-mean)
    are recovered from the zero-mean property of the innovations cell by
    cell, with the normalization cell pinned to zero.
    """
    settings = settings or EstimationSettings()
    axes, names = current_axes(pair, norm, settings)
    z_levels = axes[3]
    _check_cells(pair, settings)

    i_m0 = _axis_index(axes[0], norm.m0)
    i_m1 = _axis_index(axes[0], norm.m1)
    i_k = _axis_index(axes[1], norm.k)
    i_l = _axis_index(axes[2], norm.l)
    iz_star = _axis_index(z_levels, norm.z)

    shape = tuple(len(a) for a in axes)
    values = np.empty(shape)
    deriv_grids = {j: np.empty(shape) for j in range(3)}
    fields = []
    usable_frac = 0.0
    fill_frac = 0.0
    for lev in z_levels:
        T, usable = _combined_fields(cdf, anchor, axes, float(lev), settings)
        T = _trim_fields(T, axes[0], i_m0, i_m1, i_k, i_l, settings)
        T = {q: _smooth_field(arr, settings.field_smooth) for q, arr in T.items()}
        fields.append(T)
        usable_frac += float(usable.mean()) / len(z_levels)
    scale = _line_scale(fields[iz_star]["m"][:, i_k, i_l], axes[0], i_m0, i_m1)
    for c, T in enumerate(fields):
        T, ff = _extend_fields(T, {"m": 0, "k": 1, "l": 2})
        fill_frac += ff / len(z_levels)
        cell_derivs = {0: scale * T["m"], 1: scale * T["k"], 2: scale * T["l"]}
        cell_vals = integrate_grid(axes[:3], cell_derivs, [i_m0, i_k, i_l], order=[0, 1, 2])
        values[..., c] = cell_vals
        for j in range(3):
            deriv_grids[j][..., c] = cell_derivs[j]
    deriv_grids[3] = np.zeros(shape)

    # cell constants from the zero conditional mean of the innovations
    offsets, lag_offsets = _recover_cell_offsets(
        pair, cdf, anchor, norm, settings, axes, values, scale
    )
    for c, lev in enumerate(z_levels):
        values[..., c] += offsets[float(lev)]
    control = GridFn(axes=axes, values=values, names=names, derivs=deriv_grids)
    return _finish_step2(
        pair, control, anchor, scale, norm, settings,
        cell_offsets=offsets, lag_offsets=lag_offsets,
        usable_frac=usable_frac, fill_frac=fill_frac,
    )


def _check_cells(pair: PanelPair, settings: EstimationSettings) -> None:
    levels = np.unique(pair.z)
    lag_levels = np.unique(pair.z_lag)
    for zt in levels:
        for zl in lag_levels:
            n = int(np.sum(np.isclose(pair.z, zt) & np.isclose(pair.z_lag, zl)))
            if n < settings.min_cell:
                raise IdentError(
                    f"shifter cell (z={zt}, z_lag={zl}) has {n} firms, "
                    f"below the minimum {settings.min_cell}"
                )


def lagmean_fields(
    pair: PanelPair,
    cdf: CondCdf,
    control_slope_m,
    settings: EstimationSettings,
    include_l: bool = True,
    base_point: dict[str, float] | None = None,
) -> GridFn:
    """Lag-mean of TFP up to per-lag-cell constants, from CDF derivatives.

    At a fixed current point, the ratio of the CDF response along a lagged
    coordinate to its response along material, times the control slope
    there, gives the lag-mean gradient.  Several current material values are
    pooled (each resolves the lag nodes whose implied TFP makes it likely)
    and path integration from the pooled lag medians rebuilds the shape.

    ``control_slope_m`` maps a current point dict to the control function's
    material slope at that point.
    """
    from .nonpar import backend

    lag_cont = [c for c in LAG_COLS if not cdf.is_discrete(c)]
    origin_point = {c: float(np.median(cdf.column(c))) for c in lag_cont}
    axes, names = lag_axes(pair, settings, include_point=origin_point)
    cur_cont = [c for c in ("k", "l", "z") if not cdf.is_discrete(c)]
    cols = cur_cont + lag_cont

    if base_point is None:
        base_point = {c: float(np.median(cdf.column(c))) for c in ("k", "l", "z")}
        if cdf.is_discrete("z"):
            levels, counts = np.unique(cdf.column("z"), return_counts=True)
            base_point["z"] = float(levels[np.argmax(counts)])

    shape = tuple(len(a) for a in axes)
    grads = {j: np.empty(shape) for j in range(len(lag_cont))}
    z_levels = axes[3] if cdf.is_discrete("z_lag") else [None]
    X_all = np.column_stack([cdf.column(c) for c in cols])
    h = np.array([cdf.h_v[c] for c in cols])
    cur_vals = np.array([base_point[c] for c in cur_cont])
    p = len(cols) + 1
    m_points = np.quantile(cdf.m, settings.anchor_point_quantiles)
    slopes = np.array(
        [control_slope_m({**base_point, "m": float(mv)}) for mv in m_points]
    )

    for ci, lev in enumerate(z_levels):
        disc = {}
        if cdf.is_discrete("z"):
            disc["z"] = base_point["z"]
        if lev is not None:
            disc["z_lag"] = lev
        w0 = cdf.cell_weight(disc) if disc else np.ones(cdf.n)
        grid_axes = axes[: len(lag_cont)] if lev is not None else axes
        mesh = np.meshgrid(*grid_axes, indexing="ij")
        nq = mesh[0].ravel().shape[0]
        XQ = np.column_stack(
            [np.tile(cur_vals, (nq, 1))] + [g.ravel()[:, None] for g in mesh]
        )
        A, B, sw, sw2 = backend.cdf_ll_moments(
            cdf.m, X_all, w0, XQ, m_points, cdf.h_m, h
        )
        ridge = 1e-10 * np.trace(A, axis1=1, axis2=2)[:, None] / p
        A = A + ridge[:, :, None] * np.eye(p)
        coef = np.linalg.solve(A[:, None, None], B[..., None])[..., 0]
        dG_dm = coef[:, :, 1, 0]  # (nq, n_points)
        neff = np.divide(sw * sw, sw2, out=np.zeros_like(sw), where=sw2 > 0)
        usable = (dG_dm * cdf.h_m > settings.anchor_m_floor) & (
            neff[:, None] >= settings.min_neff
        )
        cell_shape = tuple(len(a) for a in grid_axes)
        with np.errstate(divide="ignore", invalid="ignore"):
            for j in range(len(lag_cont)):
                dG_dlag = coef[:, :, 0, 1 + len(cur_cont) + j]
                g_all = -slopes[None, :] * dG_dlag / dG_dm
                wgt = np.where(usable, dG_dm, 0.0)
                den = wgt.sum(axis=1)
                g = np.where(
                    den > 0,
                    (wgt * np.where(usable, g_all, 0.0)).sum(axis=1)
                    / np.where(den > 0, den, 1.0),
                    np.nan,
                )
                if lev is not None:
                    grads[j][..., ci] = g.reshape(cell_shape)
                else:
                    grads[j][...] = g.reshape(cell_shape)

    if not include_l:
        grads.pop(2, None)
    for j in list(grads):
        filled = _smooth_field(grads[j], settings.field_smooth)
        filled, _ = _fill_along(filled, j)
        if j != 0:
            filled, _ = _fill_along(filled, 0)
        for ax in range(filled.ndim):
            if not np.isfinite(filled).all():
                filled, _ = _fill_along(filled, ax)
        grads[j] = filled
    origin_idx = [
        _axis_index(axes[j], origin_point[c]) for j, c in enumerate(lag_cont)
    ]
    order = [j for j in range(len(lag_cont)) if j in grads]
    if not cdf.is_discrete("z_lag"):
        raise NotImplementedError("lag-mean field recovery requires a discrete shifter")
    vals = np.empty(shape)
    for ci in range(len(z_levels)):
        cell_grids = {j: grads[j][..., ci] for j in order}
        vals[..., ci] = integrate_grid(
            axes[:3], cell_grids, origin_idx, order=order
        )
    full_grads = {j: grads[j] for j in order}
    return GridFn(axes=axes, values=vals, names=names, derivs=full_grads)


def _recover_cell_offsets(pair, cdf, anchor, norm, settings, axes, lam_values, scale):
    """Per-cell constants for the control and lag-mean functions.

    Cell means of (control shape minus lag-mean shape) pin the constants:
    the normalization cell is zero by construction, lag-cell constants come
    from rows with the normalization cell current, and current-cell
    constants from columns with the normalization cell lagged.
    """
    z_levels = np.unique(pair.z)
    lag_levels = np.unique(pair.z_lag)
    if len(z_levels) == 1 and len(lag_levels) == 1:
        lev = float(z_levels[0])
        return {lev: 0.0}, {float(lag_levels[0]): 0.0}

    # the lag-field ratios need the control's material slope at the chosen
    # current points; central differences of the shape grid supply it
    base_point = {"k": norm.k, "l": norm.l, "z": norm.z}
    control_tmp = GridFn(axes=axes, values=lam_values, names=["m", "k", "l", "z"])
    eps_m = 1e-4 * (axes[0][-1] - axes[0][0])

    def slope_fn(pt):
        node = np.array([[pt["m"], pt["k"], pt["l"], pt["z"]]])
        up = node.copy()
        up[0, 0] += eps_m
        dn = node.copy()
        dn[0, 0] -= eps_m
        return float((control_tmp(up) - control_tmp(dn))[0] / (2 * eps_m))

    lag_fn = lagmean_fields(pair, cdf, slope_fn, settings, base_point=base_point)
    lam_m = control_tmp(np.column_stack([pair.m, pair.k, pair.l, pair.z]))
    lam_h = lag_fn(np.column_stack([pair.m_lag, pair.k_lag, pair.l_lag, pair.z_lag]))
    good = np.isfinite(lam_m) & np.isfinite(lam_h)

    z_star = norm.z
    cellmean = {}
    for zt in z_levels:
        for zl in lag_levels:
            sel = good & np.isclose(pair.z, zt) & np.isclose(pair.z_lag, zl)
            if not sel.any():
                raise IdentError(f"empty shifter cell (z={zt}, z_lag={zl})")
            cellmean[(float(zt), float(zl))] = float(np.mean(lam_m[sel] - lam_h[sel]))

    zl_ref = float(lag_levels[np.argmin(np.abs(lag_levels - z_star))])
    lag_offsets = {float(zl): cellmean[(float(z_star), float(zl))] for zl in lag_levels}
    offsets = {
        float(zt): cellmean[(float(z_star), zl_ref)] - cellmean[(float(zt), zl_ref)]
        for zt in z_levels
    }
    return offsets, lag_offsets


def _finish_step2(
    pair,
    control,
    anchor,
    scale,
    norm,
    settings,
    cell_offsets=None,
    lag_offsets=None,
    usable_frac=1.0,
    fill_frac=0.0,
) -> ControlResult:
    from .nonpar.bandwidth import silverman

    pts = np.column_stack([pair.m, pair.k, pair.l, pair.z])
    omega = control(pts)

    # lag-mean of TFP by local-linear regression on the lagged state
    lagaxes, lagnames = lag_axes(pair, settings)
    Xl = np.column_stack([pair.m_lag, pair.k_lag, pair.l_lag])
    hl = settings.bw_scale_current * np.array(
        [silverman(pair.m_lag, "m_lag"), silverman(pair.k_lag, "k_lag"), silverman(pair.l_lag, "l_lag")]
    )
    good = np.isfinite(omega)
    shape = tuple(len(a) for a in lagaxes)
    if pair.z_discrete:
        values = np.empty(shape)
        for c, lev in enumerate(lagaxes[3]):
            sel = good & np.isclose(pair.z_lag, lev)
            sub = cond_mean(omega[sel], Xl[sel], lagaxes[:3], hl, names=lagnames[:3])
            values[..., c] = sub.values
        lagmean = GridFn(axes=lagaxes, values=values, names=lagnames)
    else:
        hz = settings.bw_scale_current * silverman(pair.z_lag, "z_lag")
        lagmean = cond_mean(
            omega[good],
            np.column_stack([Xl, pair.z_lag])[good],
            lagaxes,
            np.append(hl, hz),
            names=lagnames,
        )
    lag_pts = np.column_stack([pair.m_lag, pair.k_lag, pair.l_lag, pair.z_lag])
    eta = omega - lagmean(lag_pts)
    interior = _interior_mask(
        pts[:, :3], [pair.m, pair.k, pair.l], settings.grid_lo, settings.grid_hi
    ) & _interior_mask(
        lag_pts[:, :3], [pair.m_lag, pair.k_lag, pair.l_lag], settings.grid_lo, settings.grid_hi
    )
    eta_ok = eta[np.isfinite(eta)]
    return ControlResult(
        anchor=anchor,
        anchor_scale=scale,
        dh_anchor=-scale,
        control_fn=control,
        omega=omega,
        lagmean_fn=lagmean,
        eta=eta,
        eta_sorted=np.sort(eta_ok),
        interior=interior,
        cell_offsets=cell_offsets,
        lag_offsets=lag_offsets,
        norm=norm,
        settings=settings,
        usable_frac=usable_frac,
        fill_frac=fill_frac,
    )


# ---------------------------------------------------------------------------
# step 3


def infer_log_material_price(pair: PanelPair) -> float:
    """Common log material price from expenditure; checks within-period
    consistency of ln(mx) - m."""
    pm = np.log(pair.mx) - pair.m
    if np.std(pm) > 1e-6:
        logger.warning(
            "ln(material expenditure) - m varies within the period (sd=%.2e); "
            "using the median as the common log material price",
            np.std(pm),
        )
    return float(np.median(pm))


def step3(
    pair: PanelPair,
    s1: Step1Result,
    s2: ControlResult,
    settings: EstimationSettings | None = None,
) -> Step3Result:
    """Markups, output elasticities, production function, prices, quantities."""
    settings = settings or (s2.settings or EstimationSettings())
    norm = s2.norm
    fn = s1.revenue_fn
    control = s2.control_fn
    axes = control.axes
    names = control.names
    pm = infer_log_material_price(pair)

    # grids share axes by construction of step1/step2 defaults; re-evaluate
    # the revenue mean on the control grid if they differ
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.column_stack([g.ravel() for g in mesh])
    shape = tuple(len(a) for a in axes)
    phi_grid = fn(nodes).reshape(shape)
    dphi = {q: fn.eval_partial(j, nodes).reshape(shape) for j, q in enumerate(("m", "k", "l"))}
    share_grid = np.exp(pm + mesh[0] - phi_grid)

    dctl = {q: control.derivs[j] for j, q in enumerate(("m", "k", "l"))}
    denom = dphi["m"] - share_grid
    with np.errstate(divide="ignore", invalid="ignore"):
        markup_grid = np.where(denom > 0, dctl["m"] / denom, np.nan)
    markup_fn = GridFn(axes=axes, values=markup_grid, names=names)

    elas = {}
    for q in ("m", "k", "l"):
        elas[q] = markup_grid * dphi[q] - dctl[q]
    elas_fns = {
        q: GridFn(axes=axes, values=elas[q], names=names) for q in ("m", "k", "l")
    }

    # production function: average the per-shifter elasticity fields over the
    # shifter axis (they estimate the same object), then path-integrate
    if len(axes) == 4 and axes[3].size > 1:
        if pair.z_discrete:
            w = np.array([np.mean(np.isclose(pair.z, lev)) for lev in axes[3]])
            w = w / w.sum()
        else:
            w = np.ones(axes[3].size) / axes[3].size
        f_fields = {j: np.nansum(elas[q] * w, axis=3) for j, q in enumerate(("m", "k", "l"))}
    else:
        f_fields = {j: elas[q][..., 0] for j, q in enumerate(("m", "k", "l"))}
    i_m0 = _axis_index(axes[0], norm.m0)
    i_k = _axis_index(axes[1], norm.k)
    i_l = _axis_index(axes[2], norm.l)
    f_values = integrate_grid(axes[:3], f_fields, [i_m0, i_k, i_l], order=[0, 1, 2])
    prod_fn = GridFn(axes=axes[:3], values=f_values, names=names[:3], derivs=f_fields)

    # per-firm objects
    pts = np.column_stack([pair.m, pair.k, pair.l, pair.z])
    rbar = s1.rbar
    share = pair.mx / np.exp(rbar)
    dctl_m_i = control.eval_partial(0, pts)
    dphi_m_i = fn.eval_partial(0, pts)
    denom_i = dphi_m_i - share
    valid = denom_i > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        markup_i = np.where(valid, dctl_m_i / denom_i, np.nan)
    if (~valid).any():
        logger.warning(
            "%d firm(s) with non-positive markup denominator flagged and "
            "excluded from aggregates",
            int((~valid).sum()),
        )
    elas_i = np.column_stack(
        [
            markup_i * fn.eval_partial(j, pts) - control.eval_partial(j, pts)
            for j in range(3)
        ]
    )
    f_i = prod_fn(pts[:, :3])
    y = f_i + s2.omega
    p = rbar - y
    interior = s1.interior & s2.interior
    return Step3Result(
        markup=markup_i,
        markup_fn=markup_fn,
        elasticity_m=elas_fns["m"],
        elasticity_k=elas_fns["k"],
        elasticity_l=elas_fns["l"],
        prod_fn=prod_fn,
        y=y,
        p=p,
        elasticities=elas_i,
        valid=valid,
        interior=interior,
        rbar=rbar,
        share=share,
    )


# ---------------------------------------------------------------------------
# over-identification diagnostic


def overid_check(
    pair: PanelPair,
    cdf: CondCdf,
    norm: NormPoints,
    settings: EstimationSettings | None = None,
    anchors: list[Anchor] | None = None,
) -> OveridReport:
    """Re-run the control recovery under every admissible anchor and compare.

    Well-specified data gives near-identical TFP estimates whichever lagged
    variable scales the ratios; disagreement flags misspecification.
    """
    settings = settings or EstimationSettings()
    if anchors is None:
        base = select_anchor(cdf, settings)
        cols = {r["col"] for r in base.scan if r["admissible"]}
        anchors = []
        for col in sorted(cols):
            sub = [r for r in base.scan if r["col"] == col and r["admissible"]]
            best = max(sub, key=lambda r: r["score"])
            anchors.append(Anchor(col=col, point=best["point"], score=best["score"]))
    if len(anchors) < 2:
        return OveridReport(
            anchors=[a.col for a in anchors],
            corr=np.ones((len(anchors), len(anchors))),
            discrepancy=np.zeros((len(anchors), len(anchors))),
            flagged=False,
            corr_threshold=settings.overid_corr_threshold,
            disc_threshold=settings.overid_disc_threshold,
            note="fewer than two admissible anchors; nothing to cross-check",
        )
    results = [step2(pair, cdf, a, norm, settings) for a in anchors]
    n = len(results)
    corr = np.eye(n)
    disc = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            oi, oj = results[i].omega, results[j].omega
            good = np.isfinite(oi) & np.isfinite(oj) & results[i].interior & results[j].interior
            corr[i, j] = corr[j, i] = float(np.corrcoef(oi[good], oj[good])[0, 1])
            vi, vj = results[i].control_fn.values, results[j].control_fn.values
            both = np.isfinite(vi) & np.isfinite(vj)
            span = np.nanmax(vi[both]) - np.nanmin(vi[both])
            disc[i, j] = disc[j, i] = float(np.max(np.abs(vi[both] - vj[both])) / max(span, 1e-12))
    off = corr[~np.eye(n, dtype=bool)]
    flagged = bool(off.min() < settings.overid_corr_threshold) or bool(
        disc.max() > settings.overid_disc_threshold
    )
    return OveridReport(
        anchors=[a.col for a in anchors],
        corr=corr,
        discrepancy=disc,
        flagged=flagged,
        corr_threshold=settings.overid_corr_threshold,
        disc_threshold=settings.overid_disc_threshold,
    )


# ---------------------------------------------------------------------------
# endogenous-labor branch (linear instrumental-variable special case)


def step2_labor(
    pair: PanelPair,
    cdf: CondCdf,
    anchor: Anchor,
    norm: NormPoints,
    settings: EstimationSettings | None = None,
) -> tuple[GridFn, GridFn]:
    """Control and lag-mean shapes excluding the labor direction.

    When labor may respond to the TFP innovation, derivative ratios along
    labor are contaminated, so the control function is rebuilt without its
    labor segment (the missing labor profile is picked up by the
    instrumental-variable step) and the lag-mean shape comes from the CDF
    response to the lagged state at a fixed current point.
    """
    settings = settings or EstimationSettings()
    axes, names = current_axes(pair, norm, settings)
    i_m0 = _axis_index(axes[0], norm.m0)
    i_m1 = _axis_index(axes[0], norm.m1)
    i_k = _axis_index(axes[1], norm.k)
    i_l = _axis_index(axes[2], norm.l)

    if pair.z_discrete and axes[3].size == 1:
        T, usable = _combined_fields(cdf, anchor, axes, float(axes[3][0]), settings)
        T = _trim_fields(T, axes[0], i_m0, i_m1, i_k, i_l, settings)
        T = {q: _smooth_field(arr, settings.field_smooth) for q, arr in T.items()}
        scale = _line_scale(T["m"][:, i_k, i_l], axes[0], i_m0, i_m1)
        T, _ = _extend_fields(T, {"m": 0, "k": 1})
        derivs = {0: scale * T["m"], 1: scale * T["k"]}
        vals = integrate_grid(axes[:3], derivs, [i_m0, i_k, i_l], order=[0, 1])
        shape = tuple(len(a) for a in axes)
        lam_cur = GridFn(
            axes=axes,
            values=vals.reshape(shape[:3] + (1,)),
            names=names,
            derivs={j: d.reshape(shape[:3] + (1,)) for j, d in derivs.items()},
        )
    else:
        raise NotImplementedError(
            "the labor branch is implemented for a constant or single-level shifter"
        )

    base_point = {"k": norm.k, "l": norm.l, "z": float(axes[3][0])}

    def slope_fn(pt):
        node = np.array([[pt["m"], pt["k"], pt["l"], pt["z"]]])
        return float(lam_cur.eval_partial(0, node)[0])

    lam_lag = lagmean_fields(
        pair, cdf, slope_fn, settings, include_l=True, base_point=base_point
    )
    return lam_cur, lam_lag


def labor_iv(
    pair: PanelPair,
    lam_cur: GridFn,
    lam_lag: GridFn,
    l_star: float,
    settings: EstimationSettings | None = None,
) -> LaborIvResult:
    """Just-identified linear IV for the labor coefficient.

    The known composite H (control shape minus lag-mean shape) equals an
    intercept plus the labor profile plus the innovation; lagged labor
    instruments current labor.
    """
    settings = settings or EstimationSettings()
    pts = np.column_stack([pair.m, pair.k, pair.l, pair.z])
    lag_pts = np.column_stack([pair.m_lag, pair.k_lag, pair.l_lag, pair.z_lag])
    H = lam_cur(pts) - lam_lag(lag_pts)
    good = np.isfinite(H)
    H, l_t, l_lag = H[good], pair.l[good], pair.l_lag[good]

    r = float(np.corrcoef(l_t, l_lag)[0, 1])
    n = l_t.shape[0]
    fstat = (n - 2) * r * r / max(1.0 - r * r, 1e-12)
    if fstat < settings.weak_iv_fstat:
        raise WeakInstrumentError(
            f"first-stage F statistic {fstat:.2f} below threshold "
            f"{settings.weak_iv_fstat}: lagged labor is too weak an instrument"
        )
    X = np.column_stack([np.ones(n), l_t - l_star])
    Z = np.column_stack([np.ones(n), l_lag])
    coef = np.linalg.solve(Z.T @ X, Z.T @ H)
    resid = H - X @ coef
    ols = np.linalg.lstsq(X, H, rcond=None)[0]
    return LaborIvResult(
        H=H,
        d=float(coef[0]),
        theta_l_hat=float(coef[1]),
        first_stage_f=float(fstat),
        ols_theta_l=float(ols[1]),
        resid_mean=float(np.mean(resid)),
        resid_instr_corr=float(np.corrcoef(resid, l_lag)[0, 1]),
    )


# ---------------------------------------------------------------------------
# revenue-elasticity markup (the degeneracy the pipeline exists to avoid)


def naive_markup_dlw(
    pair: PanelPair,
    s1: Step1Result,
    settings: EstimationSettings | None = None,
) -> np.ndarray:
    """Markups a practitioner would obtain by treating revenue as quantity.

    Estimates a log-linear 'production function' on noise-free revenue with
    the standard two-step proxy logic (cell-wise AR(1) law of motion,
    moments in current capital/labor and lagged material), then divides the
    material coefficient by the material revenue share.  On model data the
    result collapses to one for every firm: the revenue elasticity of a
    flexible input equals its expenditure share.
    """
    settings = settings or EstimationSettings()
    from .nonpar.bandwidth import silverman

    # noise-free lagged revenue from a first-step regression on the lagged state
    X_lag = np.column_stack([pair.m_lag, pair.k_lag, pair.l_lag])
    h_lag = settings.bw_scale_current * np.array(
        [silverman(X_lag[:, j], c) for j, c in enumerate(("m_lag", "k_lag", "l_lag"))]
    )
    rbar_lag = np.full(len(pair), np.nan)
    if pair.z_discrete:
        for lev in np.unique(pair.z_lag):
            sel = np.isclose(pair.z_lag, lev)
            vals, _, _ = llr_at_points(
                pair.r_lag[sel], X_lag[sel], X_lag[sel], h_lag
            )
            rbar_lag[sel] = vals
    else:
        rbar_lag, _, _ = llr_at_points(pair.r_lag, X_lag, X_lag, h_lag)

    rbar = s1.rbar
    x_t = np.column_stack([pair.m, pair.k, pair.l])
    x_l = X_lag
    markups = np.full(len(pair), np.nan)
    cells = np.unique(pair.z) if pair.z_discrete else [None]
    for lev in cells:
        sel = np.ones(len(pair), dtype=bool) if lev is None else np.isclose(pair.z, lev)
        sub_lag_levels = np.unique(pair.z_lag[sel]) if pair.z_discrete else [None]

        def moments(theta, sel=sel, sub_lag_levels=sub_lag_levels):
            w_t = rbar[sel] - x_t[sel] @ theta
            w_l = rbar_lag[sel] - x_l[sel] @ theta
            resid = np.empty_like(w_t)
            for zl in sub_lag_levels:
                c = np.ones(w_t.shape[0], dtype=bool) if zl is None else np.isclose(
                    pair.z_lag[sel], zl
                )
                A = np.column_stack([np.ones(c.sum()), w_l[c]])
                beta = np.linalg.lstsq(A, w_t[c], rcond=None)[0]
                resid[c] = w_t[c] - A @ beta
            inst = np.column_stack([pair.k[sel], pair.l[sel], pair.m_lag[sel]])
            return inst.T @ resid / c.shape[0]

        theta0 = np.array([0.3, 0.2, 0.3])
        sol = least_squares(moments, theta0, method="lm")
        theta = sol.x
        markups[sel] = theta[0] / (pair.mx[sel] / np.exp(rbar[sel]))
    return markups
