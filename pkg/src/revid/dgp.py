"""Simulators for firm panels with known structure, plus closed-form oracles.

Two data-generating processes are provided.  The first combines a
Cobb-Douglas production function, an AR(1) TFP process and a constant-elastic
inverse demand curve, for which every object the estimation pipeline targets
has a closed form.  The second replaces the demand side with a homothetic
single-aggregator system whose share function is supplied by the caller,
producing continuously heterogeneous markups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import pandas as pd

from . import rng
from .panel import FirmPanel, from_frame


@dataclass(frozen=True)
class ZMap:
    """Scalar map of the demand shifter: either per-level values or affine."""

    levels: dict[float, float] | None = None
    intercept: float = 0.0
    slope: float = 0.0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.levels is not None:
            out = np.full(z.shape, np.nan)
            for lv, val in self.levels.items():
                out[np.isclose(z, lv)] = val
            if np.isnan(out).any():
                raise ValueError("z value outside the declared levels")
            return out if out.ndim else float(out)
        out = self.intercept + self.slope * z
        return out if out.ndim else float(out)


def two_level(v0: float, v1: float) -> ZMap:
    return ZMap(levels={0.0: v0, 1.0: v1})


def const_map(v: float) -> ZMap:
    return ZMap(levels=None, intercept=v, slope=0.0)


@dataclass(frozen=True)
class TrueStructure:
    """Full parameterization of the constant-elasticity DGP.

    ``alpha`` and ``rho`` map the demand shifter to the demand intercept and
    to the inverse markup.  Inputs follow stationary AR(1) laws in logs; TFP
    follows the AR(1) with innovation scale ``sigma_eta``.
    """

    theta0: float = 0.0
    theta_m: float = 0.35
    theta_k: float = 0.25
    theta_l: float = 0.40
    h0: float = 0.0
    h1: float = 0.8
    sigma_eta: float = 0.2
    sigma_eps: float = 0.1
    alpha: ZMap = field(default_factory=lambda: two_level(1.0, 1.2))
    rho: ZMap = field(default_factory=lambda: two_level(0.8, 0.75))
    p_m: float = 0.0
    z_kind: str = "bernoulli"  # "bernoulli" on {0,1} or "uniform" on [0,1]
    z_prob: float = 0.5
    k_mean: float = 2.0
    k_sd: float = 1.0
    k_rho: float = 0.5
    l_mean: float = 1.0
    l_sd: float = 0.8
    l_rho: float = 0.5
    labor_eta_loading: float = 0.0
    capital_eta_loading: float = 0.0
    alpha_shift_by_period: dict[int, float] = field(default_factory=dict)
    sigma_eta_by_period: dict[int, float] = field(default_factory=dict)

    def z_values(self) -> np.ndarray:
        if self.z_kind == "bernoulli":
            return np.array([0.0, 1.0])
        return np.linspace(0.0, 1.0, 11)

    def validate(self) -> None:
        rho = np.asarray(self.rho(self.z_values()), dtype=float)
        if np.any(rho <= 0) or np.any(rho > 1):
            raise ValueError("rho(z) must lie in (0, 1] on the support of z")
        if np.any(rho * self.theta_m >= 1):
            raise ValueError("rho(z)*theta_m must be below 1 so the material slope is positive")
        if abs(self.h1) >= 1:
            raise ValueError("|h1| must be below 1 for a stationary TFP process")
        if self.sigma_eta <= 0 or self.sigma_eps < 0:
            raise ValueError("sigma_eta must be positive and sigma_eps non-negative")
        if self.theta_m <= 0:
            raise ValueError("theta_m must be positive")

    def omega_stationary(self) -> tuple[float, float]:
        mean = self.h0 / (1.0 - self.h1)
        sd = self.sigma_eta / math.sqrt(1.0 - self.h1**2)
        return mean, sd

    def sigma_eta_at(self, t: int) -> float:
        return self.sigma_eta_by_period.get(t, self.sigma_eta)

    def alpha_at(self, z, t: int):
        return self.alpha(z) + self.alpha_shift_by_period.get(t, 0.0)


def transform_structure(ts: TrueStructure, a1: float, a2: float, b: float) -> TrueStructure:
    """Rescale/relocate the structure without changing what is observable.

    The returned structure generates, under matched seeds, the identical
    observed panel (r, m, k, l, z, mx): production and control function are
    scaled by ``b`` and shifted by ``a1``/``a2`` while demand absorbs the
    offsetting change.
    """
    if b <= 0:
        raise ValueError("scale factor b must be positive")
    zs = ts.z_values()
    rho_v = np.asarray(ts.rho(zs), dtype=float)
    alpha_v = np.asarray(ts.alpha(zs), dtype=float)
    new_rho_vals = rho_v / b
    new_alpha_vals = alpha_v - rho_v * (a1 + a2) / b
    if ts.rho.levels is not None:
        new_rho = ZMap(levels=dict(zip(ts.rho.levels.keys(), new_rho_vals)))
        new_alpha = ZMap(levels=dict(zip(ts.alpha.levels.keys(), new_alpha_vals)))
    else:
        new_rho = ZMap(intercept=ts.rho.intercept / b, slope=ts.rho.slope / b)
        new_alpha = ZMap(
            intercept=ts.alpha.intercept - ts.rho.intercept * (a1 + a2) / b,
            slope=ts.alpha.slope - ts.rho.slope * (a1 + a2) / b,
        )
    return replace(
        ts,
        theta0=a1 + b * ts.theta0,
        theta_m=b * ts.theta_m,
        theta_k=b * ts.theta_k,
        theta_l=b * ts.theta_l,
        h0=a2 * (1.0 - ts.h1) + b * ts.h0,
        sigma_eta=b * ts.sigma_eta,
        sigma_eta_by_period={t: b * s for t, s in ts.sigma_eta_by_period.items()},
        alpha=new_alpha,
        rho=new_rho,
    )


# ---------------------------------------------------------------------------
# constant-elasticity simulator


def _draw_inputs(ts: TrueStructure, seed: int, firms: np.ndarray, t: int, prev):
    """One period of exogenous states (k, l, z) and TFP, given previous."""
    eta = ts.sigma_eta_at(t) * rng.normal(seed, rng.TAG_ETA, firms, t)
    if prev is None:
        om_mean, om_sd = ts.omega_stationary()
        omega_prev = om_mean + om_sd * rng.normal(seed, rng.TAG_OMEGA0, firms, 0)
        k = ts.k_mean + ts.k_sd * rng.normal(seed, rng.TAG_K, firms, t)
        l = ts.l_mean + ts.l_sd * rng.normal(seed, rng.TAG_L, firms, t)
    else:
        omega_prev, k_prev, l_prev = prev
        k = (
            ts.k_mean * (1 - ts.k_rho)
            + ts.k_rho * k_prev
            + ts.k_sd * math.sqrt(1 - ts.k_rho**2) * rng.normal(seed, rng.TAG_K, firms, t)
        )
        l = (
            ts.l_mean * (1 - ts.l_rho)
            + ts.l_rho * l_prev
            + ts.l_sd * math.sqrt(1 - ts.l_rho**2) * rng.normal(seed, rng.TAG_L, firms, t)
        )
    omega = ts.h0 + ts.h1 * omega_prev + eta
    l = l + ts.labor_eta_loading * eta
    k = k + ts.capital_eta_loading * eta
    if ts.z_kind == "bernoulli":
        z = rng.bernoulli(seed, rng.TAG_Z, firms, t, ts.z_prob)
    else:
        z = rng.uniform(seed, rng.TAG_Z, firms, t)
    return omega, k, l, z, eta


def simulate_ces(
    ts: TrueStructure, n_firms: int, n_periods: int, seed: int = 0
) -> FirmPanel:
    """Simulate a balanced panel from the constant-elasticity DGP.

    Material is set to the closed-form first-order-condition optimum each
    period; latent truth columns (``true_*``) are attached.
    """
    ts.validate()
    if n_periods < 2:
        raise ValueError("need at least 2 periods")
    firms = np.arange(n_firms, dtype=np.uint64)
    frames = []
    prev = None
    for t in range(1, n_periods + 1):
        omega, k, l, z, _ = _draw_inputs(ts, seed, firms, t, prev)
        rho = np.asarray(ts.rho(z), dtype=float)
        alpha = np.asarray(ts.alpha_at(z, t), dtype=float)
        s = rho * ts.theta_m
        m = (
            np.log(s)
            + alpha
            + rho * (ts.theta0 + ts.theta_k * k + ts.theta_l * l + omega)
            - ts.p_m
        ) / (1.0 - s)
        y = ts.theta0 + ts.theta_m * m + ts.theta_k * k + ts.theta_l * l + omega
        rbar = alpha + rho * y
        eps = ts.sigma_eps * rng.normal(seed, rng.TAG_EPS, firms, t)
        r = rbar + eps
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("non-finite revenue in simulation")
        frames.append(
            pd.DataFrame(
                {
                    "firm_id": firms.astype(np.int64),
                    "period": t,
                    "r": r,
                    "m": m,
                    "k": k,
                    "l": l,
                    "z": z,
                    "mx": np.exp(ts.p_m + m),
                    "true_omega": omega,
                    "true_markup": 1.0 / rho,
                    "true_p": alpha + (rho - 1.0) * y,
                    "true_y": y,
                    "true_eps": eps,
                }
            )
        )
        prev = (omega, k, l)
    df = pd.concat(frames, ignore_index=True)
    return from_frame(df, z_discrete=ts.z_kind == "bernoulli")


# ---------------------------------------------------------------------------
# closed-form oracles


@dataclass(frozen=True)
class OracleControl:
    """Closed-form control function of the constant-elasticity DGP.

    TFP equals ``intercept(z) + slope_m(z) * m + slope_k * k + slope_l * l``;
    log revenue net of noise equals ``rev_const(z) + m``; the material revenue
    share equals ``mat_share(z)``.
    """

    intercept: Callable
    slope_m: Callable
    slope_k: float
    slope_l: float
    rev_const: Callable
    mat_share: Callable


def oracle_control(ts: TrueStructure) -> OracleControl:
    ts.validate()

    def slope_m(z):
        rho = np.asarray(ts.rho(z), dtype=float)
        return (1.0 - rho * ts.theta_m) / rho

    def intercept(z):
        rho = np.asarray(ts.rho(z), dtype=float)
        alpha = np.asarray(ts.alpha(z), dtype=float)
        return (ts.p_m - alpha - np.log(rho * ts.theta_m)) / rho - ts.theta0

    def rev_const(z):
        rho = np.asarray(ts.rho(z), dtype=float)
        return ts.p_m - np.log(rho * ts.theta_m)

    def mat_share(z):
        return np.asarray(ts.rho(z), dtype=float) * ts.theta_m

    return OracleControl(
        intercept=intercept,
        slope_m=slope_m,
        slope_k=-ts.theta_k,
        slope_l=-ts.theta_l,
        rev_const=rev_const,
        mat_share=mat_share,
    )


@dataclass(frozen=True)
class NormPoints:
    """Anchors fixing location and scale: two material values at a common
    (k, l, z) point, with the control function pinned to 0 and 1 there."""

    m0: float
    m1: float
    k: float
    l: float
    z: float

    def __post_init__(self):
        if not self.m0 < self.m1:
            raise ValueError("normalization requires m0 < m1")


@dataclass(frozen=True)
class OracleIdentified:
    """What the pipeline should produce under a given normalization.

    The identified structure relates to the true one through the location
    shifts ``a1`` (production) and ``a2`` (control) and the scale ``b``.
    """

    a1: float
    a2: float
    b: float
    theta_m: float
    theta_k: float
    theta_l: float
    crs_scale: float
    rho: Callable
    markup: Callable
    control_slope_m: Callable
    control_offset: Callable

    def control_value(self, oc: OracleControl, m, k, l, z):
        true_val = (
            np.asarray(oc.intercept(z), dtype=float)
            + np.asarray(oc.slope_m(z), dtype=float) * np.asarray(m, dtype=float)
            + oc.slope_k * np.asarray(k, dtype=float)
            + oc.slope_l * np.asarray(l, dtype=float)
        )
        return self.a2 + self.b * true_val

    def omega_map(self, omega_true):
        return self.a2 + self.b * np.asarray(omega_true, dtype=float)


def oracle_identified(ts: TrueStructure, norm: NormPoints) -> OracleIdentified:
    """Map the true structure to the values identified under ``norm``."""
    oc = oracle_control(ts)
    slope_star = float(oc.slope_m(norm.z))
    b = 1.0 / (slope_star * (norm.m1 - norm.m0))
    ctl0 = float(
        oc.intercept(norm.z) + slope_star * norm.m0 + oc.slope_k * norm.k + oc.slope_l * norm.l
    )
    a2 = -b * ctl0
    f0 = ts.theta0 + ts.theta_m * norm.m0 + ts.theta_k * norm.k + ts.theta_l * norm.l
    a1 = -b * f0

    def rho_ident(z):
        return np.asarray(ts.rho(z), dtype=float) / b

    def markup_ident(z):
        return b / np.asarray(ts.rho(z), dtype=float)

    def slope_ident(z):
        return b * np.asarray(oc.slope_m(z), dtype=float)

    def control_offset(z):
        # value of the identified control function at (m0, k*, l*, z)
        base = (
            np.asarray(oc.intercept(z), dtype=float)
            + np.asarray(oc.slope_m(z), dtype=float) * norm.m0
            + oc.slope_k * norm.k
            + oc.slope_l * norm.l
        )
        return a2 + b * base

    return OracleIdentified(
        a1=a1,
        a2=a2,
        b=b,
        theta_m=b * ts.theta_m,
        theta_k=b * ts.theta_k,
        theta_l=b * ts.theta_l,
        crs_scale=b * (ts.theta_m + ts.theta_k + ts.theta_l),
        rho=rho_ident,
        markup=markup_ident,
        control_slope_m=slope_ident,
        control_offset=control_offset,
    )


# ---------------------------------------------------------------------------
# homothetic single-aggregator simulator


@dataclass(frozen=True)
class ShareSpec:
    """Budget-share function S(xi, z) of quantity relative to the aggregator.

    ``ces``: S = kappa * xi**rho(z), constant share elasticity rho(z).
    ``logquad``: log S quadratic in log xi, share elasticity
    rho(z) - curvature * ln(xi), so markups vary continuously with size.
    """

    kind: str = "ces"
    kappa: float = 1.0
    rho: ZMap = field(default_factory=lambda: const_map(0.8))
    curvature: float = 0.0

    def log_share(self, log_xi, z):
        rho = np.asarray(self.rho(z), dtype=float)
        if self.kind == "ces":
            return math.log(self.kappa) + rho * log_xi
        if self.kind == "logquad":
            return math.log(self.kappa) + rho * log_xi - 0.5 * self.curvature * log_xi**2
        raise ValueError(f"unknown share kind {self.kind!r}")

    def share(self, xi, z):
        return np.exp(self.log_share(np.log(xi), z))

    def elasticity(self, log_xi, z):
        """d ln S / d ln xi; the inverse of the markup at that point."""
        rho = np.asarray(self.rho(z), dtype=float)
        if self.kind == "ces":
            return rho * np.ones_like(np.asarray(log_xi, dtype=float))
        return rho - self.curvature * np.asarray(log_xi, dtype=float)

    def check_range(self, log_xi, z, lo: float = 1e-6, hi: float = 1.0):
        el = self.elasticity(log_xi, z)
        if np.any(el <= lo) or np.any(el >= hi):
            raise ValueError(
                "share elasticity leaves (0, 1) on the requested range; "
                "the share condition S'(x) x < S(x) fails there"
            )


def _solve_material_foc(
    spec: ShareSpec,
    ts: TrueStructure,
    phi_budget: float,
    log_a: float,
    k: np.ndarray,
    l: np.ndarray,
    omega: np.ndarray,
    z: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> np.ndarray:
    """Per-firm optimal log material given the aggregator, vectorized.

    Solves ln(theta_m * Phi * S'(xi) * xi) = p_m + m by safeguarded Newton
    within a bisection bracket; the left side is the log marginal revenue of
    material and is strictly decreasing in m net of the right side.
    """
    base = ts.theta0 + ts.theta_k * k + ts.theta_l * l + omega

    def resid(m):
        log_xi = base + ts.theta_m * m - log_a
        el = spec.elasticity(log_xi, z)
        log_mrev = math.log(ts.theta_m * phi_budget) + spec.log_share(log_xi, z) + np.log(el)
        return log_mrev - ts.p_m - m, log_xi, el

    lo = np.full(k.shape, -40.0)
    hi = np.full(k.shape, 40.0)
    f_lo, _, _ = resid(lo)
    f_hi, _, _ = resid(hi)
    if np.any(f_lo <= 0) or np.any(f_hi >= 0):
        raise RuntimeError("material first-order condition not bracketed")
    m = 0.5 * (lo + hi)
    for _ in range(max_iter):
        f, log_xi, el = resid(m)
        done = np.abs(f) < tol
        if done.all():
            break
        lo = np.where(f > 0, m, lo)
        hi = np.where(f < 0, m, hi)
        # d resid / dm = theta_m * dln(S'(xi) xi)/dln(xi) - 1
        if spec.kind == "ces":
            dlog = el
        else:
            dlog = el - spec.curvature / np.maximum(el, 1e-12)
        deriv = ts.theta_m * dlog - 1.0
        step = np.where(np.abs(deriv) > 1e-8, -f / np.where(deriv == 0, 1.0, deriv), np.nan)
        cand = m + step
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
        m = np.where(bad, 0.5 * (lo + hi), cand)
    else:
        raise RuntimeError("material first-order condition did not converge")
    return m


def solve_period_hsa(
    spec: ShareSpec,
    ts: TrueStructure,
    phi_budget: float,
    k: np.ndarray,
    l: np.ndarray,
    omega: np.ndarray,
    z: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200,
):
    """Resolve the aggregator and all firm choices for one cross section.

    The aggregator makes shares sum to one; it is found by damped
    multiplicative iteration with a bisection fallback on ln A.
    """

    def shares_at(log_a):
        m = _solve_material_foc(spec, ts, phi_budget, log_a, k, l, omega, z)
        log_xi = ts.theta0 + ts.theta_m * m + ts.theta_k * k + ts.theta_l * l + omega - log_a
        total = float(np.sum(np.exp(spec.log_share(log_xi, z))))
        return total, m, log_xi

    log_a = float(np.mean(ts.theta0 + ts.theta_k * k + ts.theta_l * l + omega)) + math.log(
        max(len(k), 1)
    )
    total, m, log_xi = shares_at(log_a)
    lo = hi = None
    for _ in range(max_iter):
        if abs(total - 1.0) < tol:
            break
        if total > 1.0:
            lo = log_a
        else:
            hi = log_a
        el_bar = float(np.mean(spec.elasticity(log_xi, z)))
        el_bar = min(max(el_bar, 0.05), 0.999)
        # shares scale like A^(-el_bar) holding choices fixed; damp the update
        step = math.log(total) / el_bar
        cand = log_a + 0.5 * step
        if lo is not None and hi is not None and not (lo < cand < hi):
            cand = 0.5 * (lo + hi)
        log_a = cand
        total, m, log_xi = shares_at(log_a)
    else:
        raise RuntimeError("aggregator iteration did not converge")
    spec.check_range(log_xi, z)
    return math.exp(log_a), m, log_xi


def simulate_hsa(
    spec: ShareSpec,
    ts: TrueStructure,
    n_firms: int,
    n_periods: int,
    seed: int = 0,
    phi_budget: float | None = None,
) -> FirmPanel:
    """Simulate a panel where demand follows the single-aggregator system.

    ``ts`` supplies the production side (theta coefficients, TFP process and
    input laws); its demand fields are ignored.  ``phi_budget`` is the
    industry expenditure, defaulting to the number of firms.
    """
    ts.validate()
    if n_periods < 2:
        raise ValueError("need at least 2 periods")
    if phi_budget is None:
        phi_budget = float(n_firms)
    firms = np.arange(n_firms, dtype=np.uint64)
    frames = []
    prev = None
    for t in range(1, n_periods + 1):
        omega, k, l, z, _ = _draw_inputs(ts, seed, firms, t, prev)
        a_t, m, log_xi = solve_period_hsa(spec, ts, phi_budget, k, l, omega, z)
        y = ts.theta0 + ts.theta_m * m + ts.theta_k * k + ts.theta_l * l + omega
        p = math.log(phi_budget) + spec.log_share(log_xi, z) - y
        rbar = p + y
        eps = ts.sigma_eps * rng.normal(seed, rng.TAG_EPS, firms, t)
        el = spec.elasticity(log_xi, z)
        frames.append(
            pd.DataFrame(
                {
                    "firm_id": firms.astype(np.int64),
                    "period": t,
                    "r": rbar + eps,
                    "m": m,
                    "k": k,
                    "l": l,
                    "z": z,
                    "mx": np.exp(ts.p_m + m),
                    "true_omega": omega,
                    "true_markup": 1.0 / el,
                    "true_p": p,
                    "true_y": y,
                    "true_eps": eps,
                    "true_aggregator": a_t,
                }
            )
        )
        prev = (omega, k, l)
    df = pd.concat(frames, ignore_index=True)
    return from_frame(df, z_discrete=ts.z_kind == "bernoulli")
