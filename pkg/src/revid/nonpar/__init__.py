"""Kernel estimation primitives: conditional means, smoothed conditional
CDFs with analytic derivatives, tensor-grid functions and path integration.

The heavy inner sums run on a compiled backend when available; see
``backend.BACKEND`` for which one is active.
"""

from .backend import BACKEND, get_impl
from .bandwidth import BandwidthError, select_bandwidth, silverman
from .condcdf import CondCdf, cond_cdf_deriv, fit_cond_cdf
from .grid import GridFn, quantile_axis
from .integrate import adaptive_simpson, cumtrapz_from, integrate_grid, path_integrate
from .llr import EstimationError, cond_mean, llr_at_points

__all__ = [
    "BACKEND",
    "BandwidthError",
    "CondCdf",
    "EstimationError",
    "GridFn",
    "adaptive_simpson",
    "cond_cdf_deriv",
    "cond_mean",
    "cumtrapz_from",
    "fit_cond_cdf",
    "get_impl",
    "integrate_grid",
    "llr_at_points",
    "path_integrate",
    "quantile_axis",
    "select_bandwidth",
    "silverman",
]
