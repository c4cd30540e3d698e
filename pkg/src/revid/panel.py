"""Firm-panel data model: CSV ingestion, validation and cross sections.

A panel is a rectangular set of firm-period records carrying log revenue,
log inputs, a demand shifter and material expenditure, with optional latent
truth columns (prefixed ``true_``) attached by the simulators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

#: canonical internal column order
CORE_COLUMNS = ("firm_id", "period", "r", "m", "k", "l", "z", "mx")
DEFAULT_SCHEMA = {
    "firm_id": "id",
    "period": "t",
    "r": "r",
    "m": "m",
    "k": "k",
    "l": "l",
    "z": "z",
    "mx": "mx",
}
TRUTH_COLUMNS = ("true_omega", "true_markup", "true_p", "true_y", "true_eps")

#: columns of the lagged conditioning vector, in fixed order
V_COLUMNS = ("k", "l", "z", "m_lag", "k_lag", "l_lag", "z_lag")


class PanelError(ValueError):
    """Raised on malformed panel input."""


@dataclass(frozen=True)
class FirmPanel:
    """Validated firm panel. Immutable after construction."""

    data: pd.DataFrame
    z_discrete: bool
    z_levels: np.ndarray | None = None

    @property
    def periods(self) -> np.ndarray:
        return np.sort(self.data["period"].unique())

    @property
    def n_firms(self) -> int:
        return self.data["firm_id"].nunique()

    def rows(self, t: int) -> pd.DataFrame:
        return self.data[self.data["period"] == t]

    def has_truth(self) -> bool:
        return all(c in self.data.columns for c in ("true_omega", "true_markup"))

    def counts_by_period(self) -> dict[int, int]:
        return self.data.groupby("period").size().to_dict()


@dataclass(frozen=True)
class PanelPair:
    """Aligned arrays for firms observed in both t-1 and t.

    ``v`` stacks the conditioning columns (k, l, z, m_lag, k_lag, l_lag,
    z_lag) in that fixed order.
    """

    t: int
    firm_id: np.ndarray
    r: np.ndarray
    m: np.ndarray
    k: np.ndarray
    l: np.ndarray
    z: np.ndarray
    mx: np.ndarray
    m_lag: np.ndarray
    k_lag: np.ndarray
    l_lag: np.ndarray
    z_lag: np.ndarray
    r_lag: np.ndarray
    mx_lag: np.ndarray
    attrition: int
    z_discrete: bool
    truth: pd.DataFrame | None = None
    truth_lag: pd.DataFrame | None = None

    def __len__(self) -> int:
        return self.m.shape[0]

    @property
    def v(self) -> np.ndarray:
        """Conditioning matrix, columns in V_COLUMNS order."""
        return np.column_stack(
            [self.k, self.l, self.z, self.m_lag, self.k_lag, self.l_lag, self.z_lag]
        )

    @property
    def x(self) -> np.ndarray:
        """Current inputs (m, k, l)."""
        return np.column_stack([self.m, self.k, self.l])

    @property
    def share(self) -> np.ndarray:
        """Material expenditure over observed revenue level."""
        return self.mx / np.exp(self.r)


def _detect_z_discrete(z: np.ndarray, max_levels: int) -> tuple[bool, np.ndarray | None]:
    levels = np.unique(z)
    if levels.size <= max_levels:
        return True, levels
    return False, None


def from_frame(
    df: pd.DataFrame,
    z_discrete: bool | None = None,
    max_z_levels: int = 10,
    min_rows: int = 1,
) -> FirmPanel:
    """Validate a raw frame (internal column names) into a FirmPanel."""
    missing = [c for c in CORE_COLUMNS if c not in df.columns]
    if missing:
        raise PanelError(f"missing required column(s): {', '.join(missing)}")
    df = df.copy()
    for c in CORE_COLUMNS[2:]:
        df[c] = pd.to_numeric(df[c], errors="coerce")
    df["period"] = df["period"].astype(np.int64)

    n0 = len(df)
    keep = np.isfinite(df[list(CORE_COLUMNS[2:])].to_numpy(dtype=float)).all(axis=1)
    dropped = int(n0 - keep.sum())
    if dropped:
        logger.warning("dropped %d row(s) with missing or non-finite fields", dropped)
        df = df[keep]
    if len(df) < min_rows:
        raise PanelError(f"panel has {len(df)} usable rows, fewer than minimum {min_rows}")
    if (df["mx"] <= 0).any():
        bad = int((df["mx"] <= 0).sum())
        raise PanelError(f"{bad} row(s) with non-positive material expenditure")
    dup = df.duplicated(subset=["firm_id", "period"])
    if dup.any():
        pair = df.loc[dup.idxmax(), ["firm_id", "period"]].tolist()
        raise PanelError(f"duplicate (firm_id, period) entry, first at {tuple(pair)}")

    z = df["z"].to_numpy(dtype=float)
    if z_discrete is None:
        z_discrete, levels = _detect_z_discrete(z, max_z_levels)
    else:
        levels = np.unique(z) if z_discrete else None
    df = df.reset_index(drop=True)
    return FirmPanel(data=df, z_discrete=bool(z_discrete), z_levels=levels)


def load_csv(
    path,
    schema: dict[str, str] | None = None,
    z_discrete: bool | None = None,
    max_z_levels: int = 10,
) -> FirmPanel:
    """Load and validate a firm panel from CSV.

    ``schema`` maps internal names (firm_id, period, r, m, k, l, z, mx) to
    the file's column headers; unmapped names use the defaults.  Latent truth
    columns (``true_*``) are attached when present.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    raw = pd.read_csv(path)
    missing = [schema[c] for c in CORE_COLUMNS if schema[c] not in raw.columns]
    if missing:
        raise PanelError(f"missing required column(s): {', '.join(missing)}")
    rename = {schema[c]: c for c in CORE_COLUMNS}
    df = raw.rename(columns=rename)
    keep = list(CORE_COLUMNS) + [c for c in raw.columns if c.startswith("true_")]
    panel = from_frame(df[keep], z_discrete=z_discrete, max_z_levels=max_z_levels)
    logger.info("loaded panel: rows per period %s", panel.counts_by_period())
    return panel


def save_csv(panel: FirmPanel, path, schema: dict[str, str] | None = None) -> None:
    """Write a panel back to CSV with shortest round-trip float formatting."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    df = panel.data.rename(columns={c: schema[c] for c in CORE_COLUMNS})
    df.to_csv(path, index=False)


def make_pair(panel: FirmPanel, t: int, min_rows: int = 30) -> PanelPair:
    """Inner-join periods t-1 and t on firm_id into aligned arrays.

    Firms missing from either period are dropped and counted as attrition;
    no rows are imputed or fabricated.
    """
    periods = set(panel.periods.tolist())
    if t not in periods or (t - 1) not in periods:
        raise PanelError(f"periods {t - 1} and {t} must both exist; have {sorted(periods)}")
    cur = panel.rows(t)
    lag = panel.rows(t - 1)
    merged = cur.merge(lag, on="firm_id", suffixes=("", "_lag"))
    attrition = (len(cur) - len(merged)) + (len(lag) - len(merged))
    if len(merged) < min_rows:
        raise PanelError(
            f"only {len(merged)} firms matched across periods {t - 1}->{t}, "
            f"fewer than minimum {min_rows}"
        )
    truth = None
    truth_lag = None
    if panel.has_truth():
        cols = [c for c in TRUTH_COLUMNS if c in merged.columns]
        truth = merged[cols].reset_index(drop=True)
        lag_cols = {f"{c}_lag": c for c in TRUTH_COLUMNS if f"{c}_lag" in merged.columns}
        truth_lag = merged[list(lag_cols)].rename(columns=lag_cols).reset_index(drop=True)
    arr = lambda c: merged[c].to_numpy(dtype=float)
    return PanelPair(
        t=t,
        firm_id=merged["firm_id"].to_numpy(),
        r=arr("r"),
        m=arr("m"),
        k=arr("k"),
        l=arr("l"),
        z=arr("z"),
        mx=arr("mx"),
        m_lag=arr("m_lag"),
        k_lag=arr("k_lag"),
        l_lag=arr("l_lag"),
        z_lag=arr("z_lag"),
        r_lag=arr("r_lag"),
        mx_lag=arr("mx_lag"),
        attrition=int(attrition),
        z_discrete=panel.z_discrete,
        truth=truth,
        truth_lag=truth_lag,
    )
