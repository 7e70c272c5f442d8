"""Drought indices from analyses or forecasts: anomalies, SESR, soil-moisture
percentiles, pentad means and the flash drought intensity index (FDII).

FDII works on pentad soil-moisture percentiles.  An intensification from
pentad ``t`` to ``t + n`` (``n`` in 1..8) qualifies when the percentile
falls by at least 15 points and ends below the 20th percentile.  The
intensity factor is the steepest qualifying rate divided by the 15 points
per 4 pentads baseline; the severity factor is the mean deficit below the
20th percentile over the dry run that starts where the steepest
intensification ends (at most 18 pentads).  FDII is their product.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import N_SLOTS, as_date, doy_slot
from .preprocess import ClimatologyTable, esr

__all__ = [
    "anomaly",
    "anomalies",
    "esr",
    "sesr",
    "SoilMoisturePools",
    "sm_percentile",
    "pentad_index",
    "pentad_aggregate",
    "FDIIConfig",
    "FDIIResult",
    "fdii",
    "forecast_indices",
    "event_table",
    "write_event_table",
    "read_event_table",
]


def anomaly(field, climatology: ClimatologyTable, date):
    """Deviation of ``field`` from the day-of-year climatological mean."""
    return np.asarray(field, dtype=np.float64) - climatology.mean_for(date)


def anomalies(series, dates, climatology: ClimatologyTable):
    return np.asarray(series, dtype=np.float64) - climatology.means_for(dates)


def sesr(esr_series, dates, esr_climatology: ClimatologyTable, min_std: float = 1e-8):
    """Standardized ESR per cell and day of year; NaN where the pooled std is below ``min_std``."""
    x = np.asarray(esr_series, dtype=np.float64)
    mu = esr_climatology.means_for(dates)
    sd = esr_climatology.stds_for(dates)
    ok = sd >= min_std
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ok, (x - mu) / np.where(ok, sd, 1.0), np.nan)


# -- percentiles ---------------------------------------------------------------------


def sm_percentile(values, pool):
    """Plotting-position percentile of ``values[...]`` within ``pool[..., P]``."""
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(pool, dtype=np.float64)
    if p.shape[:-1] != v.shape:
        raise ValueError(f"pool shape {p.shape} does not match values {v.shape}")
    out = kernels.percentile_rank(np.ascontiguousarray(v.reshape(-1)), np.ascontiguousarray(p.reshape(-1, p.shape[-1])))
    return out.reshape(v.shape)


class SoilMoisturePools:
    """Per-cell climatological samples within ``+-halfwidth`` days of each day of year."""

    def __init__(self, series, dates, halfwidth: int = 15):
        self.series = np.asarray(series, dtype=np.float64)
        self.slots = np.array([doy_slot(d) for d in dates])
        self.halfwidth = halfwidth
        if self.series.shape[0] != self.slots.size:
            raise ValueError("series and dates disagree in length")

    def members(self, date) -> np.ndarray:
        """Time indices of the pool for ``date``."""
        s = doy_slot(date)
        d = np.abs(self.slots - s)
        d = np.minimum(d, N_SLOTS - d)
        return np.nonzero(d <= self.halfwidth)[0]

    def pool(self, date) -> np.ndarray:
        """``[H, W, P]`` pool for ``date``."""
        return np.moveaxis(self.series[self.members(date)], 0, -1)

    def percentiles(self, series, dates) -> np.ndarray:
        """Daily percentiles ``[T, H, W]`` of ``series`` against the pools."""
        out = np.empty(np.shape(series))
        cache = {}
        for t, d in enumerate(dates):
            s = doy_slot(d)
            if s not in cache:
                cache[s] = np.ascontiguousarray(self.pool(d).reshape(-1, len(self.members(d))))
            pool = cache[s]
            out[t] = kernels.percentile_rank(np.ascontiguousarray(np.asarray(series[t], dtype=np.float64).reshape(-1)), pool).reshape(out.shape[1:])
        return out


# -- pentads --------------------------------------------------------------------------


def pentad_index(date) -> tuple:
    """``(year, k)`` with ``k`` in 0..72; the last pentad absorbs Dec 31 of leap years."""
    date = as_date(date)
    k = (date - dt.date(date.year, 1, 1)).days // 5
    return date.year, min(k, 72)


def pentad_aggregate(series, dates):
    """Means over calendar pentads.  Returns ``(values[P, ...], labels)``.

    Partial pentads at the ends of the series average the days present; NaN
    days are skipped.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[0] != len(dates) or x.shape[0] == 0:
        raise ValueError("series and dates must be non-empty and of equal length")
    labels = []
    group = np.empty(len(dates), dtype=np.int64)
    for i, d in enumerate(dates):
        key = pentad_index(d)
        if not labels or labels[-1] != key:
            labels.append(key)
        group[i] = len(labels) - 1
    ok = np.isfinite(x)
    total = np.zeros((len(labels),) + x.shape[1:])
    count = np.zeros_like(total)
    np.add.at(total, group, np.where(ok, x, 0.0))
    np.add.at(count, group, ok)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.where(count > 0, count, 1.0), np.nan), labels


# -- FDII -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FDIIConfig:
    max_window: int = 8
    drop_min: float = 15.0
    end_max: float = 20.0
    rate_baseline: float = 15.0 / 4.0
    severity_cap: int = 18


@dataclass
class FDIIResult:
    fd_int: np.ndarray
    dro_sev: np.ndarray
    fdii: np.ndarray
    onset: np.ndarray  # pentad index of the intensification start, -1 if none
    end: np.ndarray
    duration: np.ndarray  # pentads in the severity run


def fdii(pct, config: FDIIConfig = FDIIConfig()) -> FDIIResult:
    """FDII of pentad percentiles ``pct[P, ...]`` (cells on the trailing axes)."""
    p = np.asarray(pct, dtype=np.float64)
    if p.ndim == 0 or p.shape[0] < 2:
        raise ValueError("FDII needs at least 2 pentads")
    cells = p.shape[1:]
    flat = np.ascontiguousarray(p.reshape(p.shape[0], -1))
    fd_int, dro_sev, onset, end, duration = kernels.fdii_scan(
        flat, config.max_window, config.drop_min, config.end_max, config.rate_baseline, config.severity_cap
    )
    shape = lambda a: np.asarray(a).reshape(cells)  # noqa: E731
    return FDIIResult(shape(fd_int), shape(dro_sev), shape(fd_int * dro_sev), shape(onset), shape(end), shape(duration))


# -- forecast indices ------------------------------------------------------------------


def forecast_indices(fields: dict, dates, esr_climatology: ClimatologyTable, sm_pools: dict, config: FDIIConfig = FDIIConfig(), pet_floor: float = 1e-6):
    """SESR (daily) and per-layer FDII from predicted or analysed fields.

    ``fields`` maps variable names to ``[T, H, W]`` series valid on ``dates``
    and must hold ``evap``, ``pevap`` and every soil layer in ``sm_pools``.
    Climatological statistics always come from the training period.
    """
    out = {"sesr": sesr(esr(fields["evap"], fields["pevap"], pet_floor), dates, esr_climatology)}
    for name, pools in sm_pools.items():
        pct = pools.percentiles(fields[name], dates)
        pent, labels = pentad_aggregate(pct, dates)
        out[f"pct_{name}"] = pent
        out[f"fdii_{name}"] = fdii(pent, config) if pent.shape[0] >= 2 else None
        out["pentads"] = labels
    return out


def event_table(result: FDIIResult, lat, lon, layer: str, labels=None):
    """Rows for cells with FDII > 0: layer, row, col, lat, lon, onset, fd_int, dro_sev, fdii."""
    rows = []
    for i, j in zip(*np.nonzero(result.fdii > 0)):
        onset = int(result.onset[i, j])
        tag = f"{labels[onset][0]}-P{labels[onset][1] + 1:02d}" if labels else str(onset)
        rows.append(
            dict(
                layer=layer,
                row=int(i),
                col=int(j),
                lat=float(lat[i]),
                lon=float(lon[j]),
                onset=tag,
                fd_int=float(result.fd_int[i, j]),
                dro_sev=float(result.dro_sev[i, j]),
                fdii=float(result.fdii[i, j]),
            )
        )
    return rows


_EVENT_FIELDS = ["layer", "row", "col", "lat", "lon", "onset", "fd_int", "dro_sev", "fdii"]


def write_event_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_EVENT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_event_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("row", "col"):
            r[k] = int(r[k])
        for k in ("lat", "lon", "fd_int", "dro_sev", "fdii"):
            r[k] = float(r[k])
    return rows
