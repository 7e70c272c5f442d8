"""Forecast verification: baselines, skill metrics, significance and rollout scoring.

All spatial metrics are area weighted (cos latitude) over a region mask and
skip cells where either field is missing.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .catalog import DEFAULT_CATALOG, VariableCatalog
from .grid import GridSpec, as_date, doy_slot
from .physics import ConstraintToggles, apply_constraints
from .preprocess import ClimatologyTable, DailyData
from .tensor import Tensor, no_grad

__all__ = [
    "RegionMask",
    "global_mask",
    "africa_mask",
    "rmse",
    "acc",
    "RPCResult",
    "rpc",
    "rpc_from_sums",
    "dm_statistic",
    "dm_test",
    "ClimatologyStack",
    "climatology_forecast",
    "persistence_forecast",
    "ModelForecaster",
    "ClimatologyEmitter",
    "PersistenceEmitter",
    "SkillReport",
    "rollout",
    "rollout_evaluate",
    "anomaly_distribution",
    "scorecard_rows",
    "scorecard_export",
    "read_scorecard",
    "SEASONS",
]

AFRICA_BOX = {"lat": (-35.0, 38.0), "lon": (-18.0, 52.0)}
SEASONS = {"MAMJJA": (3, 4, 5, 6, 7, 8), "SONDJF": (9, 10, 11, 12, 1, 2)}


# -- regions ---------------------------------------------------------------------------


@dataclass
class RegionMask:
    name: str
    mask: np.ndarray
    area_weights: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError(f"region {self.name!r} selects no cells")
        self.area_weights = np.broadcast_to(np.asarray(self.area_weights, dtype=np.float64), self.mask.shape)

    @property
    def weights(self) -> np.ndarray:
        return np.where(self.mask, self.area_weights, 0.0)


def global_mask(grid: GridSpec) -> RegionMask:
    return RegionMask("global", np.ones(grid.shape, dtype=bool), grid.area_weights)


def africa_mask(grid: GridSpec, land_sea, box=AFRICA_BOX) -> RegionMask:
    """Land cells (land-sea fraction >= 0.5) inside the African lat/lon box."""
    lon = (grid.lon + 180.0) % 360.0 - 180.0
    inside = (grid.lat[:, None] >= box["lat"][0]) & (grid.lat[:, None] <= box["lat"][1])
    inside = inside & (lon[None, :] >= box["lon"][0]) & (lon[None, :] <= box["lon"][1])
    return RegionMask("africa", inside & (np.asarray(land_sea) >= 0.5), grid.area_weights)


def _weights(region) -> np.ndarray:
    return region.weights if isinstance(region, RegionMask) else np.asarray(region, dtype=np.float64)


# -- point metrics ----------------------------------------------------------------------


def rmse(pred, truth, region) -> float:
    """Square root of the weighted mean squared difference over the region."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    w = np.where(np.isfinite(p) & np.isfinite(t), _weights(region), 0.0)
    total = w.sum()
    if total <= 0:
        return math.nan
    d = np.where(w > 0, p - t, 0.0)
    return math.sqrt(float((w * d * d).sum() / total))


def acc(pred_anom, truth_anom, region) -> float:
    """Weighted, centred correlation of two anomaly fields; NaN when either is constant."""
    p = np.asarray(pred_anom, dtype=np.float64)
    t = np.asarray(truth_anom, dtype=np.float64)
    w = np.where(np.isfinite(p) & np.isfinite(t), _weights(region), 0.0)
    total = w.sum()
    if total <= 0:
        return math.nan
    w = w / total
    p = np.where(w > 0, p, 0.0)
    t = np.where(w > 0, t, 0.0)
    sel = w > 0
    if np.ptp(p[sel]) == 0 or np.ptp(t[sel]) == 0:
        return math.nan
    pc = p - (w * p).sum()
    tc = t - (w * t).sum()
    den = math.sqrt(float((w * pc * pc).sum()) * float((w * tc * tc).sum()))
    return float(np.clip((w * pc * tc).sum() / den, -1.0, 1.0))


def _batched_rmse(pred, truth, weights):
    """RMSE over the last two axes for every leading index."""
    ok = np.isfinite(pred) & np.isfinite(truth)
    w = np.where(ok, weights, 0.0)
    d = np.where(ok, pred - truth, 0.0)
    total = w.sum(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt((w * d * d).sum(axis=(-2, -1)) / total)


def _is_constant(x, sel):
    lo = np.where(sel, x, np.inf).min(axis=(-2, -1))
    hi = np.where(sel, x, -np.inf).max(axis=(-2, -1))
    return lo == hi


def _batched_acc(pred, truth, weights):
    ok = np.isfinite(pred) & np.isfinite(truth)
    w = np.where(ok, weights, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = w / w.sum(axis=(-2, -1), keepdims=True)
        p = np.where(ok, pred, 0.0)
        t = np.where(ok, truth, 0.0)
        pc = p - (w * p).sum(axis=(-2, -1), keepdims=True)
        tc = t - (w * t).sum(axis=(-2, -1), keepdims=True)
        num = (w * pc * tc).sum(axis=(-2, -1))
        den = np.sqrt((w * pc * pc).sum(axis=(-2, -1)) * (w * tc * tc).sum(axis=(-2, -1)))
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    # constant fields leave rounding-level variance behind; they have no correlation
    sel = ok & (np.broadcast_to(weights, ok.shape) > 0)
    flat = _is_constant(pred, sel) | _is_constant(truth, sel)
    out = np.where(flat, np.nan, out)
    return np.clip(out, -1.0, 1.0)


# -- ratio of predictable components -----------------------------------------------------


@dataclass
class RPCResult:
    field: np.ndarray  # per-cell RPC, NaN where undefined
    defined: np.ndarray  # bool mask of cells with a defined value
    mean: float  # weighted mean over defined cells of the region


def rpc_from_sums(n, sp, st, spp, stt, spt, region, min_var: float = 1e-12) -> RPCResult:
    """RPC from per-cell running sums of predicted (p) and verifying (t) anomalies."""
    if n < 3:
        raise ValueError("RPC needs at least 3 initialisation dates")
    mp, mt = sp / n, st / n
    var_m = np.maximum(spp / n - mp * mp, 0.0)
    var_t = np.maximum(stt / n - mt * mt, 0.0)
    cov = spt / n - mp * mt
    var_e = np.maximum(var_m + var_t - 2.0 * cov, 0.0)
    defined = (var_m >= min_var) & (var_t >= min_var)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = cov / np.sqrt(var_m * var_t)
        rho_f = np.sqrt(var_m / (var_m + var_e))
        out = np.where(defined, rho / rho_f, np.nan)
    w = np.where(defined, _weights(region), 0.0)
    if w.sum() <= 0:
        raise ValueError("RPC undefined at every cell of the region")
    return RPCResult(out, defined, float((w * np.where(defined, out, 0.0)).sum() / w.sum()))


def rpc(pred_anoms, truth_anoms, region, min_var: float = 1e-12) -> RPCResult:
    """RPC per cell over initialisation dates (axis 0), then averaged over the region.

    ``rho`` is the correlation of predicted and verifying anomalies,
    ``rho_f = sqrt(var_m / (var_m + var_e))`` with ``var_e`` the variance of
    the forecast error, and RPC = ``rho / rho_f``.  Cells with model or
    verification variance below ``min_var`` are undefined.
    """
    p = np.asarray(pred_anoms, dtype=np.float64)
    t = np.asarray(truth_anoms, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("prediction and verification shapes differ")
    return rpc_from_sums(p.shape[0], p.sum(0), t.sum(0), (p * p).sum(0), (t * t).sum(0), (p * t).sum(0), region, min_var)


# -- Diebold-Mariano -----------------------------------------------------------------


def dm_statistic(d, h: int = 1):
    """DM statistic and two-sided normal p-value for a loss differential series ``d``."""
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if h < 1 or n < 2 * h:
        raise ValueError(f"need at least {2 * h} differentials for horizon {h}, got {n}")
    dbar = d.mean()
    c = d - dbar
    gamma0 = float(c @ c) / n
    if gamma0 == 0.0:
        return 0.0, 1.0
    v = gamma0 + 2.0 * sum(float(c[k:] @ c[:-k]) / n for k in range(1, h))
    if v <= 0.0:
        v = gamma0  # truncated long-run variance can go negative; fall back to lag 0
    stat = dbar / math.sqrt(v / n)
    return float(stat), float(2.0 * norm.sf(abs(stat)))


def dm_test(errors_a, errors_b, h: int = 1):
    """Compare two error series by squared-error loss; positive favours ``b``."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    return dm_statistic(a * a - b * b, h)


# -- baselines -------------------------------------------------------------------------


class ClimatologyStack:
    """Day-of-year means ``[366, C, H, W]`` for the output variables."""

    def __init__(self, tables: dict, names):
        self.names = list(names)
        self.mean = np.stack([tables[n].mean for n in self.names], axis=1)
        # long-term per-cell mean: the anomaly base for ACC
        self.base = self.mean.mean(axis=0)

    @classmethod
    def load(cls, archive, catalog: VariableCatalog = DEFAULT_CATALOG):
        names = [v.name for v in catalog.outputs]
        return cls({n: ClimatologyTable.load(archive, n) for n in names}, names)

    def at(self, dates) -> np.ndarray:
        return self.mean[[doy_slot(d) for d in dates]]


def climatology_forecast(date, lead: int, table) -> np.ndarray:
    """Climatological mean for the day of year of ``date + lead``."""
    valid = as_date(date) + dt.timedelta(days=int(lead))
    if isinstance(table, ClimatologyStack):
        return table.mean[doy_slot(valid)]
    return table.mean_for(valid)


def persistence_forecast(init_state, lead: int) -> np.ndarray:
    """The initial state, whatever the lead."""
    if lead < 0:
        raise ValueError("lead must be non-negative")
    return np.array(init_state, dtype=np.float64, copy=True)


# -- forecasters -------------------------------------------------------------------------


class ModelForecaster:
    """Constrained one-day steps of a trained network in physical units."""

    def __init__(self, model, scaler, area_weights, toggles: ConstraintToggles | None = None, catalog: VariableCatalog = DEFAULT_CATALOG):
        self.model = model
        self.scaler = scaler
        self.area_weights = np.asarray(area_weights, dtype=np.float64)
        self.toggles = toggles or ConstraintToggles()
        self.catalog = catalog

    def step(self, x, prev_out, valid_dates):
        xn = np.nan_to_num(self.scaler.to_model(x, "input"), nan=0.0)
        with no_grad():
            pred = self.model.forward(Tensor(xn), training=False).data
            pred = self.scaler.to_physical(pred, "output")
            out, self.last_reports = apply_constraints(x, pred, self.area_weights, self.toggles, self.catalog)
        return out.data


class ClimatologyEmitter:
    """Predicts the climatological mean of each valid date."""

    def __init__(self, clim: ClimatologyStack):
        self.clim = clim

    def step(self, x, prev_out, valid_dates):
        return self.clim.at(valid_dates)


class PersistenceEmitter:
    """Returns the state it is given: the identity model."""

    def step(self, x, prev_out, valid_dates):
        return np.array(prev_out, copy=True)


def rollout(forecaster, data: DailyData, init_dates, n_steps: int):
    """Autoregressive forecasts ``[n_steps, B, 23, H, W]`` from the analyses at ``init_dates``.

    Dynamic, cyclic and static forcing for each step is taken from ``data``
    at the step's start date.
    """
    npg = data.catalog.n_prognostic
    x = np.stack([data.input_stack(d) for d in init_dates])
    prev = np.stack([data.output_stack(d) for d in init_dates])
    out = []
    for lead in range(1, n_steps + 1):
        valid = [d + dt.timedelta(days=lead) for d in init_dates]
        pred = np.asarray(forecaster.step(x, prev, valid), dtype=np.float64)
        out.append(pred)
        if lead < n_steps:
            forcing = np.stack([data.input_stack(d)[npg:] for d in valid])
            x = np.concatenate([pred[:, :npg], forcing], axis=1)
            prev = pred
    return np.stack(out)


# -- rollout evaluation -----------------------------------------------------------------

SOURCES = ("model", "climatology", "persistence")
BASELINES = ("climatology", "persistence")


def _season(date):
    return next(s for s, months in SEASONS.items() if as_date(date).month in months)


@dataclass
class SkillReport:
    variables: list
    leads: list
    init_dates: list
    masks: list
    samples: dict  # (metric, source, mask) -> [N, L, C]
    rpc: dict  # (source, mask) -> [L, C]
    dm: dict  # (baseline, mask) -> (stat [L, C], p [L, C])
    anomalies: dict  # (kind, mask) -> [N, L, C] mask-mean day-of-year anomalies
    incidents: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def seasons(self):
        return [_season(d) for d in self.init_dates]

    def summary(self, metric, source, mask, season=None):
        """Mean and standard deviation over init dates, each ``[L, C]``."""
        a = self.samples[(metric, source, mask)]
        if season is not None:
            a = a[np.array([s == season for s in self.seasons()], dtype=bool)]
        if a.shape[0] == 0:
            nan = np.full(a.shape[1:], np.nan)
            return nan, nan, 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(a, axis=0), np.nanstd(a, axis=0), a.shape[0]


def _dm_horizon(lead, stride, n):
    return max(1, min(-(-lead // stride), n // 2))


def rollout_evaluate(
    forecaster,
    data: DailyData,
    clim: ClimatologyStack,
    masks,
    max_lead: int = 90,
    init_dates=None,
    init_stride: int = 1,
    batch_size: int = 16,
    years=None,
) -> SkillReport:
    """Score ``max_lead``-day rollouts from every valid init date against truth and baselines.

    An init date is valid when it lies in ``years`` (default: all loaded
    years) and truth exists for every lead.  A rollout that turns non-finite
    is dropped and recorded as an incident.
    """
    masks = list(masks)
    names = data.output_names
    c = len(names)
    if init_dates is None:
        years = set(years or data.years)
        init_dates = [d for d in data.dates if d.year in years and data.has(d + dt.timedelta(days=max_lead))][::init_stride]
    init_dates = [as_date(d) for d in init_dates]
    if not init_dates:
        raise ValueError("no valid initialisation dates")
    leads = list(range(1, max_lead + 1))
    l_n = len(leads)
    weights = {m.name: m.weights for m in masks}
    samples = {(k, s, m.name): [] for k in ("rmse", "acc") for s in SOURCES for m in masks}
    anoms = {(k, m.name): [] for k in ("prediction", "truth") for m in masks}
    shape = data.grid.shape
    sums = {s: [np.zeros((l_n, c) + shape) for _ in range(5)] for s in SOURCES}
    kept, incidents = [], []
    persist = PersistenceEmitter()
    climf = ClimatologyEmitter(clim)
    for b in range(0, len(init_dates), batch_size):
        batch = init_dates[b : b + batch_size]
        preds = rollout(forecaster, data, batch, max_lead)
        finite = _finite_rollouts(preds, clim, batch, leads)
        for i, d in enumerate(batch):
            if not finite[i]:
                incidents.append({"init_date": d.isoformat(), "kind": "non-finite rollout"})
        ok = np.nonzero(finite)[0]
        if ok.size == 0:
            continue
        batch = [batch[i] for i in ok]
        preds = preds[:, ok]
        kept += batch
        init_out = np.stack([data.output_stack(d) for d in batch])
        per_rmse = {(s, m.name): np.empty((len(batch), l_n, c)) for s in SOURCES for m in masks}
        per_acc = {(s, m.name): np.empty((len(batch), l_n, c)) for s in SOURCES for m in masks}
        pa = {m.name: np.empty((len(batch), l_n, c)) for m in masks}
        ta = {m.name: np.empty((len(batch), l_n, c)) for m in masks}
        for li, lead in enumerate(leads):
            valid = [d + dt.timedelta(days=lead) for d in batch]
            truth = np.stack([data.output_stack(v) for v in valid])
            cmean = clim.at(valid)
            fc = {"model": preds[li], "climatology": climf.step(None, None, valid), "persistence": persist.step(None, init_out, valid)}
            t_anom = truth - cmean
            for s, f in fc.items():
                f_anom = f - cmean
                for k, arr in enumerate((f_anom, t_anom, f_anom * f_anom, t_anom * t_anom, f_anom * t_anom)):
                    sums[s][k][li] += np.nan_to_num(arr).sum(axis=0)
                for m in masks:
                    per_rmse[(s, m.name)][:, li] = _batched_rmse(f, truth, weights[m.name])
                    per_acc[(s, m.name)][:, li] = _batched_acc(f - clim.base, truth - clim.base, weights[m.name])
            for m in masks:
                w = weights[m.name]
                pa[m.name][:, li] = _weighted_mean(preds[li] - cmean, w)
                ta[m.name][:, li] = _weighted_mean(t_anom, w)
        for key in per_rmse:
            samples[("rmse",) + key].append(per_rmse[key])
            samples[("acc",) + key].append(per_acc[key])
        for m in masks:
            anoms[("prediction", m.name)].append(pa[m.name])
            anoms[("truth", m.name)].append(ta[m.name])
    if not kept:
        raise FloatingPointError("every rollout produced non-finite values")
    n = len(kept)
    samples = {k: np.concatenate(v, axis=0) for k, v in samples.items()}
    anoms = {k: np.concatenate(v, axis=0) for k, v in anoms.items()}
    rpc_out = {}
    for s in SOURCES:
        for m in masks:
            arr = np.full((l_n, c), np.nan)
            if n >= 3:
                for li in range(l_n):
                    for ci in range(c):
                        try:
                            arr[li, ci] = rpc_from_sums(n, *(sums[s][k][li, ci] for k in range(5)), m).mean
                        except ValueError:
                            pass
            rpc_out[(s, m.name)] = arr
    dm = {}
    for base in BASELINES:
        for m in masks:
            stat = np.zeros((l_n, c))
            pval = np.ones((l_n, c))
            if n >= 2:
                for li, lead in enumerate(leads):
                    h = _dm_horizon(lead, init_stride, n)
                    for ci in range(c):
                        a = samples[("rmse", "model", m.name)][:, li, ci]
                        bb = samples[("rmse", base, m.name)][:, li, ci]
                        ok = np.isfinite(a) & np.isfinite(bb)
                        if ok.sum() >= 2 * h:
                            stat[li, ci], pval[li, ci] = dm_test(a[ok], bb[ok], h)
            dm[(base, m.name)] = (stat, pval)
    meta = {"weighting": "area (cos latitude)", "acc_anomaly_base": "long-term per-cell climatological mean", "init_stride": init_stride, "max_lead": max_lead}
    return SkillReport(names, leads, kept, [m.name for m in masks], samples, rpc_out, dm, anoms, incidents, meta)


def _finite_rollouts(preds, clim, batch, leads):
    """Per init date: no infinities and no NaN where the climatology is defined."""
    ok = np.ones(len(batch), dtype=bool)
    for li, lead in enumerate(leads):
        p = preds[li]
        defined = np.isfinite(clim.at([d + dt.timedelta(days=lead) for d in batch]))
        bad = np.isinf(p) | (np.isnan(p) & defined)
        ok &= ~bad.reshape(len(batch), -1).any(axis=1)
    return ok


def _weighted_mean(x, w):
    ok = np.isfinite(x)
    ww = np.where(ok, w, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (np.where(ok, x, 0.0) * ww).sum(axis=(-2, -1)) / ww.sum(axis=(-2, -1))


def anomaly_distribution(report: SkillReport, mask: str, leads=None):
    """Per-lead min/mean/max of mask-mean anomalies over init dates, predictions and truth.

    Returns ``{kind: {"samples": [N, L, C], "min": [L, C], "mean": [L, C], "max": [L, C]}}``.
    """
    sel = slice(None) if leads is None else [report.leads.index(l) for l in leads]
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for kind in ("prediction", "truth"):
            a = report.anomalies[(kind, mask)][:, sel]
            out[kind] = {"samples": a, "min": np.nanmin(a, axis=0), "mean": np.nanmean(a, axis=0), "max": np.nanmax(a, axis=0)}
    return out


# -- scorecards --------------------------------------------------------------------------

SCORECARD_FIELDS = [
    "mask",
    "season",
    "variable",
    "lead",
    "baseline",
    "n",
    "model_rmse",
    "model_rmse_std",
    "model_acc",
    "model_acc_std",
    "model_rpc",
    "baseline_rmse",
    "baseline_rmse_std",
    "baseline_acc",
    "baseline_acc_std",
    "baseline_rpc",
    "rmse_improvement_pct",
    "acc_improvement_pct",
    "dm_statistic",
    "dm_pvalue",
]


def _pct(num, den):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den != 0, 100.0 * num / np.where(den != 0, den, 1.0), np.nan)


def scorecard_rows(report: SkillReport):
    """Flat rows: per mask, season, variable, lead and baseline."""
    rows = []
    for mask in report.masks:
        for season in (None,) + tuple(SEASONS):
            m_rmse, m_rmse_sd, n = report.summary("rmse", "model", mask, season)
            m_acc, m_acc_sd, _ = report.summary("acc", "model", mask, season)
            for base in BASELINES:
                b_rmse, b_rmse_sd, _ = report.summary("rmse", base, mask, season)
                b_acc, b_acc_sd, _ = report.summary("acc", base, mask, season)
                rmse_pct = _pct(b_rmse - m_rmse, b_rmse)
                acc_pct = _pct(m_acc - b_acc, b_acc)
                stat, pval = report.dm[(base, mask)]
                for li, lead in enumerate(report.leads):
                    for ci, var in enumerate(report.variables):
                        all_seasons = season is None
                        rows.append(
                            {
                                "mask": mask,
                                "season": season or "all",
                                "variable": var,
                                "lead": lead,
                                "baseline": base,
                                "n": n,
                                "model_rmse": m_rmse[li, ci],
                                "model_rmse_std": m_rmse_sd[li, ci],
                                "model_acc": m_acc[li, ci],
                                "model_acc_std": m_acc_sd[li, ci],
                                "model_rpc": report.rpc[("model", mask)][li, ci] if all_seasons else math.nan,
                                "baseline_rmse": b_rmse[li, ci],
                                "baseline_rmse_std": b_rmse_sd[li, ci],
                                "baseline_acc": b_acc[li, ci],
                                "baseline_acc_std": b_acc_sd[li, ci],
                                "baseline_rpc": report.rpc[(base, mask)][li, ci] if all_seasons else math.nan,
                                "rmse_improvement_pct": rmse_pct[li, ci],
                                "acc_improvement_pct": acc_pct[li, ci],
                                "dm_statistic": stat[li, ci] if all_seasons else math.nan,
                                "dm_pvalue": pval[li, ci] if all_seasons else math.nan,
                            }
                        )
    return rows


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def scorecard_export(report: SkillReport, directory, extra_meta: dict | None = None):
    """Write ``scorecard.csv``, ``distribution.csv``, ``incidents.jsonl`` and ``report_meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = scorecard_rows(report)
    with open(d / "scorecard.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORECARD_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SCORECARD_FIELDS])
    with open(d / "distribution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mask", "variable", "lead", "kind", "min", "mean", "max"])
        for mask in report.masks:
            dist = anomaly_distribution(report, mask)
            for kind, stats in dist.items():
                for li, lead in enumerate(report.leads):
                    for ci, var in enumerate(report.variables):
                        w.writerow([mask, var, lead, kind] + [_fmt(stats[k][li, ci]) for k in ("min", "mean", "max")])
    with open(d / "incidents.jsonl", "w") as fh:
        for inc in report.incidents:
            fh.write(json.dumps(inc, sort_keys=True) + "\n")
    meta = dict(report.meta, init_dates=[x.isoformat() for x in report.init_dates], masks=report.masks, **(extra_meta or {}))
    (d / "report_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d / "scorecard.csv"


_INT_FIELDS = {"lead", "n"}
_STR_FIELDS = {"mask", "season", "variable", "baseline"}


def read_scorecard(path):
    """Parse a scorecard written by :func:`scorecard_export` back into typed rows."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (v if k in _STR_FIELDS else int(v) if k in _INT_FIELDS else float(v)) for k, v in r.items()})
    return out
