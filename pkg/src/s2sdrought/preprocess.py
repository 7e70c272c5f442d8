"""Preprocessing from a raw GRD1 archive to model-ready daily fields.

Steps, in order: optional 4x block coarsening, forward gap filling of the
sparse vegetation products, the centred 30-day precipitation accumulation,
training-period climatologies (including the shortwave cycle used as the
cyclic forcing), and z-score normalization statistics.  In-memory assembly
of input/output stacks lives in :class:`DailyData`.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .archive import Archive, ArchiveError
from .catalog import DEFAULT_CATALOG, SPARSE_VARIABLES, Role, VariableCatalog
from .grid import LEAP_SLOT, N_SLOTS, GridSpec, as_date, doy_slot

# variables derived here rather than read from the raw archive
DERIVED = ("precip30", "ssr_clim")


# -- elementary series operations ---------------------------------------------------


def gap_fill_forward(series):
    """Carry the most recent observation forward along axis 0.

    ``series`` holds NaN on days without an observation.  Days before the
    first observation stay NaN.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot gap fill an empty series")
    seen = np.isfinite(x)
    if not seen.any():
        raise ValueError("series has no observations")
    t = np.arange(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
    last = np.maximum.accumulate(np.where(seen, t, -1), axis=0)
    out = np.take_along_axis(x, np.maximum(last, 0), axis=0)
    out[last < 0] = np.nan
    return out


def centered_window_weights(window: int) -> np.ndarray:
    """Weights of a centred moving window of ``window`` days.

    Odd windows are a plain box.  Even windows span ``window + 1`` days with
    half weight at both ends, so the window is exactly centred and its
    weights sum to ``window``.
    """
    if window < 1:
        raise ValueError("window must be positive")
    if window % 2:
        return np.ones(window)
    w = np.ones(window + 1)
    w[0] = w[-1] = 0.5
    return w


def running_accumulation_30(daily, window: int = 30, as_total: bool = True):
    """Centred running mean over ``window`` days, times ``window`` when ``as_total``.

    Near the series edges the window is truncated to the available days and
    the mean is taken over those days only.  NaN days are skipped likewise.
    """
    x = np.asarray(daily, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("series must cover at least 2 days")
    w = centered_window_weights(window)
    half = len(w) // 2
    ok = np.isfinite(x)
    vals = np.where(ok, x, 0.0)
    num = np.zeros_like(vals)
    den = np.zeros_like(vals)
    n = x.shape[0]
    for k, wk in zip(range(-half, half + 1), w):
        lo, hi = max(0, -k), min(n, n - k)
        num[lo:hi] += wk * vals[lo + k : hi + k]
        den[lo:hi] += wk * ok[lo + k : hi + k]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return mean * window if as_total else mean


def coarsen_4x(fine, fine_lat, factor: int = 4):
    """Block-average ``[..., f*H, f*W]`` to ``[..., H, W]`` with cos-latitude weights.

    Missing fine cells drop out of both the numerator and the weight sum; a
    block with no valid cell is missing.
    """
    x = np.asarray(fine, dtype=np.float64)
    fine_lat = np.asarray(fine_lat, dtype=np.float64)
    *lead, hf, wf = x.shape
    if hf % factor or wf % factor or fine_lat.size != hf:
        raise ValueError(f"grid {hf}x{wf} is not a {factor}x multiple of the target")
    w = np.cos(np.deg2rad(fine_lat))[:, None] * np.ones(wf)
    ok = np.isfinite(x)
    num = np.where(ok, x * w, 0.0)
    den = np.where(ok, w, 0.0)
    shape = (*lead, hf // factor, factor, wf // factor, factor)
    num = num.reshape(shape).sum(axis=(-3, -1))
    den = np.broadcast_to(den, x.shape).reshape(shape).sum(axis=(-3, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def coarsen_grid(grid: GridSpec, factor: int = 4) -> GridSpec:
    return GridSpec(grid.lat.reshape(-1, factor).mean(axis=1), grid.lon.reshape(-1, factor).mean(axis=1))


# -- climatology -----------------------------------------------------------------------


@dataclass
class ClimatologyTable:
    """Day-of-year mean and pooled standard deviation on a 366-slot calendar."""

    name: str
    mean: np.ndarray  # [366, lat, lon]
    std: np.ndarray  # [366, lat, lon]
    halfwidth: int = 15
    years: tuple = ()

    def slot_of(self, date) -> int:
        return doy_slot(date)

    def mean_for(self, date):
        return self.mean[doy_slot(date)]

    def std_for(self, date):
        return self.std[doy_slot(date)]

    def means_for(self, dates):
        return self.mean[[doy_slot(d) for d in dates]]

    def stds_for(self, dates):
        return self.std[[doy_slot(d) for d in dates]]

    def save(self, archive: Archive, group: str = "clim"):
        meta = dict(halfwidth=self.halfwidth, years=list(self.years), variable=self.name, dims=["slot", "lat", "lon"])
        archive.write_table(group, f"{self.name}.mean", self.mean, **meta)
        archive.write_table(group, f"{self.name}.std", self.std, **meta)

    @classmethod
    def load(cls, archive: Archive, name: str, group: str = "clim") -> "ClimatologyTable":
        try:
            header = archive.table_header(group, f"{name}.mean")
            mean = archive.read_table(group, f"{name}.mean")
            std = archive.read_table(group, f"{name}.std")
        except ArchiveError as exc:
            raise ArchiveError(f"no climatology for {name!r} in {archive.root}") from exc
        return cls(name, mean, std, header.get("halfwidth", 15), tuple(header.get("years", ())))


def _slots(dates):
    return np.array([doy_slot(d) for d in dates])


def doy_mean(series, dates):
    """Per-slot mean ``[366, ...]``; the leap slot averages its neighbours."""
    x = np.asarray(series, dtype=np.float64)
    slots = _slots(dates)
    ok = np.isfinite(x)
    total = np.zeros((N_SLOTS,) + x.shape[1:])
    count = np.zeros_like(total)
    np.add.at(total, slots, np.where(ok, x, 0.0))
    np.add.at(count, slots, ok)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.where(count > 0, count, 1.0), np.nan)
    # Feb 29 has a quarter of the samples of its neighbours
    mean[LEAP_SLOT] = 0.5 * (mean[LEAP_SLOT - 1] + mean[LEAP_SLOT + 1])
    return mean


def build_climatology(series, dates, name: str = "", halfwidth: int = 15, years=()) -> ClimatologyTable:
    """Day-of-year mean plus a standard deviation pooled over ``+-halfwidth`` slots.

    The std is a population std of anomalies about each sample's own
    day-of-year mean, pooled circularly across neighbouring slots.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape[0] != len(dates):
        raise ValueError("series and dates disagree in length")
    if x.shape[0] == 0:
        raise ValueError("empty series")
    slots = _slots(dates)
    mean = doy_mean(x, dates)
    anom = x - mean[slots]
    ok = np.isfinite(anom)
    ss = np.zeros_like(mean)
    cnt = np.zeros_like(mean)
    np.add.at(ss, slots, np.where(ok, anom * anom, 0.0))
    np.add.at(cnt, slots, ok)
    pooled_ss = np.zeros_like(ss)
    pooled_n = np.zeros_like(cnt)
    for k in range(-halfwidth, halfwidth + 1):
        pooled_ss += np.roll(ss, k, axis=0)
        pooled_n += np.roll(cnt, k, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        std = np.where(pooled_n > 0, np.sqrt(pooled_ss / np.where(pooled_n > 0, pooled_n, 1.0)), np.nan)
    return ClimatologyTable(name, mean, std, halfwidth, tuple(sorted(years)))


def build_cyclic_forcing(series, dates):
    """366-slot day-of-year mean cycle used as a forcing channel."""
    return doy_mean(series, dates)


# -- normalization ------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-variable z-score statistics from the training years."""

    mean: dict
    std: dict
    passthrough: frozenset = frozenset()
    years: tuple = ()

    def vectors(self, names):
        m = np.array([0.0 if n in self.passthrough else self.mean[n] for n in names])
        s = np.array([1.0 if n in self.passthrough else self.std[n] for n in names])
        return m, s

    def to_dict(self):
        return {
            "mean": dict(self.mean),
            "std": dict(self.std),
            "passthrough": sorted(self.passthrough),
            "years": list(self.years),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["mean"]), dict(d["std"]), frozenset(d.get("passthrough", ())), tuple(d.get("years", ())))


def _channel_shape(x, n):
    shape = [1] * np.ndim(x)
    shape[-3] = n
    return shape


def normalize(state, stats: NormStats, names):
    """z-score ``state[..., C, H, W]`` whose channels are ``names``."""
    m, s = stats.vectors(names)
    shape = _channel_shape(state, len(names))
    return (np.asarray(state) - m.reshape(shape)) / s.reshape(shape)


def denormalize(state, stats: NormStats, names):
    m, s = stats.vectors(names)
    shape = _channel_shape(state, len(names))
    return np.asarray(state) * s.reshape(shape) + m.reshape(shape)


def field_stats(values):
    """Mean and population std over all finite values; std floored to 1 for constant fields."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    mu = float(v.mean())
    sd = float(np.sqrt(np.mean((v - mu) ** 2)))
    return mu, (sd if sd > 1e-12 else 1.0)


# -- dataset split ----------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple = tuple(range(2001, 2018)) + (2022, 2023, 2024)
    val: tuple = (2018, 2019)
    test: tuple = (2020, 2021)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(sorted(int(y) for y in getattr(self, name))))
        if not self.train:
            raise ValueError("the training split is empty")
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError(f"split years overlap: train={self.train} val={self.val} test={self.test}")

    @property
    def all_years(self):
        return tuple(sorted(set(self.train) | set(self.val) | set(self.test)))

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("train", ())), tuple(d.get("val", ())), tuple(d.get("test", ())))


# -- preprocessing driver ---------------------------------------------------------------


@dataclass
class PreprocessConfig:
    coarsen_factor: int = 1
    accumulation_window: int = 30
    accumulation_as_total: bool = True
    clim_halfwidth: int = 15
    pet_floor: float = 1e-6


def _source_years(raw: Archive, catalog: VariableCatalog):
    years = None
    for v in catalog.variables:
        if v.role in (Role.STATIC,) or v.scalar or v.name in DERIVED:
            continue
        ys = set(raw.field_years(v.name))
        if not ys:
            raise ArchiveError(f"raw archive has no data for {v.name!r}")
        years = ys if years is None else years & ys
    if not years:
        raise ArchiveError("raw variables share no common years")
    return sorted(years)


def preprocess(raw: Archive, out_root, split: DatasetSplit, config: PreprocessConfig | None = None, catalog: VariableCatalog = DEFAULT_CATALOG, provenance=None) -> Archive:
    """Turn a raw archive into the processed archive the model trains on."""
    cfg = config or PreprocessConfig()
    years = _source_years(raw, catalog)
    missing = [y for y in split.all_years if y not in years]
    if missing:
        raise ArchiveError(f"split years {missing} absent from the raw archive (has {years[0]}-{years[-1]})")
    years = [y for y in years if y in split.all_years]
    grid = raw.grid
    f = cfg.coarsen_factor
    out_grid = coarsen_grid(grid, f) if f > 1 else grid

    def shrink(a):
        return coarsen_4x(a, grid.lat, f) if f > 1 else a

    prov = dict(provenance or {})
    prov.update(source=raw.root.name, source_digest=raw.digest(), split=split.to_dict(), catalog=catalog.digest(), preprocess=cfg.__dict__)
    out = Archive.create(out_root, out_grid, prov, overwrite=True)
    lengths = {}
    train_series = {}

    def store(name, series, dates, role, units):
        start = 0
        for y in years:
            n = sum(1 for d in dates if d.year == y)
            out.write_field(name, y, series[start : start + n], role=role, units=units, source="preprocess")
            lengths[y] = n
            start += n
        tmask = np.array([d.year in split.train for d in dates])
        train_series[name] = (series[tmask], [d for d, t in zip(dates, tmask) if t])

    for v in catalog.variables:
        if v.role is Role.STATIC or v.scalar or v.name in DERIVED:
            continue
        series, dates = raw.read_series(v.name, years)
        series = shrink(series)
        if v.name in SPARSE_VARIABLES:
            series = gap_fill_forward(series)
        store(v.name, series, dates, v.role.value, v.units)
        if v.name == "precip":
            acc = running_accumulation_30(series, cfg.accumulation_window, cfg.accumulation_as_total)
            store("precip30", acc, dates, Role.DIAGNOSTIC.value, catalog["precip30"].units)

    for v in catalog.variables:
        if v.role is Role.STATIC:
            out.write_static(v.name, shrink(raw.read_static(v.name)), units=v.units, source="preprocess")
        elif v.scalar:
            table = raw.read_index(v.name)
            all_dates = [d for y in years for d in _year_days(y)]
            gaps = [d for d in all_dates if d not in table]
            if gaps:
                raise ArchiveError(f"index {v.name!r} lacks {len(gaps)} dates, first {gaps[0]}")
            out.write_index(v.name, all_dates, [table[d] for d in all_dates])

    # shortwave cycle from the training years serves as the cyclic forcing
    ssr, ssr_dates = train_series["ssr"]
    cycle = build_cyclic_forcing(ssr, ssr_dates)
    out.write_table("cycle", "ssr_clim", cycle, years=list(split.train), source="ssr")

    for v in catalog.outputs:
        series, dates = train_series[v.name]
        build_climatology(series, dates, v.name, cfg.clim_halfwidth, split.train).save(out)
    et, dates = train_series["evap"]
    pet, _ = train_series["pevap"]
    build_climatology(esr(et, pet, cfg.pet_floor), dates, "esr", cfg.clim_halfwidth, split.train).save(out)

    stats = compute_norm_stats(out, split.train, catalog)
    out.write_meta("norm_stats", stats.to_dict())
    out.write_meta("split", split.to_dict())
    return out


def esr(et, pet, floor: float = 1e-6):
    """Evaporative stress ratio ET/PET; NaN where PET is below ``floor``."""
    et = np.asarray(et, dtype=np.float64)
    pet = np.asarray(pet, dtype=np.float64)
    ok = pet >= floor
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ok, et / np.where(ok, pet, 1.0), np.nan)


def _year_days(year):
    d = dt.date(year, 1, 1)
    out = []
    while d.year == year:
        out.append(d)
        d += dt.timedelta(days=1)
    return out


def compute_norm_stats(processed: Archive, years, catalog: VariableCatalog = DEFAULT_CATALOG) -> NormStats:
    """z-score statistics of every catalog variable over the given years."""
    mean, std, passthrough = {}, {}, set()
    years = sorted(years)
    cycle = None
    for v in catalog.variables:
        if v.categorical:
            passthrough.add(v.name)
            mean[v.name], std[v.name] = 0.0, 1.0
            continue
        if v.role is Role.STATIC:
            values = processed.read_static(v.name)
        elif v.scalar:
            table = processed.read_index(v.name)
            values = np.array([x for d, x in table.items() if d.year in years])
        elif v.role is Role.CYCLIC_FORCING:
            cycle = processed.read_table("cycle", v.name) if cycle is None else cycle
            values = cycle[[doy_slot(d) for y in years for d in _year_days(y)]]
        else:
            values, _ = processed.read_series(v.name, years)
        mean[v.name], std[v.name] = field_stats(values)
    return NormStats(mean, std, frozenset(passthrough), tuple(years))


# -- in-memory daily data and stack assembly ---------------------------------------------


class DailyData:
    """Processed fields for a set of years, held in memory for fast assembly.

    Input stacks are ``[25, H, W]`` (prognostic, dynamic forcing, cyclic
    forcing, static) and output stacks ``[23, H, W]`` (prognostic,
    diagnostic), both in catalog order and physical units; use
    :func:`normalize` for model space.
    """

    def __init__(self, archive: Archive, years, catalog: VariableCatalog = DEFAULT_CATALOG):
        self.archive = archive
        self.catalog = catalog
        self.years = tuple(sorted(years))
        self.grid = archive.grid
        self.fields = {}
        self.dates = None
        for v in catalog.variables:
            if v.role is Role.STATIC or v.scalar or v.role is Role.CYCLIC_FORCING:
                continue
            series, dates = archive.read_series(v.name, self.years)
            self.fields[v.name] = series
            self.dates = dates if self.dates is None else self.dates
        self.date_index = {d: i for i, d in enumerate(self.dates)}
        self.static = {v.name: archive.read_static(v.name) for v in catalog.variables if v.role is Role.STATIC}
        self.indices = {v.name: archive.read_index(v.name) for v in catalog.variables if v.scalar}
        self.cycles = {v.name: archive.read_table("cycle", v.name) for v in catalog.variables if v.role is Role.CYCLIC_FORCING}
        self.stats = NormStats.from_dict(archive.read_meta("norm_stats")) if archive.has_meta("norm_stats") else None

    def _t(self, date):
        try:
            return self.date_index[as_date(date)]
        except KeyError:
            raise ArchiveError(f"date {date} outside the loaded years {self.years}") from None

    def has(self, date) -> bool:
        return as_date(date) in self.date_index

    def input_stack(self, date):
        return assemble_input(self, date, self.catalog)

    def output_stack(self, date):
        t = self._t(date)
        return np.stack([self.fields[v.name][t] for v in self.catalog.outputs])

    def forcing_channels(self, date):
        """Non-prognostic input channels ``[25 - 14, H, W]`` for ``date``."""
        return self.input_stack(date)[self.catalog.n_prognostic :]

    @property
    def input_names(self):
        return [v.name for v in self.catalog.inputs]

    @property
    def output_names(self):
        return [v.name for v in self.catalog.outputs]


def assemble_input(data: DailyData, date, catalog: VariableCatalog = DEFAULT_CATALOG, climate_indices=None):
    """Input stack ``[25, H, W]`` for ``date`` in physical units."""
    date = as_date(date)
    t = data._t(date)
    shape = data.grid.shape
    indices = data.indices if climate_indices is None else climate_indices
    layers = []
    for v in catalog.inputs:
        if v.role is Role.STATIC:
            layers.append(data.static[v.name])
        elif v.scalar:
            table = indices.get(v.name)
            if table is None or date not in table:
                raise ArchiveError(f"no {v.name} value for {date}")
            layers.append(np.full(shape, float(table[date])))
        elif v.role is Role.CYCLIC_FORCING:
            layers.append(data.cycles[v.name][doy_slot(date)])
        else:
            if v.name not in data.fields:
                raise ArchiveError(f"missing channel {v.name!r}")
            layers.append(data.fields[v.name][t])
    return np.stack(layers)


def disassemble(stack, names):
    """Split a ``[C, H, W]`` stack into ``{name: field}``."""
    stack = np.asarray(stack)
    if stack.shape[-3] != len(names):
        raise ValueError(f"stack has {stack.shape[-3]} channels, expected {len(names)}")
    return {n: stack[..., i, :, :] for i, n in enumerate(names)}


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
