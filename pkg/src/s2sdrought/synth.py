"""Deterministic synthetic raw archives for desk-scale experiments.

Every gridded variable is a climatological state (smooth spatial pattern
with a seasonal cycle) plus AR(1) anomalies built from a handful of smooth
spatial modes.  Physically linked channels are constructed together:

* evaporative stress ET/PET stays in (0, 1);
* precipitation is rescaled each day so the global column-water budget
  closes exactly against the generated humidity and evaporation;
* surface pressure is a fixed dry-air field plus the weight of the column
  water, plus noise with zero global mean, so dry mass is conserved;
* soil moisture is dominated by year-to-year offsets with small day-to-day
  noise, and optional flash-drought events draw it down rapidly while
  cutting evaporation and rainfall at the target cells.

The climatological state is computed once per 366-slot day of year; the
Feb 29 slot is the mean of its neighbours.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .archive import Archive
from .catalog import DEFAULT_CATALOG, SPARSE_VARIABLES
from .grid import LEAP_SLOT, N_SLOTS, GridSpec, doy_slot, year_dates
from .physics import GRAVITY, LEVEL_THICKNESS

SOIL_LAYERS = ("sm1", "sm2", "sm3", "sm4")


@dataclass
class EventSpec:
    """One injected flash drought in soil moisture."""

    year: int
    start_doy: int = 150  # 0-based day of year the drawdown starts
    onset_days: int = 15
    hold_days: int = 40
    recovery_days: int = 30
    lat_range: tuple = (-10.0, 10.0)
    lon_range: tuple = (10.0, 30.0)
    depth: float = 0.15  # m3 m-3 removed at full intensity
    et_cut: float = 0.6  # fraction of ET removed at full intensity
    precip_cut: float = 0.8

    def mask(self, grid: GridSpec) -> np.ndarray:
        la = (grid.lat >= self.lat_range[0]) & (grid.lat <= self.lat_range[1])
        lo = (grid.lon >= self.lon_range[0]) & (grid.lon <= self.lon_range[1])
        return la[:, None] & lo[None, :]

    def intensity(self, dates) -> np.ndarray:
        """0..1 drawdown profile over ``dates`` (ramp, hold, recovery)."""
        out = np.zeros(len(dates))
        start = dt.date(self.year, 1, 1) + dt.timedelta(days=self.start_doy)
        for i, d in enumerate(dates):
            k = (d - start).days
            if 0 <= k < self.onset_days:
                out[i] = (k + 1) / self.onset_days
            elif self.onset_days <= k < self.onset_days + self.hold_days:
                out[i] = 1.0
            elif 0 <= k - self.onset_days - self.hold_days < self.recovery_days:
                out[i] = 1.0 - (k - self.onset_days - self.hold_days + 1) / self.recovery_days
        return out


@dataclass
class SynthConfig:
    n_lat: int = 16
    n_lon: int = 32
    years: tuple = (2001, 2002, 2003)
    seed: int = 0
    noise_scale: float = 1.0
    interannual_scale: float = 1.0
    ar_coef: float = 0.8
    n_modes: int = 6
    fine_factor: int = 1
    vegetation_cadence: int = 8
    events: list = field(default_factory=list)


# -- building blocks -------------------------------------------------------------------


def smooth_pattern(rng, lat, lon, n_terms: int = 4):
    """Zero-mean, unit-std field from a few low-wavenumber harmonics."""
    phi = np.deg2rad(lat)[:, None]
    lam = np.deg2rad(lon)[None, :]
    f = np.zeros((lat.size, lon.size))
    for _ in range(n_terms):
        m = rng.integers(0, 3)
        n = rng.integers(1, 4)
        f += rng.normal() * np.cos(m * lam + rng.uniform(0, 2 * np.pi)) * np.cos(n * phi + rng.uniform(0, 2 * np.pi))
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def ar1_series(rng, n_steps: int, n_series: int, coef: float):
    """Stationary unit-variance AR(1) paths ``[n_steps, n_series]``."""
    eps = rng.normal(size=(n_steps, n_series))
    out = np.empty_like(eps)
    out[0] = eps[0]
    scale = np.sqrt(1.0 - coef * coef)
    for t in range(1, n_steps):
        out[t] = coef * out[t - 1] + scale * eps[t]
    return out


class _Noise:
    """Smooth AR(1) anomaly fields sharing one set of spatial modes."""

    def __init__(self, rng, grid: GridSpec, n_steps: int, cfg: SynthConfig):
        self.rng = rng
        self.n_steps = n_steps
        self.cfg = cfg
        self.modes = np.stack([smooth_pattern(rng, grid.lat, grid.lon) for _ in range(cfg.n_modes)])

    def field(self, std) -> np.ndarray:
        """``[T, H, W]`` anomalies with per-cell std about ``std`` (scalar or field)."""
        k = self.modes.shape[0]
        coef = ar1_series(self.rng, self.n_steps, k, self.cfg.ar_coef)
        f = np.tensordot(coef, self.modes, axes=(1, 0)) / np.sqrt(k)
        return f * (np.asarray(std) * self.cfg.noise_scale)


def _leap_average(clim: np.ndarray) -> np.ndarray:
    clim[LEAP_SLOT] = 0.5 * (clim[LEAP_SLOT - 1] + clim[LEAP_SLOT + 1])
    return clim


def _seasonal(slots, phase=0.0):
    """``cos`` of the annual angle with the 366-slot calendar; peak near mid-July."""
    return np.cos(2 * np.pi * (np.asarray(slots) - 196 - phase) / N_SLOTS)


def _global_mean(f, weights):
    return (f * weights).sum(axis=(-2, -1)) / weights.sum()


# -- generator ----------------------------------------------------------------------------


def synth_climatology(grid: GridSpec, rng) -> dict:
    """Per-slot climatological state ``{name: [366, H, W]}`` plus static fields."""
    lat, lon = grid.lat, grid.lon
    phi = np.deg2rad(lat)[:, None] * np.ones((1, lon.size))
    hemi = np.sin(phi)  # seasonal sign and strength
    slots = np.arange(N_SLOTS)
    season = _seasonal(slots)[:, None, None]

    def pat():
        return smooth_pattern(rng, lat, lon)

    # land: smooth continents plus a guaranteed block over Africa
    lon2 = lon[None, :] * np.ones((lat.size, 1))
    lat2 = lat[:, None] * np.ones((1, lon.size))
    africa = (lat2 > -35) & (lat2 < 36) & (lon2 > -16) & (lon2 < 50)
    lsm = ((pat() > 0.3) | africa).astype(float)
    static = {
        "lsm": lsm,
        "tvh": np.where(lsm > 0, 1 + (pat() > 0).astype(float) * 2 + (pat() > 0.8), 0.0),
        "cvh": np.clip(0.4 + 0.2 * pat(), 0, 1) * lsm,
        "tvl": np.where(lsm > 0, 1 + (pat() > 0).astype(float) + (pat() > 0.5), 0.0),
        "cvl": np.clip(0.5 + 0.2 * pat(), 0, 1) * lsm,
    }

    c = {}
    c["t2m"] = 300.0 - 35.0 * np.sin(phi) ** 2 + 2.0 * pat() + 10.0 * hemi * season
    c["d2m"] = c["t2m"] - (6.0 + 1.5 * pat() + 2.0 * lsm)
    c["u500"] = 10.0 * np.cos(2 * phi) + 2.0 * pat() + 3.0 * hemi * season
    c["u200"] = 25.0 * np.cos(2 * phi) + 4.0 * pat() + 6.0 * hemi * season
    c["v500"] = 1.5 * pat() + 1.0 * hemi * season
    c["v200"] = 2.5 * pat() + 1.5 * hemi * season
    c["z500"] = GRAVITY * (5650.0 + 200.0 * np.cos(phi) ** 2 + 30.0 * pat() + 40.0 * hemi * season)
    c["z200"] = GRAVITY * (11900.0 + 300.0 * np.cos(phi) ** 2 + 40.0 * pat() + 60.0 * hemi * season)
    # humidity has no seasonal cycle so the climatological column water is steady
    c["qtot500"] = 2.0e-3 * np.exp(0.3 * pat()) * (0.3 + np.cos(phi) ** 2) * np.ones((N_SLOTS, 1, 1))
    c["qtot200"] = 6.0e-5 * np.exp(0.3 * pat()) * (0.3 + np.cos(phi) ** 2) * np.ones((N_SLOTS, 1, 1))
    c["evap"] = np.clip((2.0 + 1.0 * lsm * (0.5 + 0.3 * pat())) * (1.0 + 0.25 * hemi * season), 0.1, None)
    esr_clim = np.clip(0.6 + 0.15 * pat() - 0.1 * lsm * hemi * season, 0.15, 0.95)
    c["pevap"] = c["evap"] / esr_clim
    raw_precip = np.clip((3.0 + 1.5 * pat()) * (1.0 + 0.4 * hemi * season), 0.2, None)
    # close the climatological budget: <P> = <E> each slot (steady column water)
    w = grid.area_weights
    c["precip"] = raw_precip * (_global_mean(c["evap"], w) / _global_mean(raw_precip, w))[:, None, None]
    c["ssr"] = np.clip(180.0 + 80.0 * np.cos(phi) + 10.0 * pat() + 90.0 * hemi * season, 5.0, None)
    c["wind10"] = np.clip(5.0 + 1.5 * pat() + 1.0 * hemi * season, 0.5, None)
    c["gust"] = c["wind10"] * 1.6 + 1.0
    for name, amp, base in (("ndvi", 0.15, 0.45), ("evi", 0.1, 0.3), ("lai", 1.0, 2.5), ("fpar", 0.15, 0.5)):
        c[name] = np.clip(base + 0.3 * base * pat() + amp * hemi * season, 0.01, None) * lsm
    for i, name in enumerate(SOIL_LAYERS):
        c[name] = (0.25 + 0.02 * i + 0.03 * pat() + 0.004 * hemi * season) * lsm
    for name in c:
        c[name] = _leap_average(np.broadcast_to(c[name], (N_SLOTS,) + grid.shape).copy())
    p_dry = 98000.0 + 1500.0 * pat() * (1 - lsm) - 3000.0 * lsm * (1 + 0.5 * pat())
    return c, static, p_dry


def synth_generate(cfg: SynthConfig, root, catalog=DEFAULT_CATALOG) -> Archive:
    """Write a raw synthetic archive under ``root`` and return it."""
    years = tuple(sorted(cfg.years))
    grid = GridSpec.regular(cfg.n_lat * cfg.fine_factor, cfg.n_lon * cfg.fine_factor)
    rng = np.random.default_rng(cfg.seed)
    clim, static, p_dry = synth_climatology(grid, rng)
    dates = year_dates(years)
    slots = np.array([doy_slot(d) for d in dates])
    n = len(dates)
    noise = _Noise(rng, grid, n, cfg)
    w = grid.area_weights
    lsm = static["lsm"]
    year_of = np.array([d.year for d in dates])

    fields = {}
    for name in ("t2m", "u500", "u200", "v500", "v200", "z500", "z200", "ssr", "wind10"):
        scale = {"t2m": 1.5, "u500": 3.0, "u200": 5.0, "v500": 3.0, "v200": 4.0, "z500": GRAVITY * 25.0, "z200": GRAVITY * 35.0, "ssr": 25.0, "wind10": 1.0}[name]
        fields[name] = clim[name][slots] + noise.field(scale)
    fields["ssr"] = np.clip(fields["ssr"], 0.0, None)
    fields["wind10"] = np.clip(fields["wind10"], 0.1, None)
    fields["gust"] = clim["gust"][slots] + 1.6 * (fields["wind10"] - clim["wind10"][slots]) + np.abs(noise.field(0.8))
    fields["d2m"] = np.minimum(clim["d2m"][slots] + noise.field(1.2) + (fields["t2m"] - clim["t2m"][slots]), fields["t2m"])
    for name, rel in (("qtot500", 0.15), ("qtot200", 0.2)):
        fields[name] = clim[name][slots] * np.exp(noise.field(rel))

    # soil moisture: year offsets dominate, small persistent day-to-day noise
    ia_modes = np.stack([smooth_pattern(rng, grid.lat, grid.lon) for _ in range(cfg.n_modes)])
    for i, name in enumerate(SOIL_LAYERS):
        coef = rng.normal(size=(len(years), cfg.n_modes))
        offsets = np.tensordot(coef, ia_modes, axes=(1, 0)) / np.sqrt(cfg.n_modes) * (0.04 * cfg.interannual_scale)
        year_pos = np.searchsorted(years, year_of)
        fields[name] = (clim[name][slots] + offsets[year_pos] + noise.field(0.0008)) * lsm

    pet = clim["pevap"][slots] * np.exp(noise.field(0.08))
    evap = np.minimum(clim["evap"][slots] * np.exp(noise.field(0.1)), 0.98 * pet)
    precip_shape = clim["precip"][slots] * np.exp(noise.field(0.5))

    for ev in cfg.events:
        mask = ev.mask(grid) & (lsm > 0)
        prof = ev.intensity(dates)[:, None, None] * mask[None]
        in_year = (year_of == ev.year)[:, None, None]
        for name in SOIL_LAYERS:
            # start the event year from the median of the other years' offsets
            others = np.array([fields[name][year_of == y].mean(axis=0) for y in years if y != ev.year])
            target = np.median(others, axis=0) if len(others) else fields[name][in_year[:, 0, 0]].mean(axis=0)
            shift = (target - fields[name][in_year[:, 0, 0]].mean(axis=0)) * mask
            fields[name] = fields[name] + in_year * shift[None] - ev.depth * prof
            fields[name] = np.where(lsm > 0, np.clip(fields[name], 0.01, None), 0.0)
        evap = evap * (1.0 - ev.et_cut * prof)
        precip_shape = precip_shape * (1.0 - ev.precip_cut * prof)
    fields["evap"] = evap
    fields["pevap"] = pet

    # column water and the daily global budget: <P> = <E> - <dM/dt>
    m_w = sum(fields[q] * (dp / GRAVITY) for q, dp in LEVEL_THICKNESS.items())
    dm = np.zeros(n)
    dm[1:] = _global_mean(m_w[1:] - m_w[:-1], w)
    p_clim = clim["precip"][slots]
    anom = _global_mean(evap - clim["evap"][slots], w) - dm - _global_mean(precip_shape - p_clim, w)
    r = 1.0 + anom / _global_mean(precip_shape, w)
    fields["precip"] = precip_shape * np.clip(r, 0.0, None)[:, None, None]

    sp_noise = noise.field(150.0)
    sp_noise -= _global_mean(sp_noise, w)[:, None, None]
    fields["sp"] = p_dry[None] + GRAVITY * m_w + sp_noise

    for name in SPARSE_VARIABLES:
        full = np.clip(clim[name][slots] + noise.field(0.03 if name != "lai" else 0.2) * lsm, 0.0, None) * lsm
        observed = np.array([(d - dt.date(d.year, 1, 1)).days % cfg.vegetation_cadence == 0 for d in dates])
        full[~observed] = np.nan
        fields[name] = full

    arc = Archive.create(root, grid, {"generator": "synth", "config": _config_dict(cfg)}, overwrite=True)
    for v in catalog.variables:
        if v.name not in fields:
            continue
        for y in years:
            arc.write_field(v.name, y, fields[v.name][year_of == y], role=v.role.value, units=v.units, source="synthetic")
    for name, f in static.items():
        arc.write_static(name, f, units=catalog[name].units, source="synthetic")
    for name in ("enso", "iod"):
        series = ar1_series(rng, n, 1, cfg.ar_coef)[:, 0] * cfg.noise_scale
        arc.write_index(name, dates, series)
    return arc


def _config_dict(cfg: SynthConfig):
    d = dict(cfg.__dict__)
    d["years"] = list(cfg.years)
    d["events"] = [dict(e.__dict__) for e in cfg.events]
    return d


def synth_noise_archive(root, n_lat=16, n_lon=32, years=(2001, 2002, 2003), sigma=1.0, seed=0, catalog=DEFAULT_CATALOG) -> Archive:
    """Climatology plus independent Gaussian noise of std ``sigma`` in every gridded variable.

    No budgets, clipping or observation gaps: a reference archive whose
    climatology-forecast error is known in closed form.
    """
    years = tuple(sorted(years))
    grid = GridSpec.regular(n_lat, n_lon)
    rng = np.random.default_rng(seed)
    clim, static, p_dry = synth_climatology(grid, rng)
    clim["sp"] = p_dry[None] + sum(clim[q] * dp for q, dp in LEVEL_THICKNESS.items())
    dates = year_dates(years)
    slots = np.array([doy_slot(d) for d in dates])
    year_of = np.array([d.year for d in dates])
    arc = Archive.create(root, grid, {"generator": "synth_noise", "sigma": sigma, "seed": seed, "years": list(years)}, overwrite=True)
    for v in catalog.variables:
        if v.name not in clim:
            continue
        series = clim[v.name][slots] + sigma * rng.standard_normal((len(dates),) + grid.shape)
        for y in years:
            arc.write_field(v.name, y, series[year_of == y], role=v.role.value, units=v.units, source="synthetic")
    for name, f in static.items():
        arc.write_static(name, f, units=catalog[name].units, source="synthetic")
    for name in ("enso", "iod"):
        arc.write_index(name, dates, rng.standard_normal(len(dates)))
    return arc

