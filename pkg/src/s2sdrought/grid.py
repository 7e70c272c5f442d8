"""Regular latitude-longitude grids and calendar helpers."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Regular lat-lon raster; ``lat``/``lon`` are cell-centre degrees."""

    lat: np.ndarray
    lon: np.ndarray
    row_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if lat.ndim != 1 or lon.ndim != 1 or lat.size < 1 or lon.size < 1:
            raise ValueError("lat and lon must be non-empty vectors")
        if lat.size > 2 and not np.allclose(np.diff(lat), lat[1] - lat[0]):
            raise ValueError("latitudes must be uniformly spaced")
        w = np.cos(np.deg2rad(lat))
        if np.any(w <= 0):
            # poles sit at cos = 0; keep them in the weighted means at a tiny share
            w = np.maximum(w, 1e-12)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "row_weights", w / w.mean())

    @classmethod
    def regular(cls, n_lat: int, n_lon: int) -> "GridSpec":
        """Global grid of cell centres, e.g. ``regular(180, 360)`` for 1 degree."""
        dlat, dlon = 180.0 / n_lat, 360.0 / n_lon
        lat = -90.0 + dlat * (np.arange(n_lat) + 0.5)
        lon = -180.0 + dlon * (np.arange(n_lon) + 0.5)
        return cls(lat, lon)

    @property
    def shape(self):
        return (self.lat.size, self.lon.size)

    @property
    def n_lat(self) -> int:
        return self.lat.size

    @property
    def n_lon(self) -> int:
        return self.lon.size

    @property
    def area_weights(self) -> np.ndarray:
        """``[n_lat, n_lon]`` cos-latitude weights with unit mean."""
        return np.repeat(self.row_weights[:, None], self.n_lon, axis=1)

    def to_dict(self):
        return {"lat": self.lat.tolist(), "lon": self.lon.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(np.array(d["lat"]), np.array(d["lon"]))

    def __eq__(self, other):
        return (
            isinstance(other, GridSpec)
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
        )

    def __hash__(self):
        return hash((self.lat.tobytes(), self.lon.tobytes()))


def weighted_mean(field, weights, axes=(-2, -1)):
    """Area-weighted mean over the spatial axes, ignoring NaNs."""
    field = np.asarray(field, dtype=np.float64)
    w = np.broadcast_to(weights, field.shape)
    ok = np.isfinite(field)
    num = np.where(ok, field * w, 0.0).sum(axis=axes)
    den = np.where(ok, w, 0.0).sum(axis=axes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den


# -- calendar -------------------------------------------------------------------

N_SLOTS = 366
LEAP_SLOT = 59  # Feb 29 in the leap-year day-of-year numbering (0-based)


def is_leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def doy_slot(date) -> int:
    """0-based day-of-year in a 366-slot calendar; non-leap years skip Feb 29."""
    date = as_date(date)
    doy = date.timetuple().tm_yday - 1
    if not is_leap(date.year) and doy >= LEAP_SLOT:
        doy += 1
    return doy


def as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    if isinstance(value, np.datetime64):
        return dt.date.fromisoformat(str(value.astype("datetime64[D]")))
    return dt.date.fromisoformat(str(value))


def date_range(start, stop):
    """Inclusive daily range as a list of ``datetime.date``."""
    start, stop = as_date(start), as_date(stop)
    n = (stop - start).days + 1
    return [start + dt.timedelta(days=i) for i in range(n)]


def year_dates(years):
    out = []
    for y in sorted(years):
        out += date_range(dt.date(y, 1, 1), dt.date(y, 12, 31))
    return out
