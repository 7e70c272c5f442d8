"""GRD1 on-disk container for gridded fields, derived tables and climate indices.

Layout under the archive root::

    manifest.json                 grid, catalog digest, provenance
    fields/<var>/<year>.json      header of one variable-year
    fields/<var>/<year>.f32       raw little-endian float32 payload [time, lat, lon]
    static/<var>.json|.f32        time-invariant fields [1, lat, lon]
    tables/<group>/<name>.json|.f32   derived arrays (climatology, cycles, pools)
    indices/<name>.csv            two-column ``date,value`` tables
    meta/<name>.json              structured metadata (normalization stats, ...)

Missing values are NaN in memory and ``fill_value`` on disk.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .grid import GridSpec, as_date, date_range

FORMAT = "GRD1"
FILL_VALUE = -9999.0
_DTYPE = np.dtype("<f4")


class ArchiveError(Exception):
    """Raised for missing or malformed archive content."""


def _atomic_write_bytes(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _write_json(path: Path, obj):
    _atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _read_json(path: Path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ArchiveError(f"missing archive file {path}") from exc
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"malformed header {path}: {exc}") from exc


def write_grid_file(header_path: Path, data: np.ndarray, header: dict):
    """Write one header/payload pair; ``data`` is any float array."""
    arr = np.asarray(data, dtype=np.float64)
    out = np.where(np.isfinite(arr), arr, FILL_VALUE).astype(_DTYPE)
    payload_path = header_path.with_suffix(".f32")
    header = dict(header)
    header.update(
        format=FORMAT,
        shape=list(arr.shape),
        fill_value=FILL_VALUE,
        byte_order="little",
        dtype="float32",
        payload=payload_path.name,
    )
    _atomic_write_bytes(payload_path, out.tobytes(order="C"))
    _write_json(header_path, header)


def read_grid_file(header_path: Path):
    header = _read_json(header_path)
    if header.get("format") != FORMAT:
        raise ArchiveError(f"{header_path} is not a {FORMAT} header")
    if header.get("byte_order") != "little" or header.get("dtype") != "float32":
        raise ArchiveError(f"{header_path}: unsupported encoding")
    shape = tuple(header["shape"])
    payload_path = header_path.with_name(header["payload"])
    try:
        raw = np.fromfile(payload_path, dtype=_DTYPE)
    except FileNotFoundError as exc:
        raise ArchiveError(f"missing payload {payload_path}") from exc
    if raw.size != int(np.prod(shape)):
        raise ArchiveError(f"{payload_path}: expected {int(np.prod(shape))} values, found {raw.size}")
    arr = raw.reshape(shape).astype(np.float64)
    arr[arr == np.float32(header["fill_value"])] = np.nan
    return arr, header


class Archive:
    """Read/write access to one GRD1 archive directory."""

    def __init__(self, root):
        self.root = Path(root)
        self._manifest = None

    # -- manifest -------------------------------------------------------------------

    @classmethod
    def create(cls, root, grid: GridSpec, provenance: dict | None = None, overwrite: bool = False) -> "Archive":
        root = Path(root)
        if (root / "manifest.json").exists() and not overwrite:
            raise ArchiveError(f"archive already exists at {root}")
        root.mkdir(parents=True, exist_ok=True)
        arc = cls(root)
        arc._manifest = {"format": FORMAT, "grid": grid.to_dict(), "provenance": provenance or {}}
        arc._save_manifest()
        return arc

    def _save_manifest(self):
        _write_json(self.root / "manifest.json", self._manifest)

    @property
    def manifest(self) -> dict:
        if self._manifest is None:
            m = _read_json(self.root / "manifest.json")
            if m.get("format") != FORMAT:
                raise ArchiveError(f"{self.root} is not a {FORMAT} archive")
            self._manifest = m
        return self._manifest

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_dict(self.manifest["grid"])

    @property
    def provenance(self) -> dict:
        return self.manifest.get("provenance", {})

    def update_provenance(self, **items):
        self.manifest["provenance"].update(items)
        self._save_manifest()

    # -- daily fields ------------------------------------------------------------------

    def _field_header(self, name, year) -> Path:
        return self.root / "fields" / name / f"{int(year)}.json"

    def write_field(self, name, year, data, role="", units="", source="", start=None):
        grid = self.grid
        data = np.asarray(data)
        if data.ndim != 3 or data.shape[1:] != grid.shape:
            raise ArchiveError(f"{name}/{year}: expected [time, {grid.shape[0]}, {grid.shape[1]}], got {data.shape}")
        start = as_date(start or dt.date(int(year), 1, 1))
        header = dict(
            name=name,
            units=units,
            role=role,
            dims=["time", "lat", "lon"],
            lat=grid.lat.tolist(),
            lon=grid.lon.tolist(),
            source=source,
            start_date=start.isoformat(),
        )
        write_grid_file(self._field_header(name, year), data, header)

    def read_field(self, name, year):
        arr, header = read_grid_file(self._field_header(name, year))
        return arr

    def field_header(self, name, year) -> dict:
        return _read_json(self._field_header(name, year))

    def field_names(self):
        d = self.root / "fields"
        return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.exists() else []

    def field_years(self, name):
        d = self.root / "fields" / name
        if not d.exists():
            return []
        return sorted(int(p.stem) for p in d.glob("*.json"))

    def read_series(self, name, years):
        """Concatenated daily data ``[T, lat, lon]`` for ``years`` and the matching dates."""
        parts, dates = [], []
        for y in sorted(years):
            arr = self.read_field(name, y)
            start = as_date(self.field_header(name, y)["start_date"])
            parts.append(arr)
            dates += date_range(start, start + dt.timedelta(days=arr.shape[0] - 1))
        if not parts:
            raise ArchiveError(f"no years requested for {name}")
        return np.concatenate(parts, axis=0), dates

    # -- static fields ------------------------------------------------------------------

    def write_static(self, name, data, role="static", units="", source=""):
        grid = self.grid
        data = np.asarray(data, dtype=np.float64)
        if data.shape != grid.shape:
            raise ArchiveError(f"static {name}: expected {grid.shape}, got {data.shape}")
        header = dict(name=name, units=units, role=role, dims=["time", "lat", "lon"], lat=grid.lat.tolist(), lon=grid.lon.tolist(), source=source)
        write_grid_file(self.root / "static" / f"{name}.json", data[None], header)

    def read_static(self, name):
        arr, _ = read_grid_file(self.root / "static" / f"{name}.json")
        return arr[0]

    def static_names(self):
        d = self.root / "static"
        return sorted(p.stem for p in d.glob("*.json")) if d.exists() else []

    # -- derived arrays --------------------------------------------------------------

    def write_table(self, group, name, data, **meta):
        header = dict(meta, name=name, group=group)
        write_grid_file(self.root / "tables" / group / f"{name}.json", data, header)

    def read_table(self, group, name):
        arr, _ = read_grid_file(self.root / "tables" / group / f"{name}.json")
        return arr

    def table_header(self, group, name) -> dict:
        return _read_json(self.root / "tables" / group / f"{name}.json")

    def has_table(self, group, name) -> bool:
        return (self.root / "tables" / group / f"{name}.json").exists()

    def table_names(self, group):
        d = self.root / "tables" / group
        return sorted(p.stem for p in d.glob("*.json")) if d.exists() else []

    def write_meta(self, name, obj):
        _write_json(self.root / "meta" / f"{name}.json", obj)

    def read_meta(self, name):
        return _read_json(self.root / "meta" / f"{name}.json")

    def has_meta(self, name) -> bool:
        return (self.root / "meta" / f"{name}.json").exists()

    # -- scalar index tables -----------------------------------------------------------

    def write_index(self, name, dates, values):
        path = self.root / "indices" / f"{name}.csv"
        lines = ["date,value"] + [f"{as_date(d).isoformat()},{float(v)!r}" for d, v in zip(dates, values)]
        _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())

    def read_index(self, name) -> dict:
        return read_index_table(self.root / "indices" / f"{name}.csv")

    def index_names(self):
        d = self.root / "indices"
        return sorted(p.stem for p in d.glob("*.csv")) if d.exists() else []

    # -- integrity ----------------------------------------------------------------------

    def digest(self) -> str:
        """SHA-256 over every file in the archive, in sorted path order."""
        h = hashlib.sha256()
        for path in sorted(p for p in self.root.rglob("*") if p.is_file()):
            h.update(str(path.relative_to(self.root)).encode())
            h.update(path.read_bytes())
        return h.hexdigest()


def read_index_table(path) -> dict:
    """Parse a ``date,value`` table into ``{date: float}``."""
    out = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None or [h.strip().lower() for h in head] != ["date", "value"]:
                raise ArchiveError(f"{path}: expected a 'date,value' header")
            for row in reader:
                if not row:
                    continue
                out[as_date(row[0].strip())] = float(row[1])
    except FileNotFoundError as exc:
        raise ArchiveError(f"missing index table {path}") from exc
    except (ValueError, IndexError) as exc:
        raise ArchiveError(f"{path}: malformed row ({exc})") from exc
    return out
