"""Post-prediction corrections: non-negativity, global moisture and dry-air-mass budgets.

All corrections are written with differentiable tensor ops so they can sit
inside the training graph.  States are ``[B, C, H, W]`` (or ``[C, H, W]``)
stacks in physical units, in either the input or the output channel layout
of the catalog; the layout is recognised from the channel count.  Budgets
are closed per sample over the area-weighted global mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .catalog import DEFAULT_CATALOG, VariableCatalog
from .tensor import Tensor, as_tensor, clip, make_result, mul, relu, reshape, tsum, where

GRAVITY = 9.80665  # m s-2
# pressure thickness represented by each humidity level, in Pa
LEVEL_THICKNESS = {"qtot500": 40000.0, "qtot200": 25000.0}
R_MAX = 10.0


@dataclass
class ConstraintToggles:
    clamp: bool = True
    moisture: bool = True
    dry_mass: bool = True

    @classmethod
    def all_off(cls):
        return cls(False, False, False)


@dataclass
class BudgetReport:
    """Diagnostics of one conservation correction, one entry per sample."""

    kind: str
    pre_residual: np.ndarray
    post_residual: np.ndarray
    scale_applied: np.ndarray
    offset_applied: np.ndarray
    field_scale: np.ndarray
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def relative_post(self) -> np.ndarray:
        return np.abs(self.post_residual) / np.maximum(self.field_scale, 1e-300)

    def to_json(self) -> str:
        d = {
            "kind": self.kind,
            "pre_residual": np.atleast_1d(self.pre_residual).tolist(),
            "post_residual": np.atleast_1d(self.post_residual).tolist(),
            "scale_applied": np.atleast_1d(self.scale_applied).tolist(),
            "offset_applied": np.atleast_1d(self.offset_applied).tolist(),
            "flagged": np.atleast_1d(self.flagged).astype(bool).tolist(),
        }
        return json.dumps(d)


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W] state, got {x.shape}")
    return x, False


def _index(catalog: VariableCatalog, n_channels: int):
    if n_channels == catalog.n_outputs:
        return catalog.output_index
    if n_channels == catalog.n_inputs:
        return catalog.input_index
    raise ValueError(f"state has {n_channels} channels; catalog layouts have {catalog.n_inputs} or {catalog.n_outputs}")


def _channel(x: Tensor, index, name) -> Tensor:
    return x[:, index[name]]


def _global_mean(f: Tensor, weights: np.ndarray) -> Tensor:
    """Area-weighted mean of ``f[B, H, W]`` per sample."""
    w = np.asarray(weights, dtype=np.float64)
    return tsum(mul(f, w / w.sum()), axis=(1, 2))


def _replace_channel(x: Tensor, c: int, new: Tensor) -> Tensor:
    """``x`` with channel ``c`` replaced by ``new[B, H, W]``."""
    onehot = np.zeros((1, x.shape[1], 1, 1))
    onehot[0, c] = 1.0
    delta = reshape(new - x[:, c], (x.shape[0], 1) + x.shape[2:])
    return x + mul(delta, onehot)


def column_moisture(state, catalog: VariableCatalog = DEFAULT_CATALOG) -> Tensor:
    """Vertically integrated total water ``[B, H, W]`` in kg m-2."""
    x, _ = _batched(state)
    idx = _index(catalog, x.shape[1])
    total = None
    for name, dp in LEVEL_THICKNESS.items():
        term = _channel(x, idx, name) * (dp / GRAVITY)
        total = term if total is None else total + term
    return total


def dry_pressure(state, catalog: VariableCatalog = DEFAULT_CATALOG) -> Tensor:
    """Dry-air surface pressure proxy ``sp - g * M_w`` in Pa."""
    x, _ = _batched(state)
    idx = _index(catalog, x.shape[1])
    return _channel(x, idx, "sp") - column_moisture(x, catalog) * GRAVITY


def clamp_nonnegative(state, catalog: VariableCatalog = DEFAULT_CATALOG) -> Tensor:
    """Set negatives to zero in channels the catalog marks non-negative."""
    x, squeeze = _batched(state)
    layout = catalog.outputs if x.shape[1] == catalog.n_outputs else catalog.inputs
    _index(catalog, x.shape[1])
    mask = np.array([v.nonneg for v in layout], dtype=np.float64).reshape(1, -1, 1, 1)
    out = x + mul(relu(-x), mask)
    return reshape(out, out.shape[1:]) if squeeze else out


def moisture_residual(prev, pred, weights, catalog=DEFAULT_CATALOG, dt: float = 1.0) -> np.ndarray:
    """``<dM_w/dt - E + P>`` per sample, in mm per day."""
    p, _ = _batched(prev)
    q, _ = _batched(pred)
    idx = _index(catalog, q.shape[1])
    dm = column_moisture(q, catalog).data - column_moisture(p, catalog).data
    f = dm / dt - q.data[:, idx["evap"]] + q.data[:, idx["precip"]]
    w = np.asarray(weights) / np.sum(weights)
    return (f * w).sum(axis=(1, 2))


def conserve_moisture(prev, pred, area_weights, dt: float = 1.0, catalog: VariableCatalog = DEFAULT_CATALOG, r_max: float = R_MAX):
    """Rescale precipitation globally so the column water budget closes.

    ``r = (<E> - <dM_w>/dt) / <P>`` clamped to ``[0, r_max]``; a zero mean
    precipitation leaves the state untouched (flagged when a sink is needed).
    """
    p, _ = _batched(prev)
    q, squeeze = _batched(pred)
    idx = _index(catalog, q.shape[1])
    w = np.asarray(area_weights, dtype=np.float64)
    precip = _channel(q, idx, "precip")
    e_mean = _global_mean(_channel(q, idx, "evap"), w)
    p_mean = _global_mean(precip, w)
    dm_mean = _global_mean(column_moisture(q, catalog) - column_moisture(p, catalog), w)
    need = e_mean - dm_mean * (1.0 / dt)

    pd, nd = p_mean.data, need.data
    has_rain = pd > 0
    raw = np.where(has_rain, nd / np.where(has_rain, pd, 1.0), 1.0)
    r = need / where(has_rain, p_mean, 1.0)
    r = where(has_rain, clip(r, 0.0, r_max), 1.0)
    new_precip = precip * reshape(r, (-1, 1, 1))
    out = _replace_channel(q, idx["precip"], new_precip)

    scale = np.maximum.reduce([np.abs(e_mean.data), np.abs(pd), np.abs(dm_mean.data) / dt])
    flagged = (has_rain & ((raw < 0) | (raw > r_max))) | (~has_rain & (np.abs(nd) > 1e-12 * np.maximum(scale, 1.0)))
    report = BudgetReport(
        kind="moisture",
        pre_residual=_squeeze(dm_mean.data / dt - e_mean.data + pd, squeeze),
        post_residual=_squeeze(dm_mean.data / dt - e_mean.data + r.data * pd, squeeze),
        scale_applied=_squeeze(r.data.copy(), squeeze),
        offset_applied=_squeeze(np.zeros_like(pd), squeeze),
        field_scale=_squeeze(scale, squeeze),
        flagged=_squeeze(flagged, squeeze),
    )
    return (reshape(out, out.shape[1:]) if squeeze else out), report


def conserve_dry_mass(prev, pred, area_weights, catalog: VariableCatalog = DEFAULT_CATALOG):
    """Shift surface pressure uniformly so the global mean dry pressure is conserved."""
    p, _ = _batched(prev)
    q, squeeze = _batched(pred)
    idx = _index(catalog, q.shape[1])
    w = np.asarray(area_weights, dtype=np.float64)
    prev_dry = _global_mean(dry_pressure(p, catalog), w)
    pred_dry = _global_mean(dry_pressure(q, catalog), w)
    delta = prev_dry - pred_dry
    new_sp = _channel(q, idx, "sp") + reshape(delta, (-1, 1, 1))
    out = _replace_channel(q, idx["sp"], new_sp)
    post = _global_mean(dry_pressure(out, catalog), w).data - prev_dry.data
    report = BudgetReport(
        kind="dry_mass",
        pre_residual=_squeeze(-delta.data, squeeze),
        post_residual=_squeeze(post, squeeze),
        scale_applied=_squeeze(np.ones_like(delta.data), squeeze),
        offset_applied=_squeeze(delta.data.copy(), squeeze),
        field_scale=_squeeze(np.abs(prev_dry.data), squeeze),
        flagged=_squeeze(np.zeros(delta.shape, dtype=bool), squeeze),
    )
    return (reshape(out, out.shape[1:]) if squeeze else out), report


def apply_constraints(prev, pred, area_weights, toggles: ConstraintToggles | None = None, catalog=DEFAULT_CATALOG, dt: float = 1.0):
    """Clamp, then moisture, then dry mass.  Returns ``(state, {kind: report})``."""
    toggles = toggles or ConstraintToggles()
    out = as_tensor(pred)
    reports = {}
    if toggles.clamp:
        out = clamp_nonnegative(out, catalog)
    if toggles.moisture:
        out, reports["moisture"] = conserve_moisture(prev, out, area_weights, dt, catalog)
    if toggles.dry_mass:
        out, reports["dry_mass"] = conserve_dry_mass(prev, out, area_weights, catalog)
    return out, reports


def _squeeze(a, squeeze):
    a = np.asarray(a)
    return a[0] if squeeze else a
