import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import check_gradients
from physics_oracle import OUT, G, budgets, random_states
from s2sdrought import tensor as T
from s2sdrought.grid import GridSpec
from s2sdrought.physics import (
    ConstraintToggles,
    apply_constraints,
    clamp_nonnegative,
    column_moisture,
    conserve_dry_mass,
    conserve_moisture,
)
from s2sdrought.tensor import Tensor


def blank(n_cells=2):
    s = np.zeros((1, 23, 1, n_cells))
    s[:, OUT["sp"]] = 1e5
    return s


def with_water(state, m_w):
    out = state.copy()
    out[0, OUT["qtot500"], 0] = np.asarray(m_w) * G / 40000.0
    return out


def test_clamp_examples():
    s = blank(1)
    s[0, OUT["precip"]] = -1.0
    s[0, OUT["t2m"]] = -5.0
    out = clamp_nonnegative(Tensor(s)).data
    assert out[0, OUT["precip"], 0, 0] == 0.0
    assert out[0, OUT["t2m"], 0, 0] == -5.0
    pos = np.abs(np.random.default_rng(0).normal(size=(2, 23, 3, 3)))
    assert np.array_equal(clamp_nonnegative(Tensor(pos)).data, pos)


def test_clamp_works_on_input_layout():
    s = np.full((25, 2, 2), -1.0)
    out = clamp_nonnegative(Tensor(s)).data
    assert out[10].max() == 0.0 and out[0].min() == -1.0


def test_two_cell_moisture_budget():
    w = np.ones((1, 2))
    prev = with_water(blank(), [10.0, 10.0])
    pred = with_water(blank(), [10.0, 12.0])
    pred[0, OUT["evap"], 0] = [2.0, 2.0]
    pred[0, OUT["precip"], 0] = [1.0, 3.0]
    out, rep = conserve_moisture(Tensor(prev), Tensor(pred), w)
    assert np.allclose(column_moisture(Tensor(pred)).data, [[[10.0, 12.0]]])
    assert rep.scale_applied[0] == pytest.approx(0.5)
    assert np.allclose(out.data[0, OUT["precip"], 0], [0.5, 1.5], atol=1e-12)
    assert abs(rep.post_residual[0]) < 1e-12 and not rep.flagged[0]


def test_closed_budget_and_zero_precip_are_fixed_points():
    w = np.ones((1, 2))
    prev = with_water(blank(), [10.0, 10.0])
    pred = with_water(blank(), [10.0, 12.0])
    pred[0, OUT["evap"], 0] = [1.0, 1.0]
    out, rep = conserve_moisture(Tensor(prev), Tensor(pred), w)  # E - dM = 0 with no rain
    assert np.array_equal(out.data, pred) and not rep.flagged[0]
    pred[0, OUT["evap"], 0] = [2.0, 2.0]
    pred[0, OUT["precip"], 0] = [1.0, 1.0]
    out, rep = conserve_moisture(Tensor(prev), Tensor(pred), w)
    assert rep.scale_applied[0] == pytest.approx(1.0) and np.allclose(out.data, pred)


def test_moisture_flags_impossible_corrections():
    w = np.ones((1, 2))
    prev = with_water(blank(), [10.0, 10.0])
    pred = with_water(blank(), [10.0, 10.0])
    pred[0, OUT["evap"], 0] = [3.0, 3.0]
    _, rep = conserve_moisture(Tensor(prev), Tensor(pred), w)  # sink needed, no rain to scale
    assert rep.flagged[0]
    pred[0, OUT["precip"], 0] = [0.1, 0.1]
    out, rep = conserve_moisture(Tensor(prev), Tensor(pred), w)  # r = 30 > r_max
    assert rep.flagged[0] and rep.scale_applied[0] == 10.0
    assert np.allclose(out.data[0, OUT["precip"]], 1.0)


def test_two_cell_dry_mass_offset():
    w = np.ones((1, 2))
    prev, pred = blank(), blank()
    prev[0, OUT["sp"], 0] = [1000e2, 1000e2]
    pred[0, OUT["sp"], 0] = [997e2, 999e2]
    out, rep = conserve_dry_mass(Tensor(prev), Tensor(pred), w)
    assert rep.offset_applied[0] == pytest.approx(200.0)
    assert np.allclose(out.data[0, OUT["sp"], 0], [999.0e2, 1001.0e2])
    same, rep = conserve_dry_mass(Tensor(prev), Tensor(prev), w)
    assert rep.offset_applied[0] == 0.0 and np.array_equal(same.data, prev)


def test_constant_grid_correction_is_uniform():
    w = GridSpec.regular(4, 8).area_weights
    prev = np.ones((1, 23, 4, 8)) * 3.0
    prev[:, OUT["sp"]] = 1.01e5
    pred = prev.copy()
    pred[:, OUT["sp"]] = 1.0e5
    out, _ = conserve_dry_mass(Tensor(prev), Tensor(pred), w)
    assert np.allclose(out.data[:, OUT["sp"]], 1.01e5, rtol=0, atol=1e-8)


def test_toggles_compose(rng):
    w = GridSpec.regular(6, 8).area_weights
    prev, pred = random_states(rng)
    off, reps = apply_constraints(prev, pred, w, ConstraintToggles.all_off())
    assert np.array_equal(off.data, pred) and reps == {}
    only_clamp, _ = apply_constraints(prev, pred, w, ConstraintToggles(True, False, False))
    assert np.array_equal(only_clamp.data, clamp_nonnegative(Tensor(pred)).data)
    only_moist, _ = apply_constraints(prev, pred, w, ConstraintToggles(False, True, False))
    assert np.array_equal(only_moist.data, conserve_moisture(prev, pred, w)[0].data)
    only_dry, _ = apply_constraints(prev, pred, w, ConstraintToggles(False, False, True))
    assert np.array_equal(only_dry.data, conserve_dry_mass(prev, pred, w)[0].data)


@given(st.integers(0, 2**31))
def test_constraints_close_budgets_and_are_idempotent(seed):
    r = np.random.default_rng(seed)
    w = GridSpec.regular(6, 8).area_weights
    prev, pred = random_states(r)
    once, reps = apply_constraints(prev, pred, w)
    moist, dry = budgets(prev, once.data, w)
    assert moist.max() < 1e-10 and dry.max() < 1e-10
    assert not reps["moisture"].flagged.any()
    assert np.all(reps["moisture"].relative_post() < 1e-10)
    nonneg = [i for i, v in enumerate(OUT) if v in ("precip", "evap", "pevap", "qtot500", "qtot200")]
    assert once.data[:, nonneg].min() >= 0
    twice, _ = apply_constraints(prev, once.data, w)
    assert np.allclose(twice.data, once.data, rtol=1e-13, atol=0)


@given(st.integers(0, 2**31))
def test_untouched_channels_keep_their_global_means(seed):
    r = np.random.default_rng(seed)
    w = GridSpec.regular(6, 8).area_weights
    prev, pred = random_states(r)
    clamped = clamp_nonnegative(Tensor(pred)).data
    out, _ = apply_constraints(prev, pred, w)
    keep = [i for n, i in OUT.items() if n not in ("precip", "sp")]
    assert np.array_equal(out.data[:, keep], clamped[:, keep])


def test_report_serialises(rng):
    w = GridSpec.regular(6, 8).area_weights
    prev, pred = random_states(rng, batch=2)
    _, reps = apply_constraints(prev, pred, w)
    d = json.loads(reps["dry_mass"].to_json())
    assert d["kind"] == "dry_mass" and len(d["offset_applied"]) == 2


def test_constraint_gradients(rng):
    w = GridSpec.regular(3, 4).area_weights
    prev, pred = random_states(rng, batch=1, h=3, w=4)
    pred[:, OUT["precip"]] = np.abs(pred[:, OUT["precip"]]) + 0.5  # stay off the clamp kink
    weights = rng.normal(size=pred.shape)

    def f(t):
        out, _ = apply_constraints(prev, t, w)
        return T.tsum(out * weights)

    assert check_gradients(f, [pred], coords=80) < 1e-4
