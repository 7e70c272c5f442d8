import datetime as dt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2sdrought.archive import Archive, ArchiveError
from s2sdrought.catalog import DEFAULT_CATALOG, Role
from s2sdrought.grid import GridSpec, as_date, date_range, doy_slot
from s2sdrought.preprocess import (
    ClimatologyTable,
    DailyData,
    DatasetSplit,
    NormStats,
    assemble_input,
    build_climatology,
    build_cyclic_forcing,
    coarsen_4x,
    denormalize,
    disassemble,
    field_stats,
    gap_fill_forward,
    normalize,
    running_accumulation_30,
)
from s2sdrought.synth import SynthConfig, synth_generate


def days(start, n):
    s = as_date(start)
    return [s + dt.timedelta(days=i) for i in range(n)]


# -- grid and catalog -----------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 1), (8, 16), (181, 360), (7, 3)])
def test_area_weights_have_unit_mean(shape):
    w = GridSpec.regular(*shape).area_weights
    assert w.shape == shape and np.all(w > 0)
    assert abs(w.mean() - 1.0) < 1e-12


def test_day_of_year_slots():
    assert doy_slot("2001-02-28") == 58 and doy_slot("2001-03-01") == 60
    assert doy_slot("2004-02-29") == 59 and doy_slot("2004-12-31") == 365
    assert doy_slot("2003-12-31") == 365


def test_catalog_layout():
    c = DEFAULT_CATALOG
    assert c.n_inputs == 25 and c.n_outputs == 23 and c.n_prognostic == 14
    order = [Role.PROGNOSTIC, Role.DYNAMIC_FORCING, Role.CYCLIC_FORCING, Role.STATIC]
    roles = [v.role for v in c.inputs]
    assert roles == sorted(roles, key=order.index)
    assert [v.role for v in c.outputs[14:]] == [Role.DIAGNOSTIC] * 9
    assert list(c.input_index.values()) == list(range(25))
    assert list(c.output_index.values()) == list(range(23))
    nonneg = {v.name for v in c.outputs if v.nonneg}
    assert {"precip", "evap", "pevap", "sm1", "sm4", "ndvi"} <= nonneg and "t2m" not in nonneg


# -- series operations ---------------------------------------------------------------------


def test_gap_fill_examples():
    s = np.full(12, np.nan)
    s[1], s[9] = 10.0, 12.0
    out = gap_fill_forward(s)
    assert out[5] == 10.0 and out[9] == 12.0 and np.isnan(out[0])
    with pytest.raises(ValueError):
        gap_fill_forward(np.zeros(0))


@given(st.lists(st.booleans(), min_size=2, max_size=60), st.integers(0, 2**31))
def test_gap_fill_piecewise_constant(observed, seed):
    obs = np.array(observed)
    if not obs.any():
        obs[0] = True
    vals = np.random.default_rng(seed).normal(size=obs.size)
    out = gap_fill_forward(np.where(obs, vals, np.nan))
    first = int(np.argmax(obs))
    assert np.all(np.isnan(out[:first]))
    for t in range(first, obs.size):
        last = max(i for i in range(t + 1) if obs[i])
        assert out[t] == vals[last]


def test_accumulation_examples():
    assert np.allclose(running_accumulation_30(np.full(100, 2.0)), 60.0, rtol=0, atol=1e-12)
    ramp = running_accumulation_30(np.arange(100.0))
    assert np.allclose(ramp[15:85], 30 * np.arange(15.0, 85.0), rtol=0, atol=1e-9)
    with pytest.raises(ValueError):
        running_accumulation_30(np.ones(1))


def test_accumulation_window_oracle(rng):
    x = rng.gamma(2.0, 2.0, size=100)
    got = running_accumulation_30(x)
    for t in range(100):
        num = den = 0.0
        for k in range(-15, 16):
            if 0 <= t + k < 100:
                wk = 0.5 if abs(k) == 15 else 1.0
                num += wk * x[t + k]
                den += wk
        assert abs(got[t] - 30 * num / den) < 1e-12


def test_coarsen_examples(rng):
    lat = np.array([10.0, 10.0, 10.0, 10.0])
    assert coarsen_4x(np.full((4, 4), 2.0), lat)[0, 0] == 2.0
    assert coarsen_4x(np.arange(1.0, 17.0).reshape(4, 4), lat)[0, 0] == 8.5
    fine_lat = np.linspace(-30, 30, 8)
    x = rng.normal(size=(8, 8))
    x[0, 0] = np.nan
    got = coarsen_4x(x, fine_lat)
    w = np.cos(np.deg2rad(fine_lat))
    for i in range(2):
        for j in range(2):
            blk = x[4 * i : 4 * i + 4, 4 * j : 4 * j + 4]
            wb = np.repeat(w[4 * i : 4 * i + 4, None], 4, axis=1)
            ok = np.isfinite(blk)
            assert abs(got[i, j] - (blk[ok] * wb[ok]).sum() / wb[ok].sum()) < 1e-12
    assert np.isnan(coarsen_4x(np.full((4, 4), np.nan), lat)[0, 0])


def test_coarsen_preserves_weighted_mean(rng):
    fine = GridSpec.regular(16, 32)
    x = rng.normal(size=(16, 32))
    coarse = coarsen_4x(x, fine.lat)
    block_w = fine.area_weights.reshape(4, 4, 8, 4).sum(axis=(1, 3))
    fine_mean = (x * fine.area_weights).sum() / fine.area_weights.sum()
    assert abs((coarse * block_w).sum() / block_w.sum() - fine_mean) < 1e-12


# -- climatology -----------------------------------------------------------------------------


def _year_dates(years):
    out = []
    for y in years:
        out += date_range(dt.date(y, 1, 1), dt.date(y, 12, 31))
    return out


def test_constant_and_cycle_climatology():
    dates = _year_dates(range(2001, 2004))
    table = build_climatology(np.full((len(dates), 2, 2), 4.0), dates)
    assert np.all(table.mean == 4.0) and np.all(table.std == 0.0)
    cycle = np.sin(2 * np.pi * np.arange(366) / 366)
    series = cycle[[doy_slot(d) for d in dates]][:, None, None] * np.ones((1, 2, 3))
    table = build_climatology(series, dates)
    keep = np.arange(366) != 59  # no Feb 29 in these years
    assert np.abs(table.mean[keep, 0, 0] - cycle[keep]).max() < 1e-12
    assert table.std.max() < 1e-12


def test_leap_slot_is_neighbour_average(rng):
    dates = _year_dates(range(2001, 2009))
    table = build_climatology(rng.normal(size=(len(dates), 1, 1)), dates)
    assert table.mean[59, 0, 0] == 0.5 * (table.mean[58, 0, 0] + table.mean[60, 0, 0])


def test_pooled_std_of_unit_noise():
    dates = _year_dates(range(2001, 2025))
    slots = np.array([doy_slot(d) for d in dates])
    r = np.random.default_rng(7)
    cycle = 3 * np.cos(2 * np.pi * np.arange(366) / 366)
    series = cycle[slots][:, None, None] + r.normal(size=(len(dates), 3, 3))
    table = build_climatology(series, dates, halfwidth=15)
    per_cell = np.sqrt((table.std**2).mean(axis=0))
    assert np.all(np.abs(per_cell - 1) < 0.05)
    # direct recomputation for a few slots, wrapping around the year end
    for slot in (0, 59, 200, 365):
        near = [(slot + k) % 366 for k in range(-15, 16)]
        anoms = []
        for s in near:
            rows = series[slots == s]
            if len(rows):
                anoms.append(rows - rows.mean(axis=0) if s != 59 else rows - table.mean[59])
        a = np.concatenate(anoms)
        assert np.allclose(table.std[slot], np.sqrt((a**2).mean(axis=0)), rtol=1e-12)


def test_climatology_of_climatology_is_itself(rng):
    dates = _year_dates(range(2001, 2007))
    series = rng.normal(size=(len(dates), 2, 2))
    mean = build_cyclic_forcing(series, dates)
    again = build_cyclic_forcing(mean[[doy_slot(d) for d in dates]], dates)
    assert np.abs(again - mean).max() < 1e-12


# -- normalisation and assembly ----------------------------------------------------------------


def test_normalize_round_trip(rng):
    names = ["t2m", "lsm", "precip"]
    stats = NormStats({"t2m": 280.0, "lsm": 0.0, "precip": 2.0}, {"t2m": 10.0, "lsm": 1.0, "precip": 3.0}, frozenset({"lsm"}))
    x = rng.normal(size=(2, 3, 4, 5)) * 5 + 1
    assert np.abs(denormalize(normalize(x, stats, names), stats, names) - x).max() < 1e-12
    at_mean = np.stack([np.full((4, 5), 280.0), np.ones((4, 5)), np.full((4, 5), 2.0)])
    z = normalize(at_mean, stats, names)
    assert np.all(z[0] == 0) and np.all(z[2] == 0) and np.all(z[1] == 1.0)  # mask passes through


def test_split_rules():
    default = DatasetSplit()
    assert default.all_years == tuple(range(2001, 2025))
    with pytest.raises(ValueError):
        DatasetSplit(train=(2001, 2002), val=(2002,), test=())


def test_stored_stats_match_independent_pass(small_archive):
    stats = NormStats.from_dict(small_archive.read_meta("norm_stats"))
    assert stats.years == tuple(range(2001, 2006))
    for name in ("t2m", "precip", "sm2", "ndvi"):
        parts = [small_archive.read_field(name, y) for y in range(2001, 2006)]
        v = np.concatenate(parts).ravel()
        v = v[np.isfinite(v)]
        assert stats.mean[name] == pytest.approx(v.mean(), rel=1e-12)
        assert stats.std[name] == pytest.approx(v.std(), rel=1e-10)
    assert "lsm" in stats.passthrough
    assert field_stats(np.full(5, 3.0)) == (3.0, 1.0)


def test_assembly_order_and_round_trip(small_archive):
    data = DailyData(small_archive, (2006,))
    d = dt.date(2006, 5, 17)
    stack = data.input_stack(d)
    assert stack.shape == (25,) + small_archive.grid.shape
    parts = disassemble(stack, data.input_names)
    assert np.array_equal(parts["t2m"], data.fields["t2m"][data.date_index[d]])
    assert np.array_equal(parts["lsm"], data.static["lsm"])
    assert np.array_equal(parts["ssr_clim"], data.cycles["ssr_clim"][doy_slot(d)])
    enso = {d: 1.5}
    forced = assemble_input(data, d, climate_indices={"enso": enso, "iod": data.indices["iod"]})
    assert np.all(forced[DEFAULT_CATALOG.input_index["enso"]] == 1.5)
    with pytest.raises(ArchiveError):
        data.input_stack(dt.date(2009, 1, 1))
    with pytest.raises(ValueError):
        disassemble(stack, data.input_names[:-1])


def test_split_recorded_in_provenance(small_archive):
    split = DatasetSplit.from_dict(small_archive.read_meta("split"))
    assert split.train == tuple(range(2001, 2006)) and split.test == (2007,)
    clim = ClimatologyTable.load(small_archive, "t2m")
    assert clim.years == split.train and clim.mean.shape == (366, 8, 16)


# -- synthetic generator ----------------------------------------------------------------------


def test_synth_is_deterministic(tmp_path):
    cfg = SynthConfig(n_lat=4, n_lon=8, years=(2001,), seed=5)
    a = synth_generate(cfg, tmp_path / "a")
    b = synth_generate(cfg, tmp_path / "b")
    assert a.digest() == b.digest()
    c = synth_generate(SynthConfig(n_lat=4, n_lon=8, years=(2001,), seed=6), tmp_path / "c")
    assert c.digest() != a.digest()


def test_zero_noise_archive_is_its_own_climatology(tmp_path):
    cfg = SynthConfig(n_lat=4, n_lon=8, years=(2001, 2002, 2004), noise_scale=0.0, interannual_scale=0.0)
    raw = synth_generate(cfg, tmp_path / "raw")
    for name in ("t2m", "sp", "qtot500", "sm1", "precip"):
        series, dates = raw.read_series(name, (2001, 2002, 2004))
        table = build_climatology(series, dates)
        scale = np.nanmax(np.abs(series))
        # payloads are float32, so equality holds to single precision
        assert np.nanmax(table.std) <= 1e-6 * scale
        assert np.nanmax(np.abs(series - table.means_for(dates))) <= 1e-6 * scale


def test_archive_rejects_corruption(tmp_path):
    arc = Archive.create(tmp_path / "a", GridSpec.regular(2, 3))
    arc.write_field("t2m", 2001, np.ones((4, 2, 3)), start=dt.date(2001, 1, 1))
    assert np.array_equal(arc.read_field("t2m", 2001), np.ones((4, 2, 3)))
    payload = next((tmp_path / "a").rglob("*.f32"))
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(ArchiveError):
        arc.read_field("t2m", 2001)
    with pytest.raises(ArchiveError):
        Archive.create(tmp_path / "a", GridSpec.regular(2, 3))
