import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s2sdrought.evaluation import (
    ClimatologyEmitter,
    ClimatologyStack,
    PersistenceEmitter,
    RegionMask,
    acc,
    africa_mask,
    anomaly_distribution,
    climatology_forecast,
    dm_statistic,
    dm_test,
    global_mask,
    persistence_forecast,
    read_scorecard,
    rmse,
    rollout,
    rollout_evaluate,
    rpc,
    scorecard_export,
    scorecard_rows,
)
from s2sdrought.grid import GridSpec, doy_slot
from s2sdrought.preprocess import ClimatologyTable, DailyData


def brute_rmse(p, t, w):
    num = den = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if w[i, j] > 0 and np.isfinite(p[i, j]) and np.isfinite(t[i, j]):
                num += w[i, j] * (p[i, j] - t[i, j]) ** 2
                den += w[i, j]
    return math.sqrt(num / den)


def brute_acc(p, t, w):
    cells = [(i, j) for i in range(p.shape[0]) for j in range(p.shape[1]) if w[i, j] > 0]
    total = sum(w[c] for c in cells)
    mp = sum(w[c] * p[c] for c in cells) / total
    mt = sum(w[c] * t[c] for c in cells) / total
    cov = sum(w[c] * (p[c] - mp) * (t[c] - mt) for c in cells)
    vp = sum(w[c] * (p[c] - mp) ** 2 for c in cells)
    vt = sum(w[c] * (t[c] - mt) ** 2 for c in cells)
    return cov / math.sqrt(vp * vt)


def brute_dm(d, h):
    n = len(d)
    mean = sum(d) / n
    gam = [sum((d[t] - mean) * (d[t - k] - mean) for t in range(k, n)) / n for k in range(h)]
    v = gam[0] + 2 * sum(gam[1:])
    if v <= 0:
        v = gam[0]
    return mean / math.sqrt(v / n)


@pytest.fixture
def region(rng):
    grid = GridSpec.regular(6, 8)
    mask = rng.uniform(size=grid.shape) > 0.3
    mask[0, 0] = True
    return RegionMask("r", mask, grid.area_weights)


# -- point metrics -----------------------------------------------------------------------


def test_rmse_examples(region, rng):
    t = rng.normal(size=(6, 8))
    assert rmse(t, t, region) == 0.0
    assert rmse(t + 0.7, t, region) == pytest.approx(0.7, abs=1e-14)
    p = t.copy()
    p[~region.mask] = 1e6  # outside the mask
    assert rmse(p, t, region) == 0.0


def test_metrics_against_brute_force(region):
    r = np.random.default_rng(99)
    w = region.weights
    for _ in range(1000):
        p, t = r.normal(size=(2, 6, 8))
        if r.uniform() < 0.2:
            p[r.integers(6), r.integers(8)] = np.nan
        ok = np.isfinite(p)
        assert abs(rmse(p, t, region) - brute_rmse(p, t, w)) < 1e-12
        assert abs(acc(p, t, region) - brute_acc(p, t, np.where(ok, w, 0))) < 1e-12


def test_acc_examples_and_invariants(region, rng):
    t = rng.normal(size=(6, 8))
    p = rng.normal(size=(6, 8))
    assert acc(2 * t, t, region) == pytest.approx(1.0, abs=1e-14)
    assert acc(-t, t, region) == pytest.approx(-1.0, abs=1e-14)
    assert acc(3.5 * p, t, region) == pytest.approx(acc(p, t, region), abs=1e-14)
    assert acc(-p, t, region) == pytest.approx(-acc(p, t, region), abs=1e-14)
    assert math.isnan(acc(np.ones((6, 8)), t, region))


@given(st.integers(0, 2**31))
def test_rmse_triangle_inequality(seed):
    r = np.random.default_rng(seed)
    grid = GridSpec.regular(4, 5)
    reg = global_mask(grid)
    a, b, c = r.normal(size=(3, 4, 5)) * r.uniform(0.1, 10, size=3)[:, None, None]
    assert rmse(a, c, reg) <= rmse(a, b, reg) + rmse(b, c, reg) + 1e-12


def test_masks():
    grid = GridSpec.regular(18, 36)
    land = np.ones(grid.shape)
    m = africa_mask(grid, land)
    lat = grid.lat[np.nonzero(m.mask)[0]]
    lon = grid.lon[np.nonzero(m.mask)[1]]
    assert lat.min() >= -35 and lat.max() <= 38 and lon.min() >= -18 and lon.max() <= 52
    assert not africa_mask(grid, land * 0.4 + (np.arange(36) % 2 == 0) * 0.2).mask[:, 1::2].any()
    with pytest.raises(ValueError):
        RegionMask("none", np.zeros(grid.shape), grid.area_weights)
    assert global_mask(grid).mask.all()


# -- RPC and DM ---------------------------------------------------------------------------


def _cells(series):
    return np.asarray(series, dtype=float)[:, None, None]


def test_rpc_worked_example():
    one = GridSpec.regular(1, 1).area_weights
    res = rpc(_cells([0.5, -0.5, 1, -1]), _cells([1, -1, 2, -2]), one)
    assert abs(res.mean - math.sqrt(2)) < 1e-12
    t = _cells([0.3, -1.2, 2.0, 0.1, 0.7])
    assert rpc(t, t, one).mean == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        rpc(np.ones((4, 1, 1)), _cells([1, -1, 2, -2]), one)
    with pytest.raises(ValueError):
        rpc(t[:2], t[:2], one)


def test_rpc_flags_constant_cells_and_matches_oracle(rng):
    grid = GridSpec.regular(3, 4)
    p = rng.normal(size=(30, 3, 4))
    t = 0.6 * p + rng.normal(size=(30, 3, 4))
    p[:, 0, 0] = 1.0
    res = rpc(p, t, grid.area_weights)
    assert not res.defined[0, 0] and np.isnan(res.field[0, 0])
    for i in range(3):
        for j in range(4):
            if (i, j) == (0, 0):
                continue
            a, b = p[:, i, j], t[:, i, j]
            rho = np.corrcoef(a, b)[0, 1]
            rho_f = math.sqrt(a.var() / (a.var() + (a - b).var()))
            assert abs(res.field[i, j] - rho / rho_f) < 1e-12
    w = np.where(res.defined, grid.area_weights, 0)
    assert abs(res.mean - (w * np.nan_to_num(res.field)).sum() / w.sum()) < 1e-12


def test_dm_examples():
    stat, p = dm_statistic([1.0, 2.0, 3.0])
    assert abs(stat - 4.2426) < 1e-4 and 0 < p < 1e-4
    assert dm_statistic([1.0, -1.0, 1.0, -1.0])[0] == 0.0
    e = np.array([0.3, -1.0, 2.0, 0.5])
    assert dm_test(e, e) == (0.0, 1.0)
    with pytest.raises(ValueError):
        dm_statistic([1.0, 2.0, 3.0], h=2)


def test_dm_against_brute_force():
    r = np.random.default_rng(3)
    for _ in range(1000):
        n = int(r.integers(6, 30))
        h = int(r.integers(1, 4))
        d = r.normal(0.2, 1, size=n)
        assert abs(dm_statistic(d, h)[0] - brute_dm(list(d), h)) < 1e-12


# -- baselines -------------------------------------------------------------------------------


def test_climatology_forecast_lookup(rng):
    mean = rng.normal(size=(366, 2, 2))
    table = ClimatologyTable("x", mean, np.ones_like(mean))
    assert np.array_equal(climatology_forecast("2003-02-27", 2, table), mean[doy_slot("2003-03-01")])
    assert np.array_equal(climatology_forecast("2003-06-01", 10, table), climatology_forecast("2005-06-06", 5, table))
    stack = ClimatologyStack({"a": table, "b": table}, ["a", "b"])
    assert np.array_equal(climatology_forecast("2004-02-28", 1, stack)[1], mean[59])


def test_persistence_forecast():
    init = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(persistence_forecast(init, 0), init)
    f = persistence_forecast(init, 7)
    f[0, 0] = 99
    assert init[0, 0] == 0.0
    with pytest.raises(ValueError):
        persistence_forecast(init, -1)


def test_climatology_error_equals_noise_scale():
    r = np.random.default_rng(21)
    grid = GridSpec.regular(10, 20)
    reg = global_mask(grid)
    clim = r.normal(size=grid.shape) * 5
    s = 0.7
    errs = [rmse(clim, clim + r.normal(0, s, size=grid.shape), reg) for _ in range(200)]
    assert abs(np.mean(errs) / s - 1) < 0.05


# -- rollouts against the archive -------------------------------------------------------------


@pytest.fixture(scope="module")
def test_year(small_archive):
    data = DailyData(small_archive, (2006, 2007))
    return data, ClimatologyStack.load(small_archive)


def test_baseline_emitters_in_rollout(test_year):
    data, clim = test_year
    inits = [dt.date(2007, 3, 1), dt.date(2007, 9, 1)]
    pers = rollout(PersistenceEmitter(), data, inits, 4)
    assert np.array_equal(pers[3], np.stack([data.output_stack(d) for d in inits]))
    cl = rollout(ClimatologyEmitter(clim), data, inits, 4)
    assert np.array_equal(cl[1], clim.at([d + dt.timedelta(days=2) for d in inits]))


def test_evaluation_of_climatology_as_model(test_year, tmp_path):
    data, clim = test_year
    grid = data.grid
    masks = [global_mask(grid), africa_mask(grid, data.static["lsm"])]
    rep = rollout_evaluate(ClimatologyEmitter(clim), data, clim, masks, max_lead=6, init_stride=20, years=(2007,))
    assert all(d.year == 2007 for d in rep.init_dates) and not rep.incidents
    n = len(rep.init_dates)
    assert rep.samples[("rmse", "model", "global")].shape == (n, 6, 23)
    assert np.array_equal(rep.samples[("rmse", "model", "africa")], rep.samples[("rmse", "climatology", "africa")])
    stat, pval = rep.dm[("climatology", "global")]
    assert np.all(stat == 0) and np.all(pval == 1)

    # persistence error at lead L is the distance between truth(L) and truth(0)
    d0 = rep.init_dates[1]
    ci = data.output_names.index("t2m")
    truth0 = data.output_stack(d0)[ci]
    truth3 = data.output_stack(d0 + dt.timedelta(days=3))[ci]
    got = rep.samples[("rmse", "persistence", "global")][1, 2, ci]
    assert got == pytest.approx(rmse(truth0, truth3, masks[0]), abs=1e-12)

    dist = anomaly_distribution(rep, "global")
    assert np.all(dist["prediction"]["samples"] == 0)
    truth_a = dist["truth"]["samples"]
    assert np.array_equal(dist["truth"]["max"], truth_a.max(axis=0))

    rows = scorecard_rows(rep)
    clim_rows = [r for r in rows if r["baseline"] == "climatology"]
    assert all(r["rmse_improvement_pct"] == 0 for r in clim_rows)
    assert all(r["acc_improvement_pct"] == 0 or math.isnan(r["acc_improvement_pct"]) for r in clim_rows)

    path = scorecard_export(rep, tmp_path)
    back = read_scorecard(path)
    assert len(back) == len(rows)
    for a, b in zip(back, rows):
        for k, v in b.items():
            if isinstance(v, str) or isinstance(v, int):
                assert a[k] == v
            else:
                assert (math.isnan(a[k]) and math.isnan(v)) or a[k] == float(v)
    assert (tmp_path / "distribution.csv").exists() and (tmp_path / "report_meta.json").exists()


def test_improvement_arithmetic(test_year):
    data, clim = test_year
    rep = rollout_evaluate(PersistenceEmitter(), data, clim, [global_mask(data.grid)], max_lead=2, init_stride=40, years=(2007,))
    rep.samples[("rmse", "model", "global")] = rep.samples[("rmse", "climatology", "global")] / 2
    row = next(r for r in scorecard_rows(rep) if r["baseline"] == "climatology" and r["season"] == "all")
    assert row["rmse_improvement_pct"] == pytest.approx(50.0)
