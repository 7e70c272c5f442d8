import json
import math

import numpy as np
import pytest

from s2sdrought import tensor as T
from s2sdrought.checkpoint import CheckpointError, load_checkpoint, read_manifest
from s2sdrought.model import CrossFormer, ModelConfig
from s2sdrought.physics import ConstraintToggles, apply_constraints
from s2sdrought.preprocess import DailyData
from s2sdrought.tensor import Tensor, concat_channels
from s2sdrought.training import (
    NumericIncident,
    OptimizerState,
    SampleSet,
    Scaler,
    TrainConfig,
    Trainer,
    adamw_step,
    cosine_lr,
    latitude_weighted_mse,
    rollout_loss,
    train_multistep,
    train_single_step,
)

NPG = 14


@pytest.fixture(scope="module")
def samples(small_archive):
    data = DailyData(small_archive, (2001,))
    scaler = Scaler(data.stats)
    full = SampleSet.from_daily(data, scaler)
    return full.subset(range(150, 162)), full.subset(range(200, 206)), scaler, small_archive.grid


def make_trainer(samples, toggles=None, seed=0, **cfg):
    train, val, scaler, grid = samples
    settings = dict(lr_max=1e-3, batch_size=4, single_step_epochs=2, multistep_epochs=1, rollout_steps=2, seed=seed)
    settings.update(cfg)
    model = CrossFormer(ModelConfig.tiny(), seed=seed)
    return Trainer(model, train, TrainConfig(**settings), grid.area_weights, scaler, val=val, toggles=toggles)


# -- loss ---------------------------------------------------------------------------------


def test_latitude_weights_ratio():
    rows = np.cos(np.deg2rad([0.0, 60.0]))
    pred = np.zeros((1, 1, 2, 3))
    target = np.ones((1, 1, 2, 3))
    # normalized weights are 4/3 and 2/3, squared errors are 1 on both rows
    assert float(latitude_weighted_mse(pred, target, rows).data) == pytest.approx(1.0, abs=1e-15)
    only_equator = target.copy()
    only_equator[..., 1, :] = 0
    only_pole = target - only_equator
    a = float(latitude_weighted_mse(pred, only_equator, rows).data)
    b = float(latitude_weighted_mse(pred, only_pole, rows).data)
    assert a / b == pytest.approx(2.0, abs=1e-12)


def test_weighted_mse_oracle(rng):
    for _ in range(50):
        b, c, h, w = rng.integers(1, 4, size=4)
        pred, target = rng.normal(size=(2, b, c, h, w))
        lat = rng.uniform(-80, 80, size=h)
        wts = np.cos(np.deg2rad(lat))
        total = 0.0
        for i in range(b):
            for j in range(c):
                for r in range(h):
                    for s in range(w):
                        total += wts[r] / wts.mean() * (pred[i, j, r, s] - target[i, j, r, s]) ** 2
        got = float(latitude_weighted_mse(pred, target, wts).data)
        assert abs(got - total / (b * c * h * w)) < 1e-12
        assert latitude_weighted_mse(target, target, wts).data == 0.0
    with pytest.raises(ValueError):
        latitude_weighted_mse(pred, target, np.ones(h + 1))


# -- optimizer and schedule ------------------------------------------------------------------


def test_adamw_first_step():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([0.5])}, OptimizerState(), lr=1e-4, l2=1e-5)
    expected = 1.0 - 1e-4 * 0.5 / (math.sqrt(0.25) + 1e-8) - 1e-4 * 1e-5
    assert p["w"][0] == pytest.approx(expected, abs=1e-15)
    # decay contributes lr * l2 = 1e-9 on top of the unit-size adaptive step
    assert p["w"][0] - 1.0 == pytest.approx(-1.00001e-4, rel=1e-6)


def test_adamw_matches_scalar_reference(rng):
    target = rng.normal(size=5)
    theta = np.zeros(5)
    params = {"x": theta.copy()}
    state = OptimizerState()
    ref = list(theta)
    m = [0.0] * 5
    v = [0.0] * 5
    lr, l2 = 0.05, 0.01
    for t in range(1, 101):
        adamw_step(params, {"x": 2 * (params["x"] - target)}, state, lr, l2)
        for i in range(5):
            g = 2 * (ref[i] - target[i])
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mh = m[i] / (1 - 0.9**t)
            vh = v[i] / (1 - 0.999**t)
            ref[i] = ref[i] - lr * l2 * ref[i] - lr * mh / (math.sqrt(vh) + 1e-8)
    assert np.allclose(params["x"], ref, rtol=0, atol=1e-13)
    assert np.abs(params["x"] - target).max() < 0.05


def test_adamw_treats_missing_gradients_as_zero():
    p = {"a": np.ones(2), "b": np.ones(2)}
    adamw_step(p, {"a": np.ones(2)}, OptimizerState(), lr=0.1, l2=0.5)
    assert np.allclose(p["b"], 1 - 0.1 * 0.5)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-4) == 1e-4
    assert cosine_lr(50, 100, 1e-4) == pytest.approx(5e-5)
    assert cosine_lr(100, 100, 1e-4, 1e-6) == pytest.approx(1e-6)
    lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(3, 0, 0.5) == 0.5


def test_train_config_validation():
    assert TrainConfig().lr_max == 1e-4 and TrainConfig().batch_size == 4
    for bad in (dict(rollout_steps=0), dict(lr_max=0.0), dict(batch_size=0), dict(dropout=1.0), dict(lr_min=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


# -- rollouts ------------------------------------------------------------------------------


def test_zero_head_loss_is_weighted_target_energy(samples):
    tr = make_trainer(samples, ConstraintToggles.all_off())
    tr.model.params["head.w"].data[:] = 0
    tr.model.params["head.b"].data[:] = 0
    idx = np.array([0, 3])
    loss, _ = tr.rollout_loss(idx, 1, training=False)  # evaluates on the validation samples
    y = tr.val.outputs[idx + 1]
    w = tr.row_weights / tr.row_weights.mean()
    assert float(loss.data) == pytest.approx(float((y**2 * w[:, None]).mean()), rel=1e-12)


def test_single_step_rollout_is_plain_loss(samples):
    tr = make_trainer(samples)
    idx = np.array([2, 5])
    loss, _ = rollout_loss(tr, tr.train, idx, 1, False, None)
    x = Tensor(tr.train.inputs[idx])
    pred, _ = tr.constrain(x, tr.model.forward(x, training=False))
    ref = latitude_weighted_mse(pred, tr.train.outputs[idx + 1], tr.row_weights)
    assert float(loss.data) == float(ref.data)


def test_three_step_rollout_composition(samples):
    tr = make_trainer(samples)
    data = tr.train
    idx = np.array([1, 4])
    loss, _ = rollout_loss(tr, data, idx, 3, False, None)
    x = data.inputs[idx]
    losses = []
    for j in range(3):
        out = tr.model.forward(Tensor(x), training=False).data
        prev = tr.scaler.to_physical(x, "input")
        phys = tr.scaler.to_physical(out, "output")
        fixed, _ = apply_constraints(prev, phys, tr.area_weights)
        pred = tr.scaler.to_model(fixed.data, "output")
        losses.append(float(latitude_weighted_mse(pred, data.outputs[idx + j + 1], tr.row_weights).data))
        x = np.concatenate([pred[:, :NPG], data.inputs[idx + j + 1][:, NPG:]], axis=1)
    assert float(loss.data) == pytest.approx(np.mean(losses), rel=1e-12)


def test_rollout_gradient_against_finite_differences(samples):
    tr = make_trainer(samples)
    idx = np.array([3])
    names = ["head.w", "stage0.embed.k4.w", "up1.fuse.b"]
    tr.model.zero_grad()
    loss, _ = rollout_loss(tr, tr.train, idx, 2, False, None)
    loss.backward()
    r = np.random.default_rng(1)
    for name in names:
        p = tr.model.params[name]
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for i in r.choice(flat.size, 3, replace=False):
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = float(rollout_loss(tr, tr.train, idx, 2, False, None)[0].data)
            flat[i] = orig - h
            fm = float(rollout_loss(tr, tr.train, idx, 2, False, None)[0].data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            assert abs(grad[i] - num) <= 1e-3 * max(abs(num), 1e-6), (name, i, grad[i], num)


def test_prognostic_feedback_carries_gradient(samples):
    tr = make_trainer(samples)
    x = Tensor(tr.train.inputs[[0]], requires_grad=True)
    pred, _ = tr.step_forward(x, False, None)
    nxt = concat_channels([pred[:, :NPG], Tensor(tr.train.inputs[[1]][:, NPG:])])
    out, _ = tr.step_forward(nxt, False, None)
    T.tsum(out * out).backward()
    assert np.abs(x.grad[:, :NPG]).max() > 0


# -- training loop ------------------------------------------------------------------------


def test_training_is_deterministic(samples):
    a, b = make_trainer(samples, seed=4), make_trainer(samples, seed=4)
    train_single_step(a)
    train_single_step(b)
    assert a.steps == b.steps and a.history == b.history
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    c = make_trainer(samples, seed=5)
    train_single_step(c)
    assert c.steps != a.steps


def test_training_reduces_loss_and_logs(samples, tmp_path):
    tr = make_trainer(samples, single_step_epochs=4)
    with open(tmp_path / "log.jsonl", "w") as fh:
        tr.log = fh
        train_single_step(tr)
    losses = [s["loss"] for s in tr.steps]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len([x for x in lines if x.get("kind") == "epoch"]) == 4
    step = lines[0]
    assert {"epoch", "step", "lr", "loss", "grad_norm", "moisture_pre", "moisture_post", "dry_mass_post"} <= set(step)
    assert step["moisture_post"] < 1e-8 * max(step["moisture_pre"], 1.0)
    assert tr.history[-1]["val_loss"] is not None and tr.best["epoch"] is not None


def test_nan_loss_is_a_numeric_incident(samples):
    tr = make_trainer(samples)
    tr.model.params["head.b"].data[0] = np.nan
    with pytest.raises(NumericIncident) as err:
        train_single_step(tr)
    assert err.value.details["step"] == 0 and len(err.value.details["samples"]) == 4


def test_early_stopping(samples):
    tr = make_trainer(samples, single_step_epochs=10, patience=2)
    scores = iter([1.0, 0.5, 0.7, 0.6, 0.5, 0.4])
    tr._validate = lambda k: next(scores)
    records = train_single_step(tr)
    assert [r["best"] for r in records] == [True, True, False, False]


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip(samples, tmp_path):
    tr = make_trainer(samples)
    train_single_step(tr, max_steps=2)
    tr.save(tmp_path / "ck")
    model, opt, manifest = load_checkpoint(tmp_path / "ck")
    for name, arr in tr.model.state_arrays().items():
        assert np.array_equal(model.state_arrays()[name], arr), name
    x = tr.train.inputs[:2]
    assert np.array_equal(model(x).data, tr.model(x).data)
    assert opt["step"] == 2 and set(opt["m"]) == set(tr.opt.m)
    assert manifest["training"]["position"]["batch"] == 2
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck", config=ModelConfig.desk())


def test_resume_mid_epoch_matches_uninterrupted_run(samples, tmp_path):
    full = make_trainer(samples)
    train_single_step(full)
    train_multistep(full)

    part = make_trainer(samples)
    train_single_step(part, max_steps=3)
    part.save(tmp_path / "mid")
    model, opt, manifest = load_checkpoint(tmp_path / "mid")
    resumed = Trainer(model, part.train, part.config, part.area_weights, part.scaler, val=part.val)
    resumed.restore(opt, manifest["training"])
    train_single_step(resumed)
    train_multistep(resumed)
    assert resumed.steps == full.steps
    for (n, p), (_, q) in zip(resumed.model.named_parameters(), full.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_corrupted_checkpoints_are_rejected(samples, tmp_path):
    tr = make_trainer(samples)
    d = tr.save(tmp_path / "ck")
    assert read_manifest(d)["format"].startswith("s2sdrought")
    payload = next((d / "arrays").iterdir())
    good = payload.read_bytes()
    payload.write_bytes(bytes(b ^ 0xFF for b in good))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(d)
    payload.write_bytes(good)
    text = (d / "manifest.json").read_text()
    (d / "manifest.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
    (d / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
