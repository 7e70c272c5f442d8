"""Loss, optimizer, learning-rate schedule and the two-phase training loop.

Training happens in normalized space.  Before every loss evaluation the
prediction is mapped back to physical units, corrected by the physics
constraints and normalized again, so gradients flow through the corrections.
A k-step phase rolls the model forward autoregressively, feeding the
constrained prognostic channels back together with the observed forcing of
the following day, and averages the k step losses.  A single-step phase is
simply k = 1.

Randomness (batch order, dropout) is derived from ``(seed, k, epoch)`` and
``(seed, k, step)``, so a run interrupted at any step and resumed from a
checkpoint replays the same sequence.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .catalog import DEFAULT_CATALOG, VariableCatalog
from .checkpoint import save_checkpoint
from .physics import ConstraintToggles, apply_constraints
from .preprocess import DailyData, NormStats
from .tensor import Tensor, as_tensor, concat_channels, mean, mul, no_grad

__all__ = [
    "NumericIncident",
    "TrainConfig",
    "OptimizerState",
    "latitude_weighted_mse",
    "adamw_step",
    "cosine_lr",
    "Scaler",
    "SampleSet",
    "Trainer",
    "train_single_step",
    "train_multistep",
]


class NumericIncident(RuntimeError):
    """Non-finite loss or gradient during training; ``details`` says where."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    l2: float = 1e-5
    dropout: float = 0.05
    batch_size: int = 4
    single_step_epochs: int = 120
    multistep_epochs: int = 100
    rollout_steps: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 0  # 0 disables early stopping
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.rollout_steps < 1:
            raise ValueError("rollout_steps must be >= 1")
        if not self.lr_max > 0:
            raise ValueError("lr_max must be positive")
        if self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError("lr_min must lie in [0, lr_max]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.single_step_epochs < 0 or self.multistep_epochs < 0 or self.patience < 0:
            raise ValueError("epoch counts and patience must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)


# -- loss, optimizer, schedule ---------------------------------------------------------


def _normalized_weights(weights, h):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        if w.shape[0] != h:
            raise ValueError(f"{w.shape[0]} row weights for {h} rows")
        w = w[:, None]
    return w / w.mean()


def latitude_weighted_mse(pred, target, weights) -> Tensor:
    """Mean of ``w * (pred - target)**2`` with the weights rescaled to mean 1.

    ``weights`` is one value per row (latitude) or a full ``[H, W]`` grid.
    """
    pred = as_tensor(pred)
    diff = pred - target
    w = _normalized_weights(weights, pred.shape[-2])
    return mean(mul(diff * diff, w))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def state_dict(self):
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def load_state(self, d):
        self.step = int(d["step"])
        self.beta1, self.beta2, self.eps = float(d["beta1"]), float(d["beta2"]), float(d["eps"])
        self.m = {k: np.array(a, dtype=np.float64) for k, a in d.get("m", {}).items()}
        self.v = {k: np.array(a, dtype=np.float64) for k, a in d.get("v", {}).items()}


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, l2: float):
    """One in-place AdamW update of the arrays in ``params``.

    Missing gradients count as zero.  Weight decay is decoupled from the
    adaptive step and uses the pre-update parameter value.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= lr * l2 * p + lr * update


def cosine_lr(step, total_steps, lr_max, lr_min=0.0) -> float:
    """Half-cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0:
        return lr_max
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


# -- data -------------------------------------------------------------------------------


class Scaler:
    """Per-channel normalization constants for the input and output layouts."""

    def __init__(self, stats: NormStats, catalog: VariableCatalog = DEFAULT_CATALOG):
        self.catalog = catalog
        names_in = [v.name for v in catalog.inputs]
        names_out = [v.name for v in catalog.outputs]
        m, s = stats.vectors(names_in)
        self.in_mean, self.in_std = m.reshape(1, -1, 1, 1), s.reshape(1, -1, 1, 1)
        m, s = stats.vectors(names_out)
        self.out_mean, self.out_std = m.reshape(1, -1, 1, 1), s.reshape(1, -1, 1, 1)
        self.n_prognostic = catalog.n_prognostic

    def to_physical(self, x, layout="input"):
        m, s = (self.in_mean, self.in_std) if layout == "input" else (self.out_mean, self.out_std)
        if isinstance(x, Tensor):
            return mul(x, s) + m
        return np.asarray(x) * s + m

    def to_model(self, x, layout="input"):
        m, s = (self.in_mean, self.in_std) if layout == "input" else (self.out_mean, self.out_std)
        if isinstance(x, Tensor):
            return mul(x - m, 1.0 / s)
        return (np.asarray(x) - m) / s


@dataclass
class SampleSet:
    """Normalized daily stacks: ``inputs[T, 25, H, W]`` and ``outputs[T, 23, H, W]``.

    Missing values become 0 (the training mean) in normalized space.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    dates: list

    @classmethod
    def from_daily(cls, data: DailyData, scaler: Scaler) -> "SampleSet":
        x = np.stack([data.input_stack(d) for d in data.dates])
        y = np.stack([data.output_stack(d) for d in data.dates])
        x = np.nan_to_num(scaler.to_model(x, "input"), nan=0.0)
        y = np.nan_to_num(scaler.to_model(y, "output"), nan=0.0)
        return cls(np.ascontiguousarray(x), np.ascontiguousarray(y), list(data.dates))

    def __len__(self):
        return len(self.dates)

    def subset(self, idx) -> "SampleSet":
        idx = list(idx)
        return SampleSet(self.inputs[idx], self.outputs[idx], [self.dates[i] for i in idx])

    def starts(self, k: int) -> np.ndarray:
        """Indices ``i`` whose next ``k`` days are present and consecutive."""
        out = []
        for i in range(len(self.dates) - k):
            if (self.dates[i + k] - self.dates[i]).days == k:
                out.append(i)
        return np.array(out, dtype=np.int64)


# -- trainer ----------------------------------------------------------------------------


def _rng(seed, k, stream, counter):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k, stream, counter)))


class Trainer:
    """Owns a model and its optimizer for one training run."""

    def __init__(
        self,
        model,
        train: SampleSet,
        config: TrainConfig,
        area_weights,
        scaler: Scaler,
        val: SampleSet | None = None,
        toggles: ConstraintToggles | None = None,
        catalog: VariableCatalog = DEFAULT_CATALOG,
        log=None,
        checkpoint_dir=None,
    ):
        self.model = model
        self.train = train
        self.val = val
        self.config = config
        self.area_weights = np.asarray(area_weights, dtype=np.float64)
        self.row_weights = self.area_weights.mean(axis=1) if self.area_weights.ndim == 2 else self.area_weights
        self.scaler = scaler
        self.toggles = toggles or ConstraintToggles()
        self.catalog = catalog
        self.log = log
        self.checkpoint_dir = checkpoint_dir
        self.opt = OptimizerState(beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        self.history = []  # one record per finished epoch
        self.steps = []  # one record per optimizer step
        self.position = None  # {"k", "epoch", "batch", "loss_sum", "n"} of an unfinished phase
        self.best = {"loss": None, "k": None, "epoch": None}
        self.best_state = None
        if model.config.dropout != config.dropout:
            model.config = replace(model.config, dropout=config.dropout)

    # -- forward pieces -------------------------------------------------------------

    def constrain(self, prev_norm, pred_norm):
        """Apply the physics constraints to a normalized prediction."""
        if not (self.toggles.clamp or self.toggles.moisture or self.toggles.dry_mass):
            return pred_norm, {}
        prev = self.scaler.to_physical(prev_norm, "input")
        pred = self.scaler.to_physical(pred_norm, "output")
        fixed, reports = apply_constraints(prev, pred, self.area_weights, self.toggles, self.catalog)
        return self.scaler.to_model(fixed, "output"), reports

    def step_forward(self, x, training, rng):
        """One constrained model step from normalized input ``x[B, 25, H, W]``."""
        pred = self.model.forward(x, training=training, rng=rng)
        return self.constrain(x, pred)

    def rollout_loss(self, idx, k, training=False, rng=None):
        """Mean latitude-weighted MSE over a ``k``-step rollout started at samples ``idx``."""
        data = self.train if training else self.val
        return rollout_loss(self, data, idx, k, training, rng)

    # -- training ---------------------------------------------------------------------

    def _grad_norm(self):
        total = 0.0
        for p in self.model.parameters():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return math.sqrt(total)

    def _validate(self, k):
        data = self.val if self.val is not None else None
        if data is None:
            return None
        starts = data.starts(k)
        if starts.size == 0:
            return None
        total = 0.0
        bs = self.config.batch_size
        with no_grad():
            for b in range(0, starts.size, bs):
                idx = starts[b : b + bs]
                loss, _ = rollout_loss(self, data, idx, k, False, None)
                total += float(loss.data) * idx.size
        return total / starts.size

    def _record(self, rec):
        if self.log is not None:
            self.log.write(json.dumps(rec, sort_keys=True) + "\n")
            self.log.flush()

    def run_phase(self, k: int, epochs: int, max_steps: int | None = None, phase: str | None = None):
        """Train ``epochs`` epochs on ``k``-step rollouts.

        Resumes from ``self.position`` when it refers to the same ``k``.
        ``max_steps`` interrupts the phase after that many optimizer steps
        (counted from the start of the phase) and leaves ``self.position``
        pointing at the next batch.  Returns the epoch records of this phase.
        """
        cfg = self.config
        phase = phase or ("single" if k == 1 else f"rollout{k}")
        starts = self.train.starts(k)
        if starts.size == 0:
            raise ValueError(f"no training samples support {k}-step rollouts")
        n_batches = -(-starts.size // cfg.batch_size)
        total_steps = epochs * n_batches
        pos = self.position if self.position and self.position["k"] == k else {"k": k, "epoch": 0, "batch": 0, "loss_sum": 0.0, "n": 0, "since_best": 0}
        params = {n: p for n, p in self.model.named_parameters()}
        records = [r for r in self.history if r["phase"] == phase]
        while pos["epoch"] < epochs:
            epoch = pos["epoch"]
            order = starts[_rng(cfg.seed, k, 0, epoch).permutation(starts.size)]
            for b in range(pos["batch"], n_batches):
                step = epoch * n_batches + b
                if max_steps is not None and step >= max_steps:
                    self.position = dict(pos, batch=b)
                    return records
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
                self.model.zero_grad()
                loss, reports = rollout_loss(self, self.train, idx, k, True, _rng(cfg.seed, k, 1, step))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericIncident(f"non-finite training loss in phase {phase} epoch {epoch} step {step}", {"phase": phase, "epoch": epoch, "step": step, "samples": [str(self.train.dates[i]) for i in idx]})
                loss.backward()
                gnorm = self._grad_norm()
                if not math.isfinite(gnorm):
                    raise NumericIncident(f"non-finite gradient in phase {phase} epoch {epoch} step {step}", {"phase": phase, "epoch": epoch, "step": step})
                adamw_step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items() if p.grad is not None}, self.opt, lr, cfg.l2)
                rec = {"phase": phase, "epoch": epoch, "step": step, "lr": lr, "loss": value, "grad_norm": gnorm}
                for kind, rep in reports.items():
                    rec[f"{kind}_pre"] = float(np.max(np.abs(rep.pre_residual)))
                    rec[f"{kind}_post"] = float(np.max(np.abs(rep.post_residual)))
                self.steps.append(rec)
                self._record(rec)
                pos["loss_sum"] += value
                pos["n"] += 1
            val_loss = self._validate(k)
            score = val_loss if val_loss is not None else pos["loss_sum"] / max(pos["n"], 1)
            improved = self.best["loss"] is None or self.best["k"] != k or score < self.best["loss"]
            if improved:
                self.best = {"loss": score, "k": k, "epoch": epoch, "phase": phase}
                self.best_state = {n: a.copy() for n, a in self.model.state_arrays().items()}
                pos["since_best"] = 0
            else:
                pos["since_best"] += 1
            erec = {"phase": phase, "epoch": epoch, "train_loss": pos["loss_sum"] / max(pos["n"], 1), "val_loss": val_loss, "best": improved}
            self.history.append(erec)
            records.append(erec)
            self._record(dict(erec, kind="epoch"))
            pos = {"k": k, "epoch": epoch + 1, "batch": 0, "loss_sum": 0.0, "n": 0, "since_best": pos["since_best"]}
            self.position = pos
            if self.checkpoint_dir is not None:
                self.save(f"{self.checkpoint_dir}/last")
                if improved:
                    self.save(f"{self.checkpoint_dir}/best")
            if cfg.patience and pos["since_best"] >= cfg.patience:
                break
        self.position = None
        return records

    # -- persistence ------------------------------------------------------------------

    def training_state(self) -> dict:
        return {
            "position": self.position,
            "history": self.history,
            "steps": self.steps,
            "best": self.best,
            "config": self.config.to_dict(),
            "toggles": asdict(self.toggles),
        }

    def save(self, directory):
        return save_checkpoint(directory, self.model, self.opt, self.training_state())

    def restore(self, optimizer_state: dict, training_state: dict):
        """Continue from a checkpoint loaded with :func:`load_checkpoint`."""
        self.opt.load_state(optimizer_state)
        self.position = training_state.get("position")
        self.history = list(training_state.get("history", []))
        self.steps = list(training_state.get("steps", []))
        self.best = dict(training_state.get("best", self.best))


def rollout_loss(trainer: Trainer, data: SampleSet, idx, k: int, training: bool, rng):
    """Mean step loss of a constrained ``k``-step rollout; returns ``(loss, reports)``.

    Step ``j`` predicts day ``i + j + 1``; its input reuses the constrained
    prognostic channels of step ``j - 1`` and the recorded forcing of day
    ``i + j``.
    """
    idx = np.asarray(idx)
    npg = trainer.scaler.n_prognostic
    x = Tensor(data.inputs[idx])
    total = None
    reports = {}
    for j in range(k):
        pred, rep = trainer.step_forward(x, training, rng)
        target = data.outputs[idx + j + 1]
        step_loss = latitude_weighted_mse(pred, target, trainer.row_weights)
        total = step_loss if total is None else total + step_loss
        reports = rep
        if j + 1 < k:
            forcing = Tensor(data.inputs[idx + j + 1][:, npg:])
            x = concat_channels([pred[:, :npg], forcing])
    return (total * (1.0 / k) if k > 1 else total), reports


def train_single_step(trainer: Trainer, max_steps=None):
    """Single-step phase: ``config.single_step_epochs`` epochs of next-day prediction."""
    return trainer.run_phase(1, trainer.config.single_step_epochs, max_steps=max_steps, phase="single")


def train_multistep(trainer: Trainer, max_steps=None):
    """Rollout phase: ``config.multistep_epochs`` epochs on ``config.rollout_steps``-day rollouts."""
    k = trainer.config.rollout_steps
    return trainer.run_phase(k, trainer.config.multistep_epochs, max_steps=max_steps, phase="single" if k == 1 else f"rollout{k}")
