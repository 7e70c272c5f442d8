"""Run configuration: an INI document with fixed sections and keys.

Sections and what they feed:

``[run]``       out directory, root seed, threads
``[data]``      archive locations, split years, preprocessing options
``[model]``     :class:`ModelConfig` fields (``preset = tiny|desk`` starts from a small model)
``[train]``     :class:`TrainConfig` fields
``[physics]``   constraint toggles
``[eval]``      masks, leads, init stride, forecaster, checkpoint choice
``[synth]``     synthetic generator settings

Unknown sections or keys are errors.  Lists are comma separated; year
lists accept ranges such as ``2001-2017``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .model import ModelConfig
from .physics import ConstraintToggles
from .preprocess import DatasetSplit, PreprocessConfig
from .synth import EventSpec, SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def parse_years(text) -> tuple:
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out += list(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(value: str, default):
    """Parse ``value`` to the type of ``default``."""
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [x.strip() for x in value.split(",") if x.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(x) for x in items)
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    return value.strip()


@dataclass
class EvalSettings:
    masks: tuple = ("global", "africa")
    max_lead: int = 90
    init_stride: int = 1
    batch_size: int = 16
    forecaster: str = "model"  # model | climatology | persistence
    checkpoint: str = "best"  # best | last

    def validate(self):
        bad = set(self.masks) - {"global", "africa"}
        if bad or not self.masks:
            raise ValueError(f"unknown masks {sorted(bad)}")
        if self.max_lead < 1 or self.init_stride < 1 or self.batch_size < 1:
            raise ValueError("max_lead, init_stride and batch_size must be positive")
        if self.forecaster not in ("model", "climatology", "persistence"):
            raise ValueError(f"unknown forecaster {self.forecaster!r}")
        if self.checkpoint not in ("best", "last"):
            raise ValueError(f"unknown checkpoint choice {self.checkpoint!r}")


@dataclass
class DataSettings:
    raw: str = "raw"
    processed: str = "processed"
    train_years: tuple = DatasetSplit().train
    val_years: tuple = DatasetSplit().val
    test_years: tuple = DatasetSplit().test
    coarsen_factor: int = 1
    accumulation_window: int = 30
    clim_halfwidth: int = 15


@dataclass
class SynthSettings:
    n_lat: int = 16
    n_lon: int = 32
    years: tuple = (2001, 2002, 2003)
    seed: int = -1  # -1: derived from the root seed
    noise_scale: float = 1.0
    interannual_scale: float = 1.0
    ar_coef: float = 0.8
    n_modes: int = 6
    fine_factor: int = 1
    vegetation_cadence: int = 8
    event_years: tuple = ()


@dataclass
class RunConfig:
    out: str = "run"
    seed: int = 0
    threads: int = 1
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_preset: str = "default"
    train: TrainConfig = field(default_factory=TrainConfig)
    physics: ConstraintToggles = field(default_factory=ConstraintToggles)
    eval: EvalSettings = field(default_factory=EvalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    source: str | None = None

    # -- derived settings ---------------------------------------------------------

    def split(self) -> DatasetSplit:
        return DatasetSplit(self.data.train_years, self.data.val_years, self.data.test_years)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            coarsen_factor=self.data.coarsen_factor,
            accumulation_window=self.data.accumulation_window,
            clim_halfwidth=self.data.clim_halfwidth,
        )

    def component_seed(self, component: str) -> int:
        """Deterministic per-component seed split from the root seed."""
        h = hashlib.sha256(f"{self.seed}:{component}".encode()).digest()
        return int.from_bytes(h[:4], "little")

    def synth_config(self) -> SynthConfig:
        s = self.synth
        seed = s.seed if s.seed >= 0 else self.component_seed("synth")
        return SynthConfig(
            n_lat=s.n_lat,
            n_lon=s.n_lon,
            years=s.years,
            seed=seed,
            noise_scale=s.noise_scale,
            interannual_scale=s.interannual_scale,
            ar_coef=s.ar_coef,
            n_modes=s.n_modes,
            fine_factor=s.fine_factor,
            vegetation_cadence=s.vegetation_cadence,
            events=[EventSpec(year=y) for y in s.event_years],
        )

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.component_seed("train"))

    def path(self, name) -> Path:
        p = Path(name)
        return p if p.is_absolute() else Path(self.out) / p

    def to_dict(self) -> dict:
        d = {
            "run": {"out": self.out, "seed": self.seed, "threads": self.threads},
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "physics": dataclasses.asdict(self.physics),
            "eval": dataclasses.asdict(self.eval),
            "synth": dataclasses.asdict(self.synth),
        }
        return json.loads(json.dumps(d, default=list))

    def config_hash(self) -> str:
        """Hash of every setting that can change outputs (not where they go or thread counts)."""
        d = self.to_dict()
        d["run"] = {"seed": self.seed}
        d["version"] = __version__
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed, "version": __version__}

    def validate(self):
        try:
            self.split()
            self.model.validate()
            self.train.validate()
            self.eval.validate()
            if self.threads < 1:
                raise ValueError("threads must be >= 1")
            if self.data.coarsen_factor < 1:
                raise ValueError("coarsen_factor must be >= 1")
            if self.synth.n_lat < 1 or self.synth.n_lon < 1 or not self.synth.years:
                raise ValueError("synthetic grid and years must be non-empty")
            bad = set(self.synth.event_years) - set(self.synth.years)
            if bad:
                raise ValueError(f"event years {sorted(bad)} are not generated")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


_SECTIONS = ("run", "data", "model", "train", "physics", "eval", "synth")


def _apply(obj, section, items):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        default = getattr(obj, key)
        try:
            if key.endswith("_years") or key == "years":
                updates[key] = parse_years(value)
            else:
                updates[key] = _convert(value, default)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``overrides`` (``{"seed": 3, ...}`` for [run])."""
    cfg = RunConfig()
    sections = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for name in parser.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            sections[name] = dict(parser.items(name))
        cfg.source = str(path)
    run = dict(sections.get("run", {}))
    for k, v in (overrides or {}).items():
        if v is not None:
            run[k] = str(v)
    for key, value in run.items():
        if key not in ("out", "seed", "threads"):
            raise ConfigError(f"unknown key {key!r} in [run]")
        try:
            setattr(cfg, key, value if key == "out" else int(value))
        except ValueError as exc:
            raise ConfigError(f"[run] {key}: {exc}") from exc
    model_items = dict(sections.get("model", {}))
    preset = model_items.pop("preset", "default").strip()
    presets = {"default": ModelConfig, "tiny": ModelConfig.tiny, "desk": ModelConfig.desk}
    if preset not in presets:
        raise ConfigError(f"unknown model preset {preset!r}")
    cfg.model_preset = preset
    base_model = presets[preset]()
    if "depths" in model_items and "," not in model_items["depths"]:
        model_items["depths"] = ",".join([model_items["depths"]] * len(base_model.block_dims))
    cfg.model = _apply(base_model, "model", model_items)
    cfg.data = _apply(cfg.data, "data", sections.get("data", {}))
    cfg.train = _apply(cfg.train, "train", sections.get("train", {}))
    cfg.physics = _apply(cfg.physics, "physics", sections.get("physics", {}))
    cfg.eval = _apply(cfg.eval, "eval", sections.get("eval", {}))
    cfg.synth = _apply(cfg.synth, "synth", sections.get("synth", {}))
    return cfg.validate()
