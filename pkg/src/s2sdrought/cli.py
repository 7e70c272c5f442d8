"""``s2sdrought`` command line: synth, preprocess, train, predict, indices, evaluate.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric incident.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _accel
from .archive import Archive, ArchiveError
from .catalog import DEFAULT_CATALOG
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    ClimatologyEmitter,
    ClimatologyStack,
    ModelForecaster,
    PersistenceEmitter,
    africa_mask,
    global_mask,
    rollout,
    rollout_evaluate,
    scorecard_export,
)
from .grid import as_date
from .indices import SoilMoisturePools, event_table, forecast_indices, write_event_table
from .model import CrossFormer
from .preprocess import ClimatologyTable, DailyData, NormStats, preprocess
from .synth import SOIL_LAYERS, synth_generate
from .training import NumericIncident, SampleSet, Scaler, Trainer, train_multistep, train_single_step

log = logging.getLogger("s2sdrought")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _processed(cfg: RunConfig) -> Archive:
    arc = Archive(cfg.path(cfg.data.processed))
    arc.manifest  # raises ArchiveError when missing
    return arc


# -- commands ------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    root = cfg.path(cfg.data.raw)
    arc = synth_generate(cfg.synth_config(), root)
    arc.update_provenance(**cfg.provenance())
    log.info("synthetic archive written to %s", root)
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args) -> int:
    raw = Archive(cfg.path(cfg.data.raw))
    raw.manifest
    out = cfg.path(cfg.data.processed)
    preprocess(raw, out, cfg.split(), cfg.preprocess_config(), DEFAULT_CATALOG, provenance=cfg.provenance())
    log.info("processed archive written to %s", out)
    return EXIT_OK


def _train_dir(cfg):
    return cfg.path("train")


def cmd_train(cfg: RunConfig, args) -> int:
    arc = _processed(cfg)
    split = cfg.split()
    train_data = DailyData(arc, split.train)
    scaler = Scaler(train_data.stats)
    train = SampleSet.from_daily(train_data, scaler)
    val = SampleSet.from_daily(DailyData(arc, split.val), scaler) if split.val else None
    model = CrossFormer(cfg.model, DEFAULT_CATALOG, seed=cfg.component_seed("model"))
    tdir = _train_dir(cfg)
    tdir.mkdir(parents=True, exist_ok=True)
    with open(tdir / "log.jsonl", "w") as logfile:
        trainer = Trainer(
            model,
            train,
            cfg.train_config(),
            arc.grid.area_weights,
            scaler,
            val=val,
            toggles=cfg.physics,
            log=logfile,
            checkpoint_dir=tdir / "checkpoints",
        )
        history = train_single_step(trainer)
        history += train_multistep(trainer)
    trainer.save(tdir / "checkpoints" / "final")
    _write_json(tdir / "history.json", {"provenance": cfg.provenance(), "epochs": history})
    log.info("training finished: %d epochs, best %s", len(history), trainer.best)
    return EXIT_OK


def _forecaster(cfg: RunConfig, arc: Archive, clim: ClimatologyStack):
    kind = cfg.eval.forecaster
    if kind == "climatology":
        return ClimatologyEmitter(clim)
    if kind == "persistence":
        return PersistenceEmitter()
    ckpt = _train_dir(cfg) / "checkpoints" / cfg.eval.checkpoint
    model, _, _ = load_checkpoint(ckpt, DEFAULT_CATALOG, cfg.model)
    stats = NormStats.from_dict(arc.read_meta("norm_stats"))
    return ModelForecaster(model, Scaler(stats), arc.grid.area_weights, cfg.physics)


def _data_for(cfg, arc, first: dt.date, last: dt.date) -> DailyData:
    years = sorted(set(cfg.split().all_years) & set(range(first.year, last.year + 1)))
    if not years or first.year not in years or last.year not in years:
        raise ArchiveError(f"processed archive does not cover {first} .. {last}")
    return DailyData(arc, years)


def cmd_predict(cfg: RunConfig, args) -> int:
    arc = _processed(cfg)
    init = as_date(args.init_date)
    leads = args.leads or cfg.eval.max_lead
    data = _data_for(cfg, arc, init, init + dt.timedelta(days=leads))
    clim = ClimatologyStack.load(arc)
    forecaster = _forecaster(cfg, arc, clim)
    cube = rollout(forecaster, data, [init], leads)[:, 0]
    if not np.all(np.isfinite(cube)):
        raise NumericIncident(f"rollout from {init} produced non-finite values")
    out = cfg.path("predict") / init.isoformat()
    pred = Archive.create(out, arc.grid, dict(cfg.provenance(), init_date=init.isoformat(), leads=leads), overwrite=True)
    start = init + dt.timedelta(days=1)
    for ci, v in enumerate(DEFAULT_CATALOG.outputs):
        pred.write_field(v.name, init.year, cube[:, ci], role=v.role.value, units=v.units, source=f"forecast:{cfg.eval.forecaster}", start=start)
    log.info("rollout written to %s", out)
    return EXIT_OK


def _rollout_fields(root: Path):
    arc = Archive(root)
    arc.manifest
    fields, dates = {}, None
    for name in arc.field_names():
        series, d = arc.read_series(name, arc.field_years(name))
        fields[name] = series
        dates = d
    return fields, dates


def cmd_indices(cfg: RunConfig, args) -> int:
    arc = _processed(cfg)
    split = cfg.split()
    if args.rollout:
        fields, dates = _rollout_fields(Path(args.rollout))
        tag = "rollout_" + Path(args.rollout).name
    else:
        years = split.test or split.val or split.train
        data = DailyData(arc, years)
        fields, dates = data.fields, data.dates
        tag = "analysis"
    pools = {}
    for layer in SOIL_LAYERS:
        series, pdates = arc.read_series(layer, split.train)
        pools[layer] = SoilMoisturePools(series, pdates, cfg.data.clim_halfwidth)
    result = forecast_indices(fields, dates, ClimatologyTable.load(arc, "esr"), pools)
    out = cfg.path("indices") / tag
    idx = Archive.create(out, arc.grid, dict(cfg.provenance(), source=tag), overwrite=True)
    years = sorted({d.year for d in dates})
    year_of = np.array([d.year for d in dates])
    for y in years:
        first = dates[int(np.argmax(year_of == y))]
        idx.write_field("sesr", y, result["sesr"][year_of == y], role="index", units="1", source=tag, start=first)
    labels = [f"{y}-P{k + 1:02d}" for y, k in result["pentads"]]
    for layer in SOIL_LAYERS:
        idx.write_table("percentile", layer, result[f"pct_{layer}"], pentads=labels)
        res = result[f"fdii_{layer}"]
        if res is None:
            continue
        for part in ("fd_int", "dro_sev", "fdii"):
            idx.write_table("fdii", f"{layer}.{part}", getattr(res, part)[None], pentads=labels)
        write_event_table(out / f"events_{layer}.csv", event_table(res, arc.grid.lat, arc.grid.lon, layer, result["pentads"]))
    log.info("indices written to %s", out)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    arc = _processed(cfg)
    split = cfg.split()
    years = split.test or split.val
    data = DailyData(arc, years)
    clim = ClimatologyStack.load(arc)
    masks = []
    for name in cfg.eval.masks:
        masks.append(global_mask(arc.grid) if name == "global" else africa_mask(arc.grid, data.static["lsm"]))
    forecaster = _forecaster(cfg, arc, clim)
    report = rollout_evaluate(forecaster, data, clim, masks, cfg.eval.max_lead, init_stride=cfg.eval.init_stride, batch_size=cfg.eval.batch_size)
    out = cfg.path("evaluate")
    scorecard_export(report, out, dict(cfg.provenance(), forecaster=cfg.eval.forecaster))
    if report.incidents:
        log.error("%d rollout incidents (see %s)", len(report.incidents), out / "incidents.jsonl")
        return EXIT_NUMERIC
    log.info("scorecards written to %s", out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "indices": cmd_indices,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (overrides [run] seed)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on worker threads")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides [run] out)")
    parser = argparse.ArgumentParser(prog="s2sdrought", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "preprocess", "train", "evaluate"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("predict", parents=[common])
    p.add_argument("--init-date", required=True)
    p.add_argument("--leads", type=int, default=None)
    p = sub.add_parser("indices", parents=[common])
    p.add_argument("--rollout", default=None, help="rollout directory written by 'predict'; default: the analysis")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        overrides = {k: getattr(args, k, None) for k in ("seed", "threads", "out")}
        cfg = load_config(getattr(args, "config", None), overrides)
        if args.command == "predict":
            if args.leads is not None and args.leads < 1:
                raise ConfigError("--leads must be positive")
            as_date(args.init_date)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    _accel.set_threads(cfg.threads)
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ArchiveError, CheckpointError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericIncident, FloatingPointError) as exc:
        log.error("numeric incident: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
