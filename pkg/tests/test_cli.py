import datetime as dt
import json
import textwrap

import numpy as np
import pytest

from s2sdrought.archive import Archive
from s2sdrought.checkpoint import load_checkpoint, save_checkpoint
from s2sdrought.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from s2sdrought.config import ConfigError, load_config, parse_years
from s2sdrought.evaluation import read_scorecard
from s2sdrought.physics import apply_constraints
from s2sdrought.preprocess import DailyData, NormStats
from s2sdrought.tensor import Tensor
from s2sdrought.training import Scaler

SMALL = """
[run]
seed = 7

[data]
train_years = 2001
val_years = 2002
test_years = 2003

[model]
preset = tiny

[train]
batch_size = 8
single_step_epochs = 1
multistep_epochs = 1
rollout_steps = 2

[eval]
max_lead = 4
init_stride = 120
masks = global, africa

[synth]
n_lat = 8
n_lon = 16
years = 2001-2003
event_years = 2003
"""


def write_config(path, text=SMALL):
    path.write_text(textwrap.dedent(text))
    return str(path)


# -- configuration ---------------------------------------------------------------------------


def test_year_lists():
    assert parse_years("2001-2003, 2010") == (2001, 2002, 2003, 2010)
    assert parse_years("2005") == (2005,)


def test_config_parsing(tmp_path):
    cfg = load_config(write_config(tmp_path / "a.ini"), {"out": str(tmp_path / "o")})
    assert cfg.model_preset == "tiny" and cfg.model.block_dims == (8, 16, 32, 64)
    assert cfg.split().train == (2001,) and cfg.eval.masks == ("global", "africa")
    assert cfg.synth_config().events[0].year == 2003
    assert cfg.train_config().seed == cfg.component_seed("train") != cfg.component_seed("model")
    moved = load_config(write_config(tmp_path / "b.ini"), {"out": "elsewhere", "threads": 3})
    assert moved.config_hash() == cfg.config_hash()
    reseeded = load_config(write_config(tmp_path / "c.ini"), {"seed": 8})
    assert reseeded.config_hash() != cfg.config_hash()
    defaults = load_config()
    assert defaults.train.lr_max == 1e-4 and defaults.split().test == (2020, 2021)


@pytest.mark.parametrize(
    "old, new",
    [
        ("batch_size = 8", "learning_rate = 1"),
        ("[synth]", "[bogus]\nx = 1\n\n[synth]"),
        ("masks = global, africa", "masks = mars"),
        ("rollout_steps = 2", "rollout_steps = 0"),
        ("[eval]", "[physics]\nclamp = maybe\n\n[eval]"),
        ("[eval]", "[eval]\nforecaster = oracle"),
        ("preset = tiny", "preset = huge"),
        ("preset = tiny", "preset = tiny\nwidth = 3"),
        ("val_years = 2002", "val_years = 2001"),
        ("event_years = 2003", "event_years = 2009"),
        ("seed = 7", "seed = seven"),
    ],
)
def test_bad_configs_are_rejected(tmp_path, old, new):
    assert old in SMALL
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path / "x.ini", SMALL.replace(old, new, 1)))


def test_configuration_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path / "a.ini")
    assert main(["synth", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["launch", "--config", cfg]) == EXIT_CONFIG
    assert main(["predict", "--config", cfg]) == EXIT_CONFIG  # no init date
    assert main(["predict", "--config", cfg, "--init-date", "2003-13-01"]) == EXIT_CONFIG
    assert main(["predict", "--config", cfg, "--init-date", "2003-03-01", "--leads", "0"]) == EXIT_CONFIG
    assert main(["train", "--config", write_config(tmp_path / "b.ini", SMALL.replace("seed = 7", "seed = x"))]) == EXIT_CONFIG


def test_data_error_exit_codes(tmp_path):
    cfg = write_config(tmp_path / "a.ini")
    out = str(tmp_path / "empty")
    assert main(["preprocess", "--config", cfg, "--out", out]) == EXIT_DATA
    assert main(["train", "--config", cfg, "--out", out]) == EXIT_DATA
    assert main(["evaluate", "--config", cfg, "--out", out]) == EXIT_DATA


# -- full pipeline ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.ini")
    out = str(root / "run")
    codes = {}
    for cmd in ("synth", "preprocess", "train", "evaluate"):
        codes[cmd] = main([cmd, "--config", cfg, "--out", out])
    codes["predict"] = main(["predict", "--config", cfg, "--out", out, "--init-date", "2003-03-01", "--leads", "1"])
    codes["indices"] = main(["indices", "--config", cfg, "--out", out])
    return root, cfg, out, codes


def test_pipeline_commands_succeed(pipeline):
    root, _, out, codes = pipeline
    assert codes == {k: EXIT_OK for k in codes}
    run = root / "run"
    for rel in ("raw/manifest.json", "processed/manifest.json", "train/log.jsonl", "train/history.json", "train/checkpoints/best/manifest.json", "evaluate/scorecard.csv", "evaluate/report_meta.json", "predict/2003-03-01/manifest.json", "indices/analysis/manifest.json", "indices/analysis/events_sm1.csv"):
        assert (run / rel).exists(), rel
    rows = read_scorecard(run / "evaluate" / "scorecard.csv")
    assert {r["mask"] for r in rows} == {"global", "africa"} and {r["baseline"] for r in rows} == {"climatology", "persistence"}
    meta = json.loads((run / "evaluate" / "report_meta.json").read_text())
    assert meta["config_hash"] and meta["forecaster"] == "model"
    assert Archive(run / "processed").provenance["config_hash"] == meta["config_hash"]


def test_injected_event_reaches_the_event_tables(pipeline):
    root = pipeline[0]
    text = (root / "run" / "indices" / "analysis" / "events_sm1.csv").read_text().splitlines()
    assert text[0].startswith("layer,row,col") and len(text) > 1


def test_predict_one_lead_is_one_constrained_step(pipeline):
    root, cfg_path, out, _ = pipeline
    run = root / "run"
    arc = Archive(run / "processed")
    data = DailyData(arc, (2003,))
    model, _, _ = load_checkpoint(run / "train" / "checkpoints" / "best")
    scaler = Scaler(NormStats.from_dict(arc.read_meta("norm_stats")))
    x = data.input_stack(dt.date(2003, 3, 1))[None]
    pred = model.forward(Tensor(np.nan_to_num(scaler.to_model(x, "input"))), training=False).data
    expected, _ = apply_constraints(x, scaler.to_physical(pred, "output"), arc.grid.area_weights)
    written = Archive(run / "predict" / "2003-03-01")
    for ci, name in enumerate(data.output_names):
        got = written.read_field(name, 2003)
        assert got.shape == (1, 8, 16)
        assert np.allclose(got[0], expected.data[0, ci], rtol=1e-6, atol=1e-30)  # stored as float32
    assert written.field_header("t2m", 2003)["start_date"] == "2003-03-02"


def test_indices_from_a_rollout(pipeline):
    root, cfg_path, out, _ = pipeline
    code = main(["indices", "--config", cfg_path, "--out", out, "--rollout", str(root / "run" / "predict" / "2003-03-01")])
    assert code == EXIT_OK
    assert (root / "run" / "indices" / "rollout_2003-03-01" / "manifest.json").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the injected inf spreads on purpose
def test_numeric_incident_exit_code(pipeline):
    root, cfg_path, out, _ = pipeline
    ckpt = root / "run" / "train" / "checkpoints"
    model, _, _ = load_checkpoint(ckpt / "best")
    model.params["head.b"].data[:] = np.inf
    save_checkpoint(ckpt / "last", model)
    cfg = write_config(root / "bad.ini", SMALL.replace("masks = global, africa", "masks = global, africa\ncheckpoint = last"))
    assert main(["predict", "--config", cfg, "--out", out, "--init-date", "2003-03-01", "--leads", "2"]) == EXIT_NUMERIC
    assert main(["evaluate", "--config", cfg, "--out", out]) == EXIT_NUMERIC
