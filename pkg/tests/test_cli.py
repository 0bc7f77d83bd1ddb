import csv
import json

import numpy as np
import pytest
from PIL import Image

from nfalayer.cli import DEFAULTS, format_value, load_config, main, read_significance
from nfalayer.data import load_dataset
from nfalayer.errors import ConfigError

SMALL = """
[data]
size = 16,16
count = 10
seed = 2
[training]
epochs = 2
[check]
size = 12,12
trials = 100
"""


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


@pytest.fixture
def dataset(tmp_path, small_ini):
    assert main(["generate", "--config", str(small_ini), "--out-dir", str(tmp_path / "data")]) == 0
    return tmp_path / "data" / "manifest.json"


def test_shipped_config_matches_defaults():
    from pathlib import Path

    ini = Path(__file__).resolve().parents[1] / "configs" / "default.ini"
    assert load_config(str(ini)) == load_config(None)
    assert load_config(None) == {s: dict(v) for s, v in DEFAULTS.items()}


def test_unknown_keys_are_listed(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[training]\nepochs = 2\nmomentum = 0.9\n[optimizer]\nname = sgd\n")
    with pytest.raises(ConfigError, match=r"\[optimizer\], training\.momentum"):
        load_config(str(p))
    assert main(["train", "--config", str(p)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error CONFIG:")


def test_bad_values_fail_before_touching_data(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[network]\nwindow = 4\n[data]\nmanifest = does/not/exist.json\n")
    assert main(["train", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error PARAMETER:")
    p.write_text("[network]\nmultiscale = maybe\n")
    assert main(["train", "--config", str(p)]) == 1
    assert "expected on/off" in capsys.readouterr().err


def test_format_value_round_trip():
    assert format_value((True, False)) == "on,off"
    assert format_value((1e-4, 5e-4)) == "0.0001,0.0005"


def test_check_exits_zero(small_ini, capsys):
    assert main(["check", "--config", str(small_ini)]) == 0
    out = capsys.readouterr().out
    assert "check: all suites passed" in out and "FAIL" not in out.replace("FAILURES", "")


def test_eval_identity_prediction(tmp_path, dataset):
    pred = tmp_path / "pred"
    pred.mkdir()
    for s in load_dataset(dataset).test:
        Image.fromarray(s.mask.astype(np.uint16) * 65535).save(pred / f"{s.name}.png")
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--predictions", str(pred), "--out-dir", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["object"]["f1"] == 1.0 and report["object"]["fa_per_image"] == 0.0


def test_train_infer_eval_pipeline(tmp_path, small_ini, dataset):
    run = tmp_path / "run"
    assert main(["train", "--config", str(small_ini), "--data", str(dataset), "--out-dir", str(run)]) == 0
    assert {p.name for p in run.iterdir()} == {"run.json", "train_log.csv", "best.ckpt", "last.ckpt"}
    pred = tmp_path / "pred"
    assert main(["infer", "--config", str(small_ini), "--data", str(dataset), "--checkpoint", str(run / "best.ckpt"),
                 "--out-dir", str(pred), "--significance"]) == 0
    names = sorted(p.stem for p in (pred / "scores").iterdir())
    assert names == sorted(p.stem for p in (pred / "significance").iterdir())
    sig, n_test = read_significance(next((pred / "significance").iterdir()))
    assert sig.shape == (16, 16) and n_test == 256
    a, b = tmp_path / "ev_ckpt", tmp_path / "ev_pred"
    assert main(["eval", "--config", str(small_ini), "--data", str(dataset),
                 "--checkpoint", str(run / "best.ckpt"), "--out-dir", str(a)]) == 0
    assert main(["eval", "--config", str(small_ini), "--data", str(dataset),
                 "--predictions", str(pred), "--out-dir", str(b)]) == 0
    ra, rb = (json.loads((d / "metrics.json").read_text()) for d in (a, b))
    # 16-bit quantization of the saved scores can only move pixels sitting on the threshold
    assert ra["object"]["tp"] == rb["object"]["tp"] and ra["object"]["fp"] == rb["object"]["fp"]
    assert main(["calibrate", "--config", str(small_ini), "--data", str(dataset),
                 "--checkpoint", str(run / "best.ckpt"), "--out-dir", str(tmp_path / "cal")]) == 0
    cal = json.loads((tmp_path / "cal" / "calibration.json").read_text())
    assert cal["alpha"] == 5e-4 and cal["alpha_recalib"] == 0.003 and "recalibrated" in cal


def test_descriptor_replay_is_identical(tmp_path, small_ini, dataset):
    first = tmp_path / "first"
    assert main(["train", "--config", str(small_ini), "--data", str(dataset), "--seed", "4",
                 "--out-dir", str(first)]) == 0
    desc = json.loads((first / "run.json").read_text())
    assert desc["seed"] == 4 and desc["command"] == "train" and "code_version" in desc
    second = tmp_path / "second"
    assert main(["train", "--config", str(first / "run.json"), "--out-dir", str(second)]) == 0
    for name in ("train_log.csv", "best.ckpt", "last.ckpt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_single_combo_ablation_equals_train_plus_eval(tmp_path, small_ini, dataset):
    ini = tmp_path / "one.ini"
    ini.write_text(SMALL + "[ablate]\nsigma_forms = dense\nmultiscale = off\neca = off\nreg = on\nalphas = 0.001\n")
    abl = tmp_path / "abl"
    assert main(["ablate", "--config", str(ini), "--data", str(dataset), "--out-dir", str(abl)]) == 0
    with open(abl / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    run, ev = tmp_path / "run", tmp_path / "ev"
    flags = ["--config", str(small_ini), "--data", str(dataset), "--sigma-form", "dense", "--multiscale", "off",
             "--eca", "off", "--alpha", "0.001"]
    assert main(["train", *flags, "--out-dir", str(run)]) == 0
    assert main(["eval", *flags, "--checkpoint", str(run / "best.ckpt"), "--out-dir", str(ev)]) == 0
    ref = json.loads((ev / "metrics.json").read_text())["object"]
    for key in ("precision", "recall", "f1", "ap", "fa_per_image"):
        assert float(rows[0][key]) == pytest.approx(ref[key], abs=0)
    assert int(rows[0]["best_epoch"]) >= 1


def test_nfa_curve_command(tmp_path):
    assert main(["nfa-curve", "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "nfa_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "log10_nfa", "significance"] and len(rows) == 202
    assert [float(v) for v in rows[101]] == [0.0, 0.0, 0.0]


def test_missing_checkpoint_is_an_io_error(tmp_path, capsys):
    assert main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), "--out-dir", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error IO:")
