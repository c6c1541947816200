import copy
import json
import subprocess
import sys

import numpy as np
import pytest

from preqsel import cli
from preqsel.config import ConfigError, parse_config

BASE = {
    "name": "tiny",
    "dataset": {"source": "synth", "num_classes": 3, "dim": 3, "examples_per_class": 40, "separation": 2.0, "seed": 1},
    "eval": {"size": 30, "seed": 0},
    "models": {"linear": [], "mlp": [{"type": "dense", "width": 8}]},
    "optimizer": {"kind": "adam", "learning_rates": [0.01], "epochs": 4, "batch_size": 16},
    "prefix_sizes": [20, 60],
    "seeds": [0, 1],
    "widths": [4, 16],
    "n_boot": 50,
}


def write_config(tmp_path, doc=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc or BASE))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_missing_dataset_path_names_field(tmp_path, capsys):
    doc = copy.deepcopy(BASE)
    doc["dataset"] = {"source": "idx", "labels": "x"}
    assert run("train", "--config", write_config(tmp_path, doc), "--out", tmp_path) == 1
    assert "dataset.images" in capsys.readouterr().err


def test_config_errors_exit_one(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.json") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("mdl", "--config", bad) == 1
    doc = copy.deepcopy(BASE)
    del doc["seeds"]
    assert run("mdl", "--config", write_config(tmp_path, doc)) == 1
    assert "seeds" in capsys.readouterr().err
    doc = copy.deepcopy(BASE)
    doc["models"]["mlp"] = [{"type": "lstm"}]
    assert run("mdl", "--config", write_config(tmp_path, doc)) == 1


def test_usage_error_exits_one():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 1


def test_runtime_failure_exits_two(tmp_path, capsys):
    doc = copy.deepcopy(BASE)
    doc["schedule"] = {"boundaries": [10, 50]}  # does not cover the dataset
    assert run("mdl", "--config", write_config(tmp_path, doc), "--out", tmp_path / "o") == 2
    assert "error" in capsys.readouterr().err


def test_train_outputs_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("train", "--config", cfg, "--out", tmp_path / "b", "--jobs", "2") == 0
    hist = (tmp_path / "a" / "train_mlp_s0_history.csv").read_text().splitlines()
    assert hist[0].startswith("# config=") and hist[0].endswith("seeds=0")
    assert hist[1] == "step,train_nats,calib_nats_raw,calib_nats_cal,calib_err"
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    summary = json.loads((tmp_path / "a" / "train_mlp_s1_summary.json").read_text())
    flat = np.load(tmp_path / "a" / "train_mlp_s1_params.npy")
    assert flat.size == sum(int(np.prod(s)) for s in summary["param_shapes"])
    assert summary["config"] == BASE


def test_seed_offset_changes_seeds(tmp_path):
    assert run("train", "--config", write_config(tmp_path), "--out", tmp_path, "--seed-offset", 5) == 0
    assert (tmp_path / "train_linear_s5_history.csv").exists()
    assert (tmp_path / "train_linear_s6_history.csv").exists()


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("PREQSEL_OUT", str(tmp_path / "env"))
    assert run("profile", "--config", write_config(tmp_path)) == 0
    lines = (tmp_path / "env" / "profile.csv").read_text().splitlines()
    assert lines[1] == "prefix_size,model,seed,nats,error_rate"
    assert len(lines) == 2 + 2 * 2 * 2


def test_snr_and_width_sweep(tmp_path):
    cfg = write_config(tmp_path)
    assert run("snr", "--config", cfg, "--out", tmp_path) == 0
    rows = (tmp_path / "snr.csv").read_text().splitlines()
    assert rows[1] == "prefix_size,pair,delta,variance,snr" and rows[2].startswith("20,linear-mlp,")
    assert run("width-sweep", "--config", cfg, "--out", tmp_path) == 0
    rows = (tmp_path / "width_sweep.csv").read_text().splitlines()
    assert rows[1] == "width,prefix_size,seed,nats,error_rate" and len(rows) == 2 + 2 * 2 * 2


def test_mdl_identical_models_give_zero_cell(tmp_path):
    doc = copy.deepcopy(BASE)
    doc["models"] = {"a": [{"type": "dense", "width": 8}], "b": [{"type": "dense", "width": 8}]}
    doc["seeds"] = [0]
    assert run("mdl", "--config", write_config(tmp_path, doc), "--out", tmp_path) == 0
    ev = json.loads((tmp_path / "evidence.json").read_text())
    assert ev["dl_nats"][0] == ev["dl_nats"][1]
    assert (tmp_path / "evidence.csv").read_text().splitlines()[3].startswith("b,0.00 ± ")
    ledger = (tmp_path / "ledger_a_s0.csv").read_text().splitlines()
    assert ledger[0].startswith("# config=") and ledger[1] == "block,n_train,example_index,nats"


def test_encode_decode_round_trip(tmp_path):
    doc = copy.deepcopy(BASE)
    doc["seeds"] = [3]
    cfg = write_config(tmp_path, doc)
    assert run("encode", "--config", cfg, "--out", tmp_path, "--model", "mlp") == 0
    msg = tmp_path / "mlp_s3.pqdl"
    assert run("decode", "--config", cfg, "--out", tmp_path, msg) == 0
    rows = (tmp_path / "mlp_s3_labels.csv").read_text().splitlines()[2:]
    ds = parse_config(doc).load_dataset()
    assert [int(r.split(",")[1]) for r in rows] == ds.y.tolist()
    blob = bytearray(msg.read_bytes())
    blob[-3] ^= 0xFF
    (tmp_path / "bad.pqdl").write_bytes(bytes(blob))
    assert run("decode", "--config", cfg, "--out", tmp_path, tmp_path / "bad.pqdl") == 2


def test_parse_config_validation():
    with pytest.raises(ConfigError, match="prefix_sizes"):
        parse_config({**BASE, "prefix_sizes": [60, 20]})
    with pytest.raises(ConfigError, match="width_model"):
        parse_config({**BASE, "width_model": "nope"})
    with pytest.raises(ConfigError, match="dataset.source"):
        parse_config({**BASE, "dataset": {"source": "hdf5"}})
    assert parse_config(BASE).digest == parse_config(copy.deepcopy(BASE)).digest


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "preqsel.cli", "mdl", "--config", tmp_path / "x.json"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "config error" in proc.stderr
