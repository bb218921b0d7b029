import json

import numpy as np
import pytest

from tpconv.cli import cmd_ablate, cmd_eval, cmd_generate, cmd_train, git_blob_hash, main
from tpconv.data import read_ndjson, write_ndjson
from tpconv.models import load_checkpoint, save_checkpoint

SMALL = """
data:
  n_samples: {n}
model:
  p: 4
  conv_channels: [8]
  latent_dim: 8
  head_hidden: 8
train:
  max_epochs: 3
  batch_size: 32
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL.format(n=120))
    return p


@pytest.fixture
def interp_data(tmp_path, small_cfg):
    return cmd_generate(small_cfg, tmp_path / "syn.ndjson", seed=0)


@pytest.fixture
def cls_data(tmp_path, small_cfg):
    return cmd_generate(small_cfg, tmp_path / "cls.ndjson", seed=0, kind="cls")


def test_generate_default(tmp_path):
    a = tmp_path / "a.ndjson"
    b = tmp_path / "b.ndjson"
    assert main(["generate", "--out", str(a), "--seed", "4"]) == 0
    assert main(["generate", "--out", str(b), "--seed", "4"]) == 0
    assert len(a.read_text().splitlines()) == 1000
    assert git_blob_hash(a) == git_blob_hash(b)
    meta = json.loads((tmp_path / "a.ndjson.meta.json").read_text())
    assert meta["seed"] == 4 and meta["time_map"] == {"lo": 0.0, "hi": 1.0}


def test_generate_invalid_split(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("data:\n  split: [0.7, 0.2]\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x.ndjson")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:") and "split" in err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "x"])
    assert exc.value.code == 2
    assert "error:" in capsys.readouterr().err
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model: [1, 2\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x.ndjson")]) == 2


def test_train_then_eval(tmp_path, interp_data, small_cfg, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--task", "interp", "--data", str(interp_data), "--config", str(small_cfg),
               "--out", str(out), "--threads", "1"])
    assert rc == 0
    for name in ("checkpoint.npz", "metrics.csv", "summary.json", "manifest.json"):
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,metric,value"
    assert len(lines) == 1 + 2 * summary["epochs"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["data_hash"] == git_blob_hash(interp_data)
    assert manifest["config"]["train"]["max_epochs"] == 3
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out), "--data", str(interp_data), "--split", "val"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert abs(result["metrics"]["mse"] - summary["val_metrics"]["mse"]) <= 1e-12


def test_train_with_observed_fraction(tmp_path, interp_data, small_cfg):
    out = tmp_path / "run"
    summary = cmd_train("interp", interp_data, small_cfg, out, observed_fraction=0.5)
    again = cmd_eval(out, interp_data, "test")
    assert abs(again["metrics"]["mse"] - summary["test_metrics"]["mse"]) <= 1e-12


def test_train_missing_label(tmp_path, interp_data, small_cfg, capsys):
    rc = main(["train", "--task", "cls", "--data", str(interp_data), "--config", str(small_cfg),
               "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "missing label" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure(tmp_path, interp_data, small_cfg, capsys):
    # values near 1e200 overflow the squared error to inf on the first batch
    recs = read_ndjson(interp_data)
    for r in recs:
        r.values = r.values * 1e200
    huge = tmp_path / "huge.ndjson"
    write_ndjson(recs, huge)
    rc = main(["train", "--data", str(huge), "--config", str(small_cfg), "--out", str(tmp_path / "r")])
    assert rc == 3
    assert capsys.readouterr().err.startswith("error: numeric failure")
    assert (tmp_path / "r" / "checkpoint.npz").is_file()


def test_eval_shape_mismatch(tmp_path, interp_data, small_cfg, capsys):
    out = tmp_path / "run"
    cmd_train("interp", interp_data, small_cfg, out)
    model, extra = load_checkpoint(out / "checkpoint.npz")
    model.params["proj.weight"] = model.params["proj.weight"][:, :-1]
    save_checkpoint(model, out / "checkpoint.npz", extra)
    assert main(["eval", "--checkpoint", str(out), "--data", str(interp_data)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_eval_directory_reports_mean_std(tmp_path, cls_data, small_cfg):
    for s in (1, 2):
        cmd_train("cls", cls_data, small_cfg, tmp_path / "runs" / f"seed{s}", seed=s)
    res = cmd_eval(tmp_path / "runs", cls_data)
    assert res["n_runs"] == 2
    aucs = [r["metrics"]["auc"] for r in res["runs"]]
    assert res["mean"]["auc"] == pytest.approx(np.mean(aucs))
    assert res["std"]["auc"] == pytest.approx(np.std(aucs, ddof=1))


def test_eval_missing_checkpoint(tmp_path, interp_data, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(interp_data)]) == 2
    assert main(["export-plot", "--run-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "p.json")]) == 2


def test_ablate_single_row_and_rerun(tmp_path, cls_data, small_cfg):
    csv1 = tmp_path / "a1.csv"
    csv2 = tmp_path / "a2.csv"
    cmd_ablate(cls_data, small_cfg, ["sin+cos"], csv1, task="cls", n_seeds=1)
    cmd_ablate(cls_data, small_cfg, ["sin+cos"], csv2, task="cls", n_seeds=1)
    lines = csv1.read_text().splitlines()
    assert lines[0] == "function_set,seed,metric,value"
    assert len(lines) == 2 and lines[1].startswith("sin+cos,0,auc,")
    assert csv1.read_bytes() == csv2.read_bytes()
    summary = json.loads((tmp_path / "a1.summary.json").read_text())
    assert summary["sin+cos"]["n"] == 1


def test_ablate_unknown_function(tmp_path, cls_data, capsys):
    rc = main(["ablate", "--data", str(cls_data), "--out", str(tmp_path / "a.csv"), "--functions", "sin+sine"])
    assert rc == 2
    assert "sine" in capsys.readouterr().err


def test_export_plot(tmp_path, small_cfg):
    data = cmd_generate(None, tmp_path / "syn.ndjson", seed=0)
    cmd_ablate(data, small_cfg, ["sin", "lin"], tmp_path / "ab.csv", task="interp", n_seeds=1)
    out = tmp_path / "plot.json"
    assert main(["export-plot", "--run-dir", str(tmp_path / "ab_runs"), "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert sorted(payload["functions"]) == ["lin", "sin"]
    assert len(payload["samples"]) == 3
    for s in payload["samples"]:
        assert len(s["grid_times"]) == 100 and len(s["truth"]) == 100
        assert len(s["observed_times"]) == 20 and len(s["observed_values"]) == 20
        assert all(len(v) == 20 for v in s["reconstructions"].values())
    out2 = tmp_path / "plot2.json"
    main(["export-plot", "--run-dir", str(tmp_path / "ab_runs"), "--out", str(out2)])
    assert [s["id"] for s in json.loads(out2.read_text())["samples"]] == [s["id"] for s in payload["samples"]]


def test_ndjson_written_by_generate_round_trips(interp_data, tmp_path):
    recs = read_ndjson(interp_data)
    write_ndjson(recs, tmp_path / "copy.ndjson")
    assert (tmp_path / "copy.ndjson").read_bytes() == interp_data.read_bytes()
