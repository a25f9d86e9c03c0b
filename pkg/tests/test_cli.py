import csv
import json

import pytest

from dpcpheno.cli import run

TINY_TOML = """
[train]
epochs = 1
batch_size = 8

[model]
cnn_stem_out = 8
inception_split = [3, 3, 2]
cnn_token_dim = 16
vit_dim = 16
vit_heads = 2
vit_blocks = 1
fused_dim = 16
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthesized dataset and a one-epoch tiny model trained from it through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY_TOML)
    assert run(["synth", "--n", "10", "--seed", "3", "--out", str(root / "syn")]) == 0
    assert run(["train", "--data", str(root / "syn" / "dataset"), "--config", str(cfg),
                "--out", str(root / "run")]) == 0
    return root


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["eval", "--out", str(tmp_path / "e")]) == 1
    assert "usage" in capsys.readouterr().err
    assert not (tmp_path / "e").exists()
    assert run(["synth", "--out", str(tmp_path / "s"), "--bogus-flag"]) == 1
    assert "--bogus-flag" in capsys.readouterr().err
    assert run(["frobnicate"]) == 1
    assert run(["synth", "--out", str(tmp_path / "s"), "--split", "0.5,0.5"]) == 1
    assert not (tmp_path / "s").exists()


def test_synth_hashes_repeat(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["synth", "--n", "30", "--seed", "7", "--out", str(a)]) == 0
    assert run(["synth", "--n", "30", "--seed", "7", "--out", str(b)]) == 0
    ma = json.loads((a / "artifacts.json").read_text())
    mb = json.loads((b / "artifacts.json").read_text())
    assert ma == mb and "dataset/images.bin" in ma["artifacts"]
    assert "timing.json" not in ma["artifacts"]
    oracle = json.loads((a / "oracle.json").read_text())
    assert set(oracle["ceilings"]) == {"train", "val", "test"}


def test_train_artifacts(workspace):
    run_dir = workspace / "run"
    manifest = json.loads((run_dir / "artifacts.json").read_text())["artifacts"]
    assert {"best/params.bin", "last/checkpoint.json", "train_log.json", "train_config.json"} <= set(manifest)
    assert (run_dir / "timing.json").exists()


def test_train_is_seed_deterministic(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "syn" / "dataset"), "--config", str(workspace / "tiny.toml")]
    assert run(args + ["--out", str(tmp_path / "again")]) == 0
    a = json.loads((workspace / "run" / "artifacts.json").read_text())
    b = json.loads((tmp_path / "again" / "artifacts.json").read_text())
    assert a == b


def test_eval_summarize_export(workspace, tmp_path):
    ck, data = workspace / "run" / "best", workspace / "syn" / "dataset"
    ev = tmp_path / "ev"
    assert run(["eval", "--checkpoint", str(ck), "--data", str(data), "--out", str(ev)]) == 0
    for name in ("report.json", "evidence.json", "per_marker.csv", "confusion.csv", "auc.csv", "roc_monocyte.csv"):
        assert (ev / name).exists(), name

    sm = tmp_path / "sm"
    assert run(["summarize", "--evidence", str(ev / "evidence.json"), "--out", str(sm)]) == 0
    text = (sm / "summary.txt").read_text()
    assert text.strip()
    down = tmp_path / "down"
    assert run(["summarize", "--evidence", str(ev / "evidence.json"), "--endpoint", "http://127.0.0.1:9/x",
                "--timeout", "0.2", "--out", str(down)]) == 0
    assert (down / "summary.txt").read_text() == text

    fig = tmp_path / "fig"
    assert run(["export-figures", "--checkpoint", str(ck), "--data", str(data), "--out", str(fig)]) == 0
    with open(fig / "scatter_cd45.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "true_class", "predicted_class", "measured", "predicted"] and len(rows) > 1
    assert (fig / "violin_long.csv").exists() and (fig / "tables" / "per_marker.csv").exists()


def test_eval_missing_split_is_usage_error(workspace, tmp_path):
    assert run(["eval", "--checkpoint", str(workspace / "run" / "best"), "--data", str(workspace / "syn" / "dataset"),
                "--split", "holdout", "--out", str(tmp_path / "x")]) == 1


def test_runtime_error_exit_2_and_cleanup(tmp_path):
    out = tmp_path / "fail"
    assert run(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(tmp_path / "nope"),
                "--out", str(out)]) == 2
    assert not out.exists()


def test_ablate_empty_cells(workspace, tmp_path):
    out = tmp_path / "abl"
    assert run(["ablate", "--data", str(workspace / "syn" / "dataset"), "--config", str(workspace / "tiny.toml"),
                "--variants", "cls_only,reg_only", "--seeds", "0", "--out", str(out)]) == 0
    with open(out / "ablation.csv") as fh:
        rows = {r["variant"]: r for r in csv.DictReader(fh)}
    assert rows["cls_only"]["pearson_r_mean"] == "" and rows["cls_only"]["accuracy_mean"] != ""
    assert rows["reg_only"]["accuracy_mean"] == "" and rows["reg_only"]["rmse_mean"] != ""
    assert run(["ablate", "--data", str(workspace / "syn" / "dataset"), "--variants", "bogus",
                "--out", str(tmp_path / "bad")]) == 1


def test_gradcheck_ops_only(tmp_path):
    out = tmp_path / "gc"
    assert run(["gradcheck", "--skip-model", "--out", str(out)]) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] and report["max_rel_error"]["float64"] < 1e-4
    assert len(report["checks"]) == 2 * 38
