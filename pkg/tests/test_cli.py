import json

import pytest

from disa import cli
from disa.config import load_config
from disa.reporting import read_csv

TINY = ["--set", "encoder.d=16", "--set", "encoder.layers=2", "--set", "encoder.heads=2",
        "--set", "pretrain.steps=200", "--set", "optim.epochs=1", "--set", "data.samples_per_class=24",
        "--set", "data.test_per_class=4", "--set", "data.k_shot=2", "--set", "data.n_classes=6",
        "--seed", "1"]


def run(*args):
    return cli.main(list(args))


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("protocol", "--out", str(tmp_path), "--set", "loss.nosuch=1") == 2
    assert run("protocol", "--out", str(tmp_path), "--set", "loss.lambda=abc") == 2
    assert run("protocol", "--out", str(tmp_path), "--config", str(tmp_path / "missing.cfg")) == 2
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_protocol_writes_reports_and_snapshot(tmp_path):
    cfg = tmp_path / "b2n.cfg"
    cfg.write_text("[run]\nprotocol = base-to-novel\n")
    out = tmp_path / "out"
    assert run("protocol", "--config", str(cfg), "--out", str(out), *TINY, "--set", "loss.lambda=0") == 0
    for name in ("base-to-novel.json", "base-to-novel.csv", "base-to-novel_summary.csv",
                 "base-to-novel_trace.csv", "base-to-novel.png", "base-to-novel_losses.png", cli.SNAPSHOT):
        assert (out / name).is_file(), name
    snap = load_config(out / cli.SNAPSHOT)
    assert snap.loss.lambda_ == 0.0 and snap.run.seeds == (1,)
    rows = read_csv(out / "base-to-novel.csv")
    assert len(rows) == 1 and float(rows[0]["lambda"]) == 0.0
    payload = json.loads((out / "base-to-novel.json").read_text())
    assert payload["config_digest"] == snap.digest()


def test_default_output_root_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DISA_OUT", str(tmp_path / "root"))
    assert run("sweep", "lambda", *TINY, "--set", "run.figures=false") == 0
    rows = read_csv(tmp_path / "root" / "sweep" / "lambda-sweep.csv")
    assert [float(r["lambda"]) for r in rows] == [0, 1, 4, 8, 12, 16]


def test_pretrain_train_eval_cycle(tmp_path):
    out = tmp_path / "cycle"
    assert run("pretrain", "--out", str(out), *TINY) == 0
    assert (out / "backbone.ckpt").is_file()
    assert run("train", "--out", str(out), *TINY, "--set", f"run.backbone={out / 'backbone.ckpt'}") == 0
    ck = out / "prompts_seed1.ckpt"
    before = ck.read_bytes()
    assert run("train", "--out", str(out), *TINY) == 1          # refuses to overwrite
    assert ck.read_bytes() == before
    assert run("eval", "--out", str(out / "eval"), "--checkpoint", str(ck), *TINY) == 0
    rows = read_csv(out / "eval" / "base-to-novel.csv")
    assert rows[0]["condition"] == "checkpoint" and 0 <= float(rows[0]["hm"]) <= 100


def test_eval_missing_checkpoint_is_runtime_error(tmp_path):
    assert run("eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope.ckpt"), *TINY) == 1


def test_dump_saliency(tmp_path):
    assert run("dump-saliency", "--out", str(tmp_path), *TINY) == 0
    rows = read_csv(tmp_path / "saliency.csv")
    assert rows and len(rows[0]["alpha"].split()) == 16 and len(rows[0]["masked"].split()) == 4


def test_gradcheck_command(tmp_path, capsys):
    assert run("gradcheck", "--out", str(tmp_path), "--cases", "3") == 0
    table = (tmp_path / "gradcheck.txt").read_text()
    assert "matmul" in table and "FAIL" not in table
