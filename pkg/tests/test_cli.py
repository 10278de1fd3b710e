import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from mkoie import cli
from mkoie.degrade import read_image, write_image
from mkoie.train import load_checkpoint

from .helpers import synthetic_scene

SMOKE = """\
# tiny profile
seed=1
synth.patch=32
synth.crops_per_image=1
synth.mode=random
model.base_channels=8
model.encoder_stages=1
model.rlb_per_stage=1
train.epochs=2
train.batch_size=2
train.lr_drop_epochs=
train.mode=interleaved
loss.extractor_width=0.125
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "clean").mkdir()
    for i in range(2):
        write_image(root / "clean" / f"s{i}.png", synthetic_scene(64, 64, seed=i))
    (root / "smoke.cfg").write_text(SMOKE)
    return root


@pytest.fixture(scope="module")
def dataset(workspace):
    data = workspace / "data"
    rc = cli.main(["synth", "--config", str(workspace / "smoke.cfg"), "--set", f"paths.clean={workspace / 'clean'}",
                   "--data", str(data)])
    assert rc == 0
    return data


@pytest.fixture(scope="module")
def trained(workspace, dataset):
    out = workspace / "run"
    assert cli.main(["train", "--config", str(workspace / "smoke.cfg"), "--data", str(dataset), "--out", str(out)]) == 0
    return out


def test_config_parsing():
    raw = cli.parse_config_text("# c\n\nmodel.base_channels = 16\ntrain.lr_drop_epochs=10,20\n")
    cfg = cli.resolve_config(raw)
    assert cfg["model.base_channels"] == 16 and cfg["train.lr_drop_epochs"] == (10, 20)
    assert cfg["train.task"] == "nhie"
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("no separator here")
    with pytest.raises(cli.ConfigError):
        cli.resolve_config({"model.nonsense": "1"})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config({"model.base_channels": "many"})


def test_synth_layout_and_manifest(workspace, dataset):
    for task in ("id", "llie", "nhie"):
        assert len(list((dataset / task / "degraded").glob("*.png"))) == 2
        assert len(list((dataset / task / "clean").glob("*.png"))) == 2
    run = json.loads((dataset / "run_manifest.json").read_text())
    assert run["command"] == "synth" and run["seed"] == 1 and run["version"]


def test_synth_is_reproducible(workspace, dataset):
    again = workspace / "data_again"
    cli.main(["synth", "--config", str(workspace / "smoke.cfg"), "--set", f"paths.clean={workspace / 'clean'}",
              "--data", str(again)])
    assert sha(again / "manifest.jsonl") == sha(dataset / "manifest.jsonl")
    for p in sorted(dataset.glob("*/*/*.png")):
        assert sha(p) == sha(again / p.relative_to(dataset))


def test_synth_missing_clean_path_writes_nothing(workspace, capsys):
    out = workspace / "never"
    rc = cli.main(["synth", "--config", str(workspace / "smoke.cfg"), "--set", "paths.clean=/does/not/exist",
                   "--data", str(out)])
    assert rc == cli.EXIT_INVALID and not out.exists()
    assert "does not exist" in capsys.readouterr().err


def test_train_smoke_outputs(trained):
    assert sorted(p.name for p in trained.iterdir()) == ["checkpoint.ckpt", "metrics.jsonl", "run_manifest.json"]
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    assert {r["task"] for r in records} == {"id", "llie", "nhie"}
    assert load_checkpoint(trained / "checkpoint.ckpt").epoch == 2


def test_train_resume_continues(workspace, dataset, trained):
    out = workspace / "resume"
    args = ["train", "--config", str(workspace / "smoke.cfg"), "--data", str(dataset), "--out", str(out)]
    assert cli.main(args + ["--set", "train.epochs=1"]) == 0
    assert cli.main(args + ["--resume"]) == 0
    resumed = load_checkpoint(out / "checkpoint.ckpt")
    straight = load_checkpoint(trained / "checkpoint.ckpt")
    assert resumed.epoch == 2 and resumed.global_step == straight.global_step
    for (k, a), (_, b) in zip(resumed.model.state_dict().items(), straight.model.state_dict().items()):
        assert np.array_equal(a.numpy(), b.numpy()), k


def test_train_invalid_task(workspace, dataset, capsys):
    out = workspace / "bad_task"
    rc = cli.main(["train", "--config", str(workspace / "smoke.cfg"), "--data", str(dataset), "--out", str(out),
                   "--set", "train.task=haze"])
    assert rc == cli.EXIT_INVALID and not out.exists()
    assert "id, llie, nhie" in capsys.readouterr().err
    assert cli.main(["train", "--task", "haze"]) == cli.EXIT_INVALID


def test_train_missing_resume_and_data(workspace, dataset, monkeypatch):
    base = ["train", "--config", str(workspace / "smoke.cfg")]
    assert cli.main(base + ["--data", str(dataset), "--out", str(workspace / "x"), "--resume"]) == cli.EXIT_INVALID
    monkeypatch.delenv(cli.DATA_ROOT_ENV, raising=False)
    assert cli.main(base + ["--out", str(workspace / "y")]) == cli.EXIT_INVALID


def test_data_root_from_environment(workspace, dataset, monkeypatch):
    monkeypatch.setenv(cli.DATA_ROOT_ENV, str(dataset))
    out = workspace / "env_run"
    assert cli.main(["train", "--config", str(workspace / "smoke.cfg"), "--out", str(out),
                     "--set", "train.epochs=1"]) == 0
    assert json.loads((out / "run_manifest.json").read_text())["config"]["paths.data"] == str(dataset)


def test_enhance_pads_and_is_byte_identical(workspace, trained):
    src = workspace / "odd.png"
    write_image(src, synthetic_scene(250, 250, seed=4))
    outs = []
    for k in range(2):
        out = workspace / f"enh{k}"
        rc = cli.main(["enhance", "--checkpoint", str(trained / "checkpoint.ckpt"), "--task", "llie",
                       "--out", str(out), str(src)])
        assert rc == 0
        outs.append(out / "odd.png")
    assert read_image(outs[0]).shape == (3, 250, 250)
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_enhance_missing_checkpoint(workspace):
    rc = cli.main(["enhance", "--checkpoint", str(workspace / "nope.ckpt"), "--task", "id",
                   "--out", str(workspace / "e"), str(workspace / "clean")])
    assert rc == cli.EXIT_INVALID


def test_eval_writes_report(workspace, dataset, trained, capsys):
    out = workspace / "eval"
    rc = cli.main(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"), "--data", str(dataset),
                   "--out", str(out)])
    assert rc == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0].startswith("task,n,psnr_mean") and [ln.split(",")[0] for ln in lines[1:]] == ["id", "llie", "nhie"]
    assert "PSNR" in capsys.readouterr().out
    assert len((out / "per_sample.jsonl").read_text().splitlines()) == 6


def test_runtime_failure_exit_code(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    rc = cli.main(["enhance", "--checkpoint", str(bad), "--task", "id", "--out", str(tmp_path / "o"),
                   str(workspace / "clean")])
    assert rc == cli.EXIT_RUNTIME


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mkoie.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
