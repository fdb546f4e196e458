import json
import subprocess
import sys

import numpy as np
import pytest

from fspnet.cli import main

TINY_CONFIG = """\
image_h = 32
image_w = 32
embed_dim = 8
n_vertices = 2
decoder_width = 4
batch_size = 2
max_steps = 2
epochs = 1
seed = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(TINY_CONFIG)
    assert main(["gen", "--count", "3", "--size", "32", "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "cfg.txt"), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_gen_layout(workspace):
    assert sorted(p.name for p in (workspace / "data" / "images").iterdir()) == ["0000.png", "0001.png", "0002.png"]
    assert len(list((workspace / "data" / "masks").iterdir())) == 3


def test_train_outputs(workspace):
    assert (workspace / "run" / "final.ckpt").exists()
    assert len((workspace / "run" / "losses.txt").read_text().split()) == 2


def test_predict_with_laterals(workspace):
    out = workspace / "pred"
    rc = main(["predict", "--ckpt", str(workspace / "run" / "final.ckpt"), "--images",
               str(workspace / "data" / "images"), "--out", str(out), "--dump-laterals"])
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert names[:5] == ["0000.png", "0000_P0.png", "0000_P1.png", "0000_P2.png", "0001.png"]
    assert len(names) == 12


def test_predict_twice_bit_identical(workspace):
    ck = str(workspace / "run" / "final.ckpt")
    imgs = str(workspace / "data" / "images")
    main(["predict", "--ckpt", ck, "--images", imgs, "--out", str(workspace / "p1")])
    main(["predict", "--ckpt", ck, "--images", imgs, "--out", str(workspace / "p2")])
    for f in (workspace / "p1").iterdir():
        assert f.read_bytes() == (workspace / "p2" / f.name).read_bytes()


def test_eval_reused_predictions_match(workspace):
    ck = str(workspace / "run" / "final.ckpt")
    data = str(workspace / "data")
    main(["predict", "--ckpt", ck, "--images", data + "/images", "--out", str(workspace / "p3")])
    assert main(["eval", "--ckpt", ck, "--data", data, "--report", str(workspace / "fresh.json")]) == 0
    assert main(["eval", "--ckpt", ck, "--data", data, "--report", str(workspace / "reuse.json"),
                 "--preds", str(workspace / "p3")]) == 0
    assert (workspace / "fresh.json").read_text() == (workspace / "reuse.json").read_text()
    assert len(json.loads((workspace / "fresh.json").read_text())["per_image"]) == 3
    assert main(["eval", "--ckpt", ck, "--data", data, "--report", str(workspace / "r.csv")]) == 0
    assert (workspace / "r.csv").read_text().splitlines()[-1].startswith("AGGREGATE")


def test_schedule_dump(capsys):
    assert main(["schedule", "--dump"]) == 0
    out = capsys.readouterr().out
    assert "aim_counts: [6, 3, 2, 1]  total: 12" in out


def test_exit_code_config_error(workspace, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("unknown_key = 1\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 2


def test_exit_code_data_error(workspace, tmp_path):
    rc = main(["train", "--config", str(workspace / "cfg.txt"), "--data", str(tmp_path / "missing"), "--out", str(tmp_path)])
    assert rc == 3
    assert main(["gen", "--count", "1", "--size", "40", "--out", str(tmp_path / "g")]) == 3


def test_exit_code_divergence(workspace, tmp_path, monkeypatch):
    # layer norms and the clamped BCE keep the real loss finite even at absurd learning rates
    from fspnet.model import FSPNet
    from fspnet.tensor import Tensor

    monkeypatch.setattr(FSPNet, "loss", lambda self, images, masks: Tensor(np.array(np.nan)))
    rc = main(["train", "--config", str(workspace / "cfg.txt"), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")])
    assert rc == 4


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "fspnet.cli", "schedule", "--dump"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.count("\n") == 15
