# backend/tests/test_cli.py
import csv
import json

import pytest

from app.cli import main
from app.utils.errors import FormatError, exit_code_for


@pytest.fixture
def config_path(tiny_config, tmp_path):
    path = tmp_path / "tiny.json"
    tiny_config.with_overrides({"epochs": 1}).save(path)
    return path


def test_gen_scenes_writes_files(config_path, tmp_path):
    out = tmp_path / "scenes"
    code = main(["gen-scenes", "--config", str(config_path), "--out", str(out), "--count", "2"])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["scene_0000.posc", "scene_0001.posc"]


def test_train_then_eval(config_path, tmp_path, capsys):
    scenes = tmp_path / "scenes"
    ckpt = tmp_path / "model.pocc"
    log = tmp_path / "log.csv"
    result = tmp_path / "result.json"
    gen = ["gen-scenes", "--config", str(config_path), "--out", str(scenes), "--count", "2"]
    assert main(gen) == 0
    code = main(
        [
            "train",
            "--config",
            str(config_path),
            "--scenes",
            str(scenes),
            "--out",
            str(ckpt),
            "--log",
            str(log),
        ]
    )
    assert code == 0
    rows = list(csv.DictReader(log.open()))
    assert [row["epoch"] for row in rows] == ["1"]

    assert main(["eval", "--ckpt", str(ckpt), "--scenes", str(scenes), "--out", str(result)]) == 0
    assert json.loads(result.read_text())["scenes"] == 2
    assert '"miou"' in capsys.readouterr().out


def test_eval_missing_checkpoint_is_an_io_error(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.pocc"), "--scenes", str(tmp_path)]) == 2


def test_eval_corrupt_checkpoint_is_an_io_error(tmp_path):
    path = tmp_path / "bad.pocc"
    path.write_bytes(b"POCC")
    assert main(["eval", "--ckpt", str(path), "--scenes", str(tmp_path)]) == 2


def test_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "softmax_with_temperature", "--instances", "2"]) == 0
    assert "softmax_with_temperature" in capsys.readouterr().out


def test_unknown_op_is_a_validation_failure():
    assert main(["oracle-check", "--op", "no_such_check"]) == 1


def test_invalid_config_is_a_validation_failure(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"d": 0}}))
    assert main(["gen-scenes", "--config", str(path), "--count", "1", "--out", str(tmp_path)]) == 1


def test_ablate_from_grid_file(config_path, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"seeds": [0], "rows": [{"name": "base"}]}))
    out = tmp_path / "runs.csv"
    code = main(
        ["ablate", "--config", str(config_path), "--grid", str(grid), "--out", str(out)]
    )
    assert code == 0
    assert [row["name"] for row in csv.DictReader(out.open())] == ["base"]
    assert "base" in out.with_suffix(".txt").read_text()


@pytest.mark.parametrize("with_log", [False, True])
def test_train_zero_epochs(tiny_config, tmp_path, with_log):
    config = tmp_path / "zero.json"
    tiny_config.with_overrides({"epochs": 0}).save(config)
    scenes = tmp_path / "scenes"
    assert main(["gen-scenes", "--config", str(config), "--out", str(scenes), "--count", "1"]) == 0
    ckpt = tmp_path / "model.pocc"
    args = ["train", "--config", str(config), "--scenes", str(scenes), "--out", str(ckpt)]
    if with_log:
        args += ["--log", str(tmp_path / "log.csv")]
    assert main(args) == 0
    assert ckpt.exists()
    assert not (tmp_path / "log.csv").exists()


def test_value_errors_are_validation_failures():
    assert exit_code_for(ValueError("bad value")) == 1
    assert exit_code_for(FormatError("bad magic")) == 2
    with pytest.raises(KeyError):
        exit_code_for(KeyError("unexpected"))
