import pytest
import yaml

from guidedfusion.config import HOME_ENV, RESOLVED_NAME, ConfigError, load_file, resolve
from guidedfusion.losses import LossWeights


def test_precedence_flags_over_file_over_defaults():
    rc = resolve("train", {"epochs": 5, "lr": 3e-4}, {"epochs": 7, "seed": None})
    assert rc["epochs"] == 7 and rc.sources["epochs"] == "flag"
    assert rc["lr"] == 3e-4 and rc.sources["lr"] == "file"
    assert rc["seed"] == 0 and rc.sources["seed"] == "default"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        resolve("train", {"epoch": 3})
    with pytest.raises(ConfigError):
        resolve("launch")


def test_builds_typed_configs():
    rc = resolve("train", {"preset": "medium", "lambda_ssim": 0.25, "max_steps": 9}, {})
    tc = rc.train_config("ck")
    assert tc.net.base_width == 8 and tc.max_steps == 9 and tc.checkpoint_dir == "ck"
    assert tc.loss_weights == LossWeights(lambda_ssim=0.25)
    assert resolve("train", {"base_width": 5}).net_config().base_width == 5
    with pytest.raises(ConfigError):
        resolve("train", {"preset": "giant"}).net_config()


def test_resolved_file_round_trips(tmp_path):
    rc = resolve("train", {"epochs": 3}, {"data": "d", "out": str(tmp_path)})
    path = rc.write()
    assert path == tmp_path / RESOLVED_NAME
    doc = yaml.safe_load(path.read_text())
    assert doc["command"] == "train" and doc["sources"]["data"] == "flag"
    again = resolve("train", load_file(path, "train"))
    assert again.values == rc.values
    with pytest.raises(ConfigError, match="written by"):
        load_file(path, "fuse")


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_file(tmp_path / "missing.yaml", "train")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_file(tmp_path / "list.yaml", "train")


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(HOME_ENV, str(tmp_path))
    assert resolve("eval").output_dir() == tmp_path / "eval"
    assert resolve("eval", {}, {"out": "x"}).output_dir().name == "x"
