"""Tests for config parsing and the binary checkpoint format."""

import numpy as np
import pytest

from ebmseg.checkpoint import (CheckpointError, MAGIC, load_checkpoint,
                               save_checkpoint)
from ebmseg.config import (ConfigError, ExperimentConfig, load_config,
                           parse_config_text)


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.k_minus == 5 and cfg.k_plus == 5
    assert cfg.delta_minus == 0.4 and cfg.delta_plus == 0.1
    assert cfg.sigma_z_sq == 1.0 and cfg.sigma_eps_sq == 0.3
    assert cfg.j_passes == 10
    assert cfg.lr_gen == 2.5e-5 and cfg.lr_ebm == 1.0e-5
    assert cfg.batch_size == 8


def test_parse_round_trip():
    cfg = ExperimentConfig(ratio="1/8", lr_gen=1e-3, np_mode=True)
    back = parse_config_text(cfg.to_text())
    assert back == cfg


def test_parse_overrides_and_comments():
    text = "# comment\nk_minus = 3\nratio = 1/4  # inline\n\nnp_mode = true\n"
    cfg = parse_config_text(text)
    assert cfg.k_minus == 3
    assert cfg.ratio == "1/4"
    assert cfg.np_mode is True


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("k_minsu = 3\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("k_minus = many\n")
    with pytest.raises(ConfigError):
        parse_config_text("np_mode = maybe\n")
    with pytest.raises(ConfigError):
        parse_config_text("batch_size = 0\n")
    with pytest.raises(ConfigError):
        parse_config_text("widths = 1,2,3\n")
    with pytest.raises((ConfigError, ValueError)):
        parse_config_text("ratio = 5/4\n")
    with pytest.raises(ConfigError):
        parse_config_text("just a line\n")


def test_zero_learning_rate_allowed():
    cfg = parse_config_text("lr_ebm = 0\n")
    assert cfg.lr_ebm == 0.0


def test_k_minus_zero_allowed():
    # the no-prior-Langevin ablation needs K- = 0
    assert parse_config_text("k_minus = 0\n").k_minus == 0


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train_seed = 9\nd_z = 4\n")
    cfg = load_config(str(path))
    assert cfg.train_seed == 9 and cfg.d_z == 4


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a/w": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(5,)),
        "scalar": np.array(3.0),
    }
    p1, p2 = str(tmp_path / "x.ckpt"), str(tmp_path / "y.ckpt")
    save_checkpoint(p1, "k = v\n", 42, 2, arrays)
    text, it, phase, back = load_checkpoint(p1)
    assert (text, it, phase) == ("k = v\n", 42, 2)
    for name in arrays:
        assert back[name].tobytes() == arrays[name].tobytes()
    save_checkpoint(p2, text, it, phase, back)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "x.ckpt")
    open(path, "wb").write(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, "", 0, 1, {})
    blob = bytearray(open(path, "rb").read())
    blob[len(MAGIC)] = 99
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, "k = v\n", 0, 1,
                    {"a": np.zeros((4, 4))})
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
