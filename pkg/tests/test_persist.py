import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from probshift.data import ingest
from probshift.errors import ChecksumError, ConfigError, VersionMismatchError
from probshift.persist import (config_from_dict, decode_checkpoint, encode_checkpoint, load_checkpoint, load_config,
                               load_data, save_checkpoint)
from probshift.space import toy_space
from probshift.trainer import TrainConfig, run


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array(np.pi), "c": np.array([np.inf, -0.0, 1e-300])}
    meta = {"epoch": 3, "name": "x"}
    save_checkpoint(tmp_path / "m.ckpt", arrays, meta)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.meta == meta and ck.arrays.keys() == arrays.keys()
    for k in arrays:
        assert ck.arrays[k].shape == arrays[k].shape
        assert ck.arrays[k].tobytes() == arrays[k].tobytes()
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=2, max_side=5), elements=st.floats(allow_nan=False)))
def test_roundtrip_property(x):
    ck = decode_checkpoint(encode_checkpoint({"x": x}, {}))
    assert ck.arrays["x"].shape == x.shape and ck.arrays["x"].tobytes() == x.tobytes()


@pytest.mark.parametrize("cut", [1, 33, 100])
def test_truncated_file_fails_checksum(cut):
    raw = encode_checkpoint({"a": np.arange(20.0)}, {"k": 1})
    with pytest.raises(ChecksumError):
        decode_checkpoint(raw[:-cut])


def test_flipped_byte_fails_checksum():
    raw = bytearray(encode_checkpoint({"a": np.arange(20.0)}, {}))
    raw[40] ^= 1
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(raw))


def test_version_mismatch():
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(encode_checkpoint({}, {}, version=2))


def test_resume_matches_uninterrupted(tmp_path):
    data = ingest({"synthetic": "blobs", "n_samples": 320})
    cfg = TrainConfig(epochs=4, batch_size=32, q=3, warmup_epochs=1, hidden=16, lr_b=0.05)
    space = toy_space(depth=3)
    full = run(cfg, space, data)
    run(cfg, space, data, out_dir=tmp_path, checkpoint_every=1, stop_after=2)
    resumed = run(cfg, space, data, resume_from=tmp_path / "checkpoints" / "epoch_0002.ckpt")
    assert resumed.supernet.snapshot() == full.supernet.snapshot()
    assert np.array_equal(resumed.dist.logits.data, full.dist.logits.data)
    assert [repr(sorted(r.items())) for r in resumed.metrics] == [repr(sorted(r.items())) for r in full.metrics]


def test_config_defaults_and_echo():
    cfg = config_from_dict({})
    assert cfg.space.depth == 6 and cfg.data["source"] == "synthetic:multiblobs"
    assert cfg.train == TrainConfig()
    cfg = config_from_dict({"seed": 3, "space": {"depth": 2}, "train": {"epochs": 1}})
    assert cfg.train.seed == 3 and "depth: 2" in cfg.echo()


@pytest.mark.parametrize("raw", [
    {"trian": {}},
    {"train": {"learning_rate": 0.1}},
    {"space": {"depht": 3}},
    {"space": {"ops": [{"candidates": [1, 2], "cost": 1}]}},
    {"data": {"path": "x.csv"}},
    {"binning": {"lo": 0, "hi": 10, "width": 1}},
    {"seed": 1, "train": {"seed": 2}},
    {"binning": {"lo": 0, "hi": 1000, "step": 10}},
    {"space": {"candidates": [3, 2]}},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_explicit_ops_space():
    cfg = config_from_dict({"space": {"ops": [{"candidates": [2, 4], "unit_cost": 2.0},
                                              {"candidates": [0, 4], "skippable": True}]}})
    assert cfg.space.min_resource == 4 and cfg.space.max_resource == 12


def test_load_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("train: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "ok.yaml").write_text("seed: 1\ndata:\n  source: synthetic:blobs\n  options: {n_samples: 100}\n")
    cfg = load_config(tmp_path / "ok.yaml")
    assert len(load_data(cfg).x_train) == 80


def test_shipped_config_loads():
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / "toy.yaml")
    assert cfg.train.lam == 50.0 and cfg.space.depth == 6
