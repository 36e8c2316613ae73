import json
import struct

import numpy as np
import pytest

from itmn.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    model_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from itmn.config import DEFAULTS, ConfigError, RunConfig, sub_seed
from itmn.fusion import Detector, ModelConfig


def small_checkpoint():
    return Checkpoint({"kind": "test", "note": "x"}, {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([-1, 2], dtype=np.int8),
        "c": np.zeros((0, 4), dtype=np.float64),
    })


def test_header_offsets_tile_payload():
    blob = small_checkpoint().to_bytes()
    assert blob[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    end = 0
    for e in header["tensors"]:
        assert e["offset"] == end
        end += e["length"]
    assert 16 + hlen + end == len(blob)


def test_round_trip_is_byte_identical(tmp_path):
    ck = small_checkpoint()
    path = save_checkpoint(ck, tmp_path / "x.ckpt")
    again = load_checkpoint(path)
    assert again.to_bytes() == ck.to_bytes()
    assert again.tensors["b"].dtype == np.int8 and again.tensors["c"].shape == (0, 4)


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:-1], "past end"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:8] + struct.pack("<Q", 10**9) + b[16:], "header length"),
])
def test_malformed_files_rejected(mutate, message):
    with pytest.raises(CheckpointError, match=message):
        Checkpoint.from_bytes(mutate(small_checkpoint().to_bytes()))


def test_model_round_trip_and_architecture_mismatch():
    model = Detector(ModelConfig(fwn_downsample=2), seed=3)
    ck = model_checkpoint(model)
    again = model_from_checkpoint(Checkpoint.from_bytes(ck.to_bytes()))
    assert model_checkpoint(again).to_bytes() == ck.to_bytes()
    assert ck.meta["model"]["strategy"] == "late" and ck.meta["seed"] == 3
    other = model_checkpoint(Detector(ModelConfig(strategy="visual", fwn_downsample=2)))
    other.meta["model"] = ck.meta["model"]
    with pytest.raises(CheckpointError):
        model_from_checkpoint(other)


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointError):
        Checkpoint({}, {"x": np.zeros(2, dtype=np.complex64)}).to_bytes()


# -- run config ------------------------------------------------------------------------


def test_defaults_are_valid():
    cfg = RunConfig.from_dict({})
    assert cfg.raw == DEFAULTS and cfg.model_config().strategy == "late"
    assert cfg.train_config().seed == sub_seed(0, "train")


def test_unknown_keys_rejected_with_name():
    with pytest.raises(ConfigError, match="model.stratgy"):
        RunConfig.from_dict({"model": {"stratgy": "late"}})
    with pytest.raises(ConfigError, match="'extra'"):
        RunConfig.from_dict({"extra": 1})


def test_all_violations_reported_together():
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"seed": -1, "data": {"count": 0}, "eval": {"mode": "median"}})
    text = str(info.value)
    assert "seed" in text and "data.count" in text and "eval.mode" in text


def test_save_load_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"seed": 5, "model": {"strategy": "early"}})
    again = RunConfig.load(cfg.save(tmp_path / "c.json"))
    assert again.raw == cfg.raw and again.to_json() == cfg.to_json()


def test_bad_json_reports_location(tmp_path):
    (tmp_path / "c.json").write_text('{"seed": 1,,}')
    with pytest.raises(ConfigError, match="line 1"):
        RunConfig.load(tmp_path / "c.json")


def test_sub_seeds_are_distinct_and_stable():
    seeds = {sub_seed(0, p) for p in ("data", "model", "train", "test-data")}
    assert len(seeds) == 4 and sub_seed(0, "data") == sub_seed(0, "data") != sub_seed(1, "data")


def test_box_variant_and_input_size_select_configuration():
    cfg = RunConfig.from_dict({"model": {"box_variant": "original-ssd", "input_size": 96}})
    mc = cfg.model_config()
    assert mc.box.variant == "original-ssd" and mc.pyramid.input_size == 96
