import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambafusion import checkpoint
from mambafusion.checkpoint import CheckpointError, dump_tensors, load_tensors
from mambafusion.config import ConfigError, build, parse_config
from mambafusion.pan import PanConfig
from mambafusion.toy.detector import Detector, DetectorConfig
from mambafusion.toy.train import TrainConfig


def test_parse_comments_and_whitespace():
    raw = parse_config("# header\nsteps = 20  # short run\n\n lr=0.1\nt2i = off\n")
    assert raw == {"steps": "20", "lr": "0.1", "t2i": "off"}


def test_build_typed():
    cfg = build(TrainConfig, parse_config("steps = 20\nlr = 0.1\nt2i = false\ni2t = yes\n"))
    assert cfg.steps == 20 and cfg.lr == 0.1 and cfg.t2i is False and cfg.i2t is True
    pan = build(PanConfig, parse_config("channels = 8, 8, 16\nihs_source = mean-over-levels\nbidirectional = 1"))
    assert pan.channels == (8, 8, 16) and pan.ihs_source == "mean-over-levels" and pan.bidirectional


@pytest.mark.parametrize("text", ["steps 20", "= 3", "steps = 1\nsteps = 2"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", ["bogus = 1", "steps = many", "t2i = maybe"])
def test_build_errors(text):
    with pytest.raises(ConfigError):
        build(TrainConfig, parse_config(text))


def test_overrides_win():
    assert build(TrainConfig, {"seed": "4"}, seed=9).seed == 9


def test_checkpoint_layout_header():
    blob = dump_tensors({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"MFCK"
    version, count = struct.unpack("<II", blob[4:12])
    (nlen,) = struct.unpack("<I", blob[12:16])
    assert (version, count, nlen, blob[16:17]) == (1, 1, 1, b"w")
    rank, d0, d1 = struct.unpack("<IQQ", blob[17:37])
    assert (rank, d0, d1) == (2, 1, 2)
    assert np.array_equal(np.frombuffer(blob[37:], "<f8"), [1.0, 2.0])


@settings(max_examples=30)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.lists(st.integers(0, 3), max_size=3), max_size=4))
def test_tensor_round_trip(shapes):
    tensors = {k: np.arange(np.prod(s, dtype=int), dtype=float).reshape(s) * 0.1 for k, s in shapes.items()}
    back = load_tensors(dump_tensors(tensors))
    assert list(back) == list(tensors)
    assert all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in tensors.items())


def test_corrupt_checkpoints():
    blob = dump_tensors({"a": np.ones(3)})
    with pytest.raises(CheckpointError):
        load_tensors(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_tensors(blob[:-1])
    with pytest.raises(CheckpointError):
        load_tensors(blob + b"\0")
    with pytest.raises(CheckpointError):
        load_tensors(blob[:4] + struct.pack("<I", 99) + blob[8:])


def test_model_save_load(tmp_path):
    cfg = DetectorConfig(width=8, state=4, text_dim=8, text_state=4)
    a, b = Detector(cfg, 7), Detector(DetectorConfig(**{**cfg.__dict__, "seed": 1}), 7)
    path = tmp_path / "model.ckpt"
    checkpoint.save(a, path)
    checkpoint.load(b, path)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.params(), b.params()))
    with pytest.raises(CheckpointError):
        checkpoint.load(Detector(DetectorConfig(width=16), 7), path)
