import numpy as np
import pytest

from itmn.backbone import DESK96_PYRAMID, DESK_PYRAMID, REFERENCE_PYRAMID, PyramidConfig, StageSpec, Stream, build_backbone
from itmn.tensor import Tensor


def test_reference_extents():
    assert REFERENCE_PYRAMID.computed_extents() == [38, 19, 10, 5, 3, 1]
    REFERENCE_PYRAMID.validate()


@pytest.mark.parametrize("cfg", [DESK_PYRAMID, DESK96_PYRAMID])
def test_desk_extents_strictly_decrease_to_one(cfg):
    ext = cfg.computed_extents()
    assert len(ext) == 6 and ext[-1] == 1
    assert all(b < a for a, b in zip(ext, ext[1:]))
    assert tuple(ext) == tuple(cfg.level_extents)


def test_desk96_schedule():
    assert DESK96_PYRAMID.computed_extents() == [48, 24, 12, 6, 3, 1]


def test_desk_channel_widths():
    assert DESK_PYRAMID.level_channels == (16, 32, 64, 64, 64, 64)


def test_invalid_schedule_rejected():
    bad = PyramidConfig(input_size=64, level_extents=(32, 16, 8, 4, 2, 2), stem=(), levels=DESK_PYRAMID.levels)
    with pytest.raises(ValueError):
        bad.validate()


def test_same_seed_same_parameters():
    a, _ = build_backbone(DESK_PYRAMID, seed=3)
    b, _ = build_backbone(DESK_PYRAMID, seed=3)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)


def test_streams_are_independently_initialized():
    v, t = build_backbone(DESK_PYRAMID, seed=3)
    assert not np.array_equal(v.parameters()[0].data, t.parameters()[0].data)


@pytest.mark.parametrize("cfg", [DESK_PYRAMID, DESK96_PYRAMID])
def test_output_shapes_follow_config(cfg):
    s = Stream(cfg)
    feats = s(Tensor(np.zeros((2, 3, cfg.input_size, cfg.input_size), np.float32)))
    assert [f.shape[2] for f in feats] == list(cfg.level_extents)
    assert [f.shape[1] for f in feats] == list(cfg.level_channels)


def test_identical_weights_identical_pyramids():
    a = Stream(DESK_PYRAMID, rng=np.random.default_rng(5)).eval()
    b = Stream(DESK_PYRAMID, rng=np.random.default_rng(5)).eval()
    x = Tensor(np.random.default_rng(0).uniform(-0.5, 0.5, (1, 3, 64, 64)).astype(np.float32))
    for fa, fb in zip(a(x), b(x)):
        assert np.array_equal(fa.data, fb.data)


def test_zero_input_golden_values():
    # recorded from the first implementation, seed [0, 1], float64, inference mode
    golden = [2701.168300012291, 1498.012079108262, 773.6787069914898, 187.71458290627345, 42.39678573283721,
              14.287552981854589]
    s = Stream(DESK_PYRAMID, 3, np.random.default_rng([0, 1]), np.float64).eval()
    sums = [float(f.data.sum()) for f in s(Tensor(np.zeros((1, 3, 64, 64))))]
    assert np.allclose(sums, golden, rtol=1e-10)


def test_wrong_input_size_rejected():
    with pytest.raises(ValueError):
        Stream(DESK_PYRAMID)(Tensor(np.zeros((1, 3, 32, 32), np.float32)))


def test_repeats_add_stride_one_blocks():
    cfg = PyramidConfig(input_size=64, level_extents=DESK_PYRAMID.level_extents, stem=(),
                        levels=(StageSpec(16, repeats=1),) + DESK_PYRAMID.levels[1:])
    assert Stream(cfg).num_parameters() > Stream(DESK_PYRAMID).num_parameters()
    assert cfg.computed_extents() == list(DESK_PYRAMID.level_extents)


def test_config_round_trip():
    for cfg in (REFERENCE_PYRAMID, DESK_PYRAMID, DESK96_PYRAMID):
        assert PyramidConfig.from_dict(cfg.to_dict()) == cfg
