"""Six-level separable-conv feature pyramid, one instance per sensor stream."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNormLayer, Layer, SeparableConvLayer, output_extent
from .tensor import Tensor, relu


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    stride: int = 2
    padding: int = 1
    kernel_size: int = 3
    repeats: int = 0  # extra stride-1 separable convs appended to the stage


@dataclass(frozen=True)
class PyramidConfig:
    """Layer schedule of one stream.

    ``stem`` stages run before the first tap; each entry of ``levels`` ends
    at one of the pyramid's output maps.
    """

    input_size: int = 300
    level_extents: tuple = (38, 19, 10, 5, 3, 1)
    stem: tuple = (StageSpec(16), StageSpec(16))
    levels: tuple = (
        StageSpec(16),
        StageSpec(32),
        StageSpec(64),
        StageSpec(64),
        StageSpec(64),
        StageSpec(64, padding=0),
    )

    @property
    def level_channels(self) -> tuple:
        return tuple(s.out_channels for s in self.levels)

    @property
    def stages(self) -> tuple:
        return tuple(self.stem) + tuple(self.levels)

    def computed_extents(self) -> list:
        size, out = self.input_size, []
        for spec in self.stem:
            size = output_extent(size, spec.kernel_size, spec.stride, spec.padding)
        for spec in self.levels:
            size = output_extent(size, spec.kernel_size, spec.stride, spec.padding)
            out.append(size)
        return out

    def validate(self):
        got = self.computed_extents()
        for i, (want, have) in enumerate(zip(self.level_extents, got)):
            if want != have or have < 1:
                raise ValueError(f"level {i + 1}: schedule yields extent {have}, config expects {want}")
        if len(got) != len(self.level_extents):
            raise ValueError(f"schedule has {len(got)} levels, config lists {len(self.level_extents)} extents")
        if any(b >= a for a, b in zip(got, got[1:])):
            raise ValueError(f"level extents must strictly decrease, got {got}")
        if got[-1] != 1:
            raise ValueError(f"the last level must be 1x1, got {got[-1]}")
        return self

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "level_extents": list(self.level_extents),
            "stem": [vars(s) for s in self.stem],
            "levels": [vars(s) for s in self.levels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidConfig":
        return cls(
            input_size=int(d["input_size"]),
            level_extents=tuple(int(v) for v in d["level_extents"]),
            stem=tuple(StageSpec(**s) for s in d.get("stem", [])),
            levels=tuple(StageSpec(**s) for s in d["levels"]),
        )


REFERENCE_PYRAMID = PyramidConfig()

# 64 -> 32 -> 16 -> 8 -> 4 -> 2 -> 1, each stage one stride-2 separable conv.
DESK_PYRAMID = PyramidConfig(
    input_size=64,
    level_extents=(32, 16, 8, 4, 2, 1),
    stem=(),
    levels=(StageSpec(16), StageSpec(32), StageSpec(64), StageSpec(64), StageSpec(64), StageSpec(64)),
)

# 96 -> 48 -> 24 -> 12 -> 6 -> 3 -> 1
DESK96_PYRAMID = PyramidConfig(
    input_size=96,
    level_extents=(48, 24, 12, 6, 3, 1),
    stem=(),
    levels=(StageSpec(16), StageSpec(32), StageSpec(64), StageSpec(64), StageSpec(64), StageSpec(64, padding=0)),
)


class ConvBNReLU(Layer):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = SeparableConvLayer(in_channels, out_channels, kernel_size, stride, padding, rng, dtype)
        self.bn = BatchNormLayer(out_channels, dtype=dtype)

    def macs(self, h, w):
        return self.conv.macs(h, w)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class Stage(Layer):
    def __init__(self, in_channels: int, spec: StageSpec, rng, dtype):
        super().__init__()
        self.spec = spec
        self.down = ConvBNReLU(in_channels, spec.out_channels, spec.kernel_size, spec.stride, spec.padding, rng, dtype)
        self.extra = []
        for r in range(spec.repeats):
            block = ConvBNReLU(spec.out_channels, spec.out_channels, spec.kernel_size, 1, spec.kernel_size // 2, rng, dtype)
            setattr(self, f"extra{r}", block)
            self.extra.append(block)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for block in self.extra:
            x = block(x)
        return x


class Stream(Layer):
    """One backbone stream: stem stages, then one stage per pyramid level."""

    def __init__(self, config: PyramidConfig, in_channels: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stages = []
        c = in_channels
        for i, spec in enumerate(config.stages):
            stage = Stage(c, spec, rng, dtype)
            setattr(self, f"stage{i}", stage)
            self.stages.append(stage)
            c = spec.out_channels
        self.n_stem = len(config.stem)

    def level_stage(self, level: int) -> Stage:
        return self.stages[self.n_stem + level]

    def forward_levels(self, x: Tensor, start: int = 0, stop: int | None = None, from_input: bool = True) -> list:
        """Feature maps for levels [start, stop).

        With ``from_input`` the stem runs first and ``x`` is the image;
        otherwise ``x`` is the level ``start - 1`` feature map.
        """
        stop = len(self.config.levels) if stop is None else stop
        if from_input:
            if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
                raise ValueError(f"stream expects {self.config.input_size}x{self.config.input_size} input, got {x.shape[-2:]}")
            for stage in self.stages[: self.n_stem]:
                x = stage(x)
            levels = range(0, stop)
        else:
            levels = range(start, stop)
        feats = []
        for lv in levels:
            x = self.level_stage(lv)(x)
            if lv >= start:
                feats.append(x)
        return feats

    def __call__(self, x: Tensor) -> list:
        return self.forward_levels(x)

    def macs(self) -> int:
        size, total = self.config.input_size, 0
        for stage in self.stages:
            total += stage.down.macs(size, size)
            size = stage.down.conv.out_extent(size)
            for block in stage.extra:
                total += block.macs(size, size)
        return total


@dataclass
class FeaturePyramidPair:
    visual: list = field(default_factory=list)
    thermal: list = field(default_factory=list)


def build_backbone(config: PyramidConfig, seed: int, in_channels: int = 3, dtype=np.float32) -> tuple:
    """Two independently initialized streams sharing one architecture."""
    config.validate()
    rng_v = np.random.default_rng([seed, 1])
    rng_t = np.random.default_rng([seed, 2])
    return Stream(config, in_channels, rng_v, dtype), Stream(config, in_channels, rng_t, dtype)


def extract_pyramid(visual: Tensor, thermal: Tensor, streams: tuple) -> FeaturePyramidPair:
    sv, st = streams
    return FeaturePyramidPair(sv(visual), st(thermal))
