"""Fusion weight network, per-level weighted fusion, prediction heads, and the
full detector in its early / middle / late (and single-stream) variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import BoxConfig
from .backbone import DESK_PYRAMID, ConvBNReLU, PyramidConfig, Stream
from .layers import ConvLayer, FullyConnectedLayer, Layer, NINBlock, global_avg_pool, max_pool2d
from .tensor import ShapeError, Tensor, add, broadcast_to, concat, mul, relu, reshape, sigmoid, sub, take, transpose

STRATEGIES = ("visual", "thermal", "early", "middle", "late")
AWARENESS = ("none", "illumination", "temperature", "both")
ABLATION_NAMES = {"none": "N-MN", "illumination": "I-MN", "temperature": "T-MN", "both": "IT-MN"}

# channel schedule of the fusion weight network: (in, out) per conv stage
FWN_CHANNELS = ((3, 16), (32, 64), (64, 128), (128, 256), (256, 128), (128, 64))
FWN_FC = (64, 2)


@dataclass
class FusionWeights:
    """Per-image classification and localization fusion weights, each in (0, 1)."""

    w_c: Tensor
    w_l: Tensor

    def numpy(self):
        return self.w_c.data.copy(), self.w_l.data.copy()


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 2
    boxes_per_cell: tuple = (3, 3, 3, 3, 3, 3)

    def cls_channels(self, level: int) -> int:
        return self.boxes_per_cell[level] * self.num_classes

    def loc_channels(self, level: int) -> int:
        return self.boxes_per_cell[level] * 4


@dataclass(frozen=True)
class ModelConfig:
    strategy: str = "late"
    awareness: str = "both"
    pyramid: PyramidConfig = DESK_PYRAMID
    box: BoxConfig = field(default_factory=lambda: BoxConfig(extents=DESK_PYRAMID.level_extents))
    num_classes: int = 2
    middle_split: int = 4  # levels computed per stream before the NIN merge
    prior_probability: float = 0.01
    fwn_downsample: int = 1  # the FWN sees the image pair average-pooled by this factor

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.awareness not in AWARENESS:
            raise ValueError(f"unknown awareness {self.awareness!r}; expected one of {AWARENESS}")
        if tuple(self.box.extents) != tuple(self.pyramid.level_extents):
            raise ValueError(f"box extents {self.box.extents} differ from pyramid extents {self.pyramid.level_extents}")
        if not 1 <= self.middle_split < len(self.pyramid.levels):
            raise ValueError("middle_split must leave at least one shared level")
        if self.fwn_downsample < 1 or self.pyramid.input_size % self.fwn_downsample:
            raise ValueError(f"fwn_downsample must be a positive divisor of the input size, got {self.fwn_downsample}")

    @property
    def head(self) -> HeadConfig:
        return HeadConfig(self.num_classes, tuple(self.box.per_cell()))

    @property
    def uses_fwn(self) -> bool:
        return self.strategy == "late" and self.awareness != "none"

    @property
    def name(self) -> str:
        if self.strategy == "late":
            return ABLATION_NAMES[self.awareness]
        return self.strategy

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "awareness": self.awareness,
            "pyramid": self.pyramid.to_dict(),
            "box": {
                "extents": list(self.box.extents),
                "s_min": self.box.s_min,
                "s_max": self.box.s_max,
                "aspect_ratios": list(self.box.aspect_ratios),
                "variant": self.box.variant,
                "boxes_per_cell": list(self.box.boxes_per_cell),
                "clip": self.box.clip,
            },
            "num_classes": self.num_classes,
            "middle_split": self.middle_split,
            "prior_probability": self.prior_probability,
            "fwn_downsample": self.fwn_downsample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = d["box"]
        box = BoxConfig(tuple(b["extents"]), b["s_min"], b["s_max"], tuple(b["aspect_ratios"]), b["variant"],
                        tuple(b["boxes_per_cell"]), b["clip"])
        return cls(d["strategy"], d["awareness"], PyramidConfig.from_dict(d["pyramid"]), box, d["num_classes"],
                   d["middle_split"], d["prior_probability"],
                   d.get("fwn_downsample", 1))


# ---------------------------------------------------------------------------
# fusion weight network
# ---------------------------------------------------------------------------


class FusionWeightNetwork(Layer):
    """Separable-conv VGG-style trunk mapping an image pair to (w_c, w_l).

    conv0 runs on each image separately (3 -> 16 each); the two results are
    concatenated on the channel axis (32) and pass conv1..conv5 with a 2x max
    pool after every stage but the last, then global average pooling, the
    64 -> 2 fully connected layer and a sigmoid.
    """

    def __init__(self, awareness: str = "both", rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.awareness = awareness
        cin, cout = FWN_CHANNELS[0]
        self.conv0_v = ConvBNReLU(cin, cout, 3, 1, 1, rng, dtype)
        self.conv0_t = ConvBNReLU(cin, cout, 3, 1, 1, rng, dtype)
        self.convs = []
        for i, (cin, cout) in enumerate(FWN_CHANNELS[1:], start=1):
            block = ConvBNReLU(cin, cout, 3, 1, 1, rng, dtype)
            setattr(self, f"conv{i}", block)
            self.convs.append(block)
        self.fc = FullyConnectedLayer(*FWN_FC, rng=rng, dtype=dtype)

    def logits(self, visual: Tensor, thermal: Tensor) -> Tensor:
        if visual.shape != thermal.shape or visual.shape[1] != 3:
            raise ShapeError(f"FWN expects two 3-channel images of equal shape, got {visual.shape} and {thermal.shape}")
        if self.awareness == "illumination":
            fv = self.conv0_v(visual)
            x = concat([fv, fv], axis=1)
        elif self.awareness == "temperature":
            ft = self.conv0_t(thermal)
            x = concat([ft, ft], axis=1)
        else:
            x = concat([self.conv0_v(visual), self.conv0_t(thermal)], axis=1)
        x = max_pool2d(x)
        for i, block in enumerate(self.convs):
            x = block(x)
            if i < len(self.convs) - 1 and min(x.shape[2:]) >= 2:
                x = max_pool2d(x)
        return self.fc(global_avg_pool(x))

    def __call__(self, visual: Tensor, thermal: Tensor) -> FusionWeights:
        out = sigmoid(self.logits(visual, thermal))
        return FusionWeights(w_c=take(out, 0, axis=1), w_l=take(out, 1, axis=1))

    def macs(self, size: int) -> int:
        total = self.conv0_v.macs(size, size) + self.conv0_t.macs(size, size)
        size //= 2
        for i, block in enumerate(self.convs):
            total += block.macs(size, size)
            if i < len(self.convs) - 1 and size >= 2:
                size //= 2
        return total + self.fc.macs()


def fwn_forward(visual: Tensor, thermal: Tensor, fwn: FusionWeightNetwork) -> FusionWeights:
    return fwn(visual, thermal)


def constant_weights(n: int, value: float = 0.5, dtype=np.float32) -> FusionWeights:
    w = Tensor(np.full(n, value, dtype=dtype))
    return FusionWeights(w, w)


# ---------------------------------------------------------------------------
# per-level fusion and heads
# ---------------------------------------------------------------------------


def _per_image(w: Tensor, like: Tensor) -> Tensor:
    """Expand a per-image weight [N] (or a scalar) to the shape of ``like``."""
    if w.size == 1:
        return w
    if w.ndim != 1 or w.shape[0] != like.shape[0]:
        raise ShapeError(f"fusion weight shape {w.shape} does not match batch of {like.shape}")
    return broadcast_to(reshape(w, (like.shape[0],) + (1,) * (like.ndim - 1)), like.shape)


def weighted_sum(x_v: Tensor, x_t: Tensor, w: Tensor) -> Tensor:
    """w * x_v + (1 - w) * x_t, per image."""
    if x_v.shape != x_t.shape:
        raise ShapeError(f"stream feature shapes differ: {x_v.shape} vs {x_t.shape}")
    wb = _per_image(w, x_v)
    return add(mul(wb, x_v), mul(sub(1.0, wb), x_t))


class LevelHead(Layer):
    """Post-fusion convs (f0 for localization, f1 for classification) plus the 3x3 prediction convs."""

    def __init__(self, channels: int, n_boxes: int, num_classes: int, prior_probability: float, rng, dtype=np.float32):
        super().__init__()
        self.channels, self.n_boxes, self.num_classes = channels, n_boxes, num_classes
        self.f0 = ConvLayer(channels, channels, 3, 1, 1, rng, dtype)
        self.f1 = ConvLayer(channels, channels, 3, 1, 1, rng, dtype)
        self.loc = ConvLayer(channels, n_boxes * 4, 3, 1, 1, rng, dtype)
        self.cls = ConvLayer(channels, n_boxes * num_classes, 3, 1, 1, rng, dtype)
        # background-dominant prior so early training is not swamped by easy negatives
        bias = self.cls.bias.data.reshape(n_boxes, num_classes)
        bias[:, 0] = np.log((1 - prior_probability) / prior_probability) if prior_probability else bias[:, 0]

    def fuse(self, x_v: Tensor, x_t: Tensor, w: FusionWeights) -> tuple:
        """Pre-conv fused maps (loc input, cls input)."""
        return weighted_sum(x_v, x_t, w.w_l), weighted_sum(x_v, x_t, w.w_c)

    def post(self, fused_l: Tensor, fused_c: Tensor) -> tuple:
        return relu(self.f0(fused_l)), relu(self.f1(fused_c))

    def predict(self, y0: Tensor, y1: Tensor) -> tuple:
        """(box deltas [N, cells*D, 4], class logits [N, cells*D, Cls]) in row-major cell, then box order."""
        if y0.shape[1] != self.channels or y1.shape[1] != self.channels:
            raise ShapeError(f"head expects {self.channels} channels, got {y0.shape[1]} and {y1.shape[1]}")
        n = y0.shape[0]
        loc = transpose(self.loc(y0), (0, 2, 3, 1))
        cls = transpose(self.cls(y1), (0, 2, 3, 1))
        return reshape(loc, (n, -1, 4)), reshape(cls, (n, -1, self.num_classes))

    def macs(self, extent: int) -> dict:
        return {
            "fusion": self.f0.macs(extent, extent) + self.f1.macs(extent, extent),
            "head": self.loc.macs(extent, extent) + self.cls.macs(extent, extent),
        }


def fuse_level(x_v: Tensor, x_t: Tensor, w: FusionWeights, head: LevelHead) -> tuple:
    """Weighted fusion of one pyramid level followed by the post-fusion convs: (y_0, y_1)."""
    return head.post(*head.fuse(x_v, x_t, w))


def predict_heads(y0: Tensor, y1: Tensor, head: LevelHead) -> tuple:
    return head.predict(y0, y1)


def _avg_downsample(images: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = images.shape
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


# ---------------------------------------------------------------------------
# full detector
# ---------------------------------------------------------------------------


@dataclass
class RawOutput:
    loc: Tensor  # [N, boxes, 4]
    cls: Tensor  # [N, boxes, Cls] logits
    weights: FusionWeights | None


class Detector(Layer):
    """Dual-stream one-stage detector with configurable fusion strategy."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.seed = seed
        pyr = config.pyramid
        pyr.validate()
        strategy = config.strategy
        if strategy in ("late", "middle"):
            self.visual_stream = Stream(pyr, 3, np.random.default_rng([seed, 1]), dtype)
            self.thermal_stream = Stream(pyr, 3, np.random.default_rng([seed, 2]), dtype)
        elif strategy == "early":
            self.stream = Stream(pyr, 6, np.random.default_rng([seed, 1]), dtype)
        else:
            self.stream = Stream(pyr, 3, np.random.default_rng([seed, 1 if strategy == "visual" else 2]), dtype)
        if strategy == "middle":
            rng = np.random.default_rng([seed, 3])
            self.nins = []
            for lv in range(config.middle_split):
                block = NINBlock(2 * pyr.levels[lv].out_channels, rng, dtype)
                setattr(self, f"nin{lv}", block)
                self.nins.append(block)
        if config.uses_fwn:
            self.fwn = FusionWeightNetwork(config.awareness, np.random.default_rng([seed, 4]), dtype)
        rng = np.random.default_rng([seed, 5])
        head_cfg = config.head
        self.heads = []
        for lv, spec in enumerate(pyr.levels):
            head = LevelHead(spec.out_channels, head_cfg.boxes_per_cell[lv], config.num_classes,
                             config.prior_probability, rng, dtype)
            setattr(self, f"head{lv}", head)
            self.heads.append(head)
        self.force_weights: float | None = None

    # -- pieces ----------------------------------------------------------
    def fusion_weights(self, visual: Tensor, thermal: Tensor) -> FusionWeights | None:
        cfg = self.config
        if cfg.strategy != "late":
            return None
        if self.force_weights is not None or not cfg.uses_fwn:
            value = 0.5 if self.force_weights is None else self.force_weights
            return constant_weights(visual.shape[0], value, visual.dtype)
        f = cfg.fwn_downsample
        if f > 1:
            visual, thermal = Tensor(_avg_downsample(visual.data, f)), Tensor(_avg_downsample(thermal.data, f))
        return self.fwn(visual, thermal)

    def fused_levels(self, visual: Tensor, thermal: Tensor) -> tuple:
        """(list of (y0, y1) per level, fusion weights or None)."""
        cfg = self.config
        if cfg.strategy == "late":
            w = self.fusion_weights(visual, thermal)
            fv, ft = self.visual_stream(visual), self.thermal_stream(thermal)
            return [fuse_level(a, b, w, h) for a, b, h in zip(fv, ft, self.heads)], w
        if cfg.strategy == "middle":
            k = cfg.middle_split
            fv = self.visual_stream.forward_levels(visual, 0, k)
            ft = self.thermal_stream.forward_levels(thermal, 0, k)
            merged = [nin(concat([a, b], axis=1)) for a, b, nin in zip(fv, ft, self.nins)]
            tail = self.visual_stream.forward_levels(merged[-1], k, None, from_input=False)
            feats = merged + tail
        elif cfg.strategy == "early":
            feats = self.stream(concat([visual, thermal], axis=1))
        else:
            feats = self.stream(visual if cfg.strategy == "visual" else thermal)
        return [h.post(f, f) for f, h in zip(feats, self.heads)], None

    def __call__(self, visual: Tensor, thermal: Tensor) -> RawOutput:
        pairs, w = self.fused_levels(visual, thermal)
        locs, clss = zip(*(h.predict(y0, y1) for (y0, y1), h in zip(pairs, self.heads)))
        return RawOutput(concat(list(locs), axis=1), concat(list(clss), axis=1), w)

    # -- bookkeeping -------------------------------------------------------
    def macs(self) -> dict:
        """Multiply-accumulate counts per image, split by stage."""
        cfg = self.config
        out = {"backbone": 0, "fwn": 0, "fusion": 0, "head": 0}
        if cfg.strategy in ("late",):
            out["backbone"] = self.visual_stream.macs() + self.thermal_stream.macs()
        elif cfg.strategy == "middle":
            out["backbone"] = self.visual_stream.macs() + self.thermal_stream.macs()
            for lv in range(cfg.middle_split, len(cfg.pyramid.levels)):
                ext = cfg.pyramid.level_extents[lv - 1]
                out["backbone"] -= self.thermal_stream.level_stage(lv).down.macs(ext, ext)
            for lv, nin in enumerate(self.nins):
                ext = cfg.pyramid.level_extents[lv]
                out["backbone"] += nin.conv.macs(ext, ext)
        else:
            out["backbone"] = self.stream.macs()
        if cfg.uses_fwn:
            out["fwn"] = self.fwn.macs(cfg.pyramid.input_size // cfg.fwn_downsample)
        for h, ext in zip(self.heads, cfg.pyramid.level_extents):
            m = h.macs(ext)
            out["fusion"] += m["fusion"]
            out["head"] += m["head"]
        out["total"] = sum(out.values())
        return out


def forward_model(visual: Tensor, thermal: Tensor, model: Detector) -> RawOutput:
    return model(visual, thermal)
