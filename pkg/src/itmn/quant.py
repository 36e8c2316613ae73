"""Affine int8 post-training quantization.

Every tensor gets one scale ``s`` and zero point ``z``; codes live in
[-128, 127] and ``x ~ s * (q - z)``.  BatchNorm is folded into the preceding
pointwise convolution first, then every convolution / fully connected layer
is wrapped in a :class:`QuantLayer` that can

* observe its input range (calibration),
* run with fake quantization of weights, bias and input (the float-simulated
  reference, also used for straight-through fine-tuning), or
* run integer kernels: int8 operands, int32 accumulation, one rescale to real
  values at the layer output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, model_from_checkpoint
from .layers import (ConvLayer, DepthwiseConvLayer, FullyConnectedLayer, Layer, _check_extent, _pad, conv2d,
                     depthwise_conv2d, fully_connected, im2col)
from .synthdata import to_model_input
from .tensor import Tensor, no_grad, record

QMIN, QMAX = -128, 127
ROUNDING_MODES = ("half-even", "floor")


@dataclass(frozen=True)
class QuantParams:
    s: float
    z: int

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise ValueError(f"scale must be positive and finite, got {self.s}")
        if not QMIN <= self.z <= QMAX:
            raise ValueError(f"zero point {self.z} outside [{QMIN}, {QMAX}]")

    def as_list(self) -> list:
        return [float(self.s), int(self.z)]


def compute_qparams(x_min: float, x_max: float) -> QuantParams:
    """Scale spreading [x_min, x_max] over 255 steps; zero point so x_min lands on -128."""
    x_min, x_max = float(x_min), float(x_max)
    if not (math.isfinite(x_min) and math.isfinite(x_max)):
        raise ValueError(f"range must be finite, got [{x_min}, {x_max}]")
    if x_min > x_max:
        raise ValueError(f"x_min {x_min} exceeds x_max {x_max}")
    s = (x_max - x_min) / 255.0
    if s == 0.0:
        return QuantParams(1.0, int(np.clip(np.round(-128.0 - x_min), QMIN, QMAX)))
    # -128 - x_min / s rewritten as -0.5 - 127.5 (max + min) / (max - min): the same
    # value, but a symmetric range gives exactly -0.5 and hence z = 0 under half-even
    z = int(np.clip(np.round(-0.5 - 127.5 * (x_max + x_min) / (x_max - x_min)), QMIN, QMAX))
    return QuantParams(s, z)


def range_qparams(x: np.ndarray) -> QuantParams:
    """Qparams for a tensor's own range, widened to contain zero so zero is exactly representable."""
    x = np.asarray(x)
    return compute_qparams(min(float(x.min()), 0.0), max(float(x.max()), 0.0))


def quantize(x, qp: QuantParams, rounding: str = "half-even") -> np.ndarray:
    """int8 codes clamp(round(x / s + z)); ``rounding="floor"`` takes the floor instead."""
    v = np.asarray(x, dtype=np.float64) / qp.s + qp.z
    if rounding == "half-even":
        v = np.rint(v)
    elif rounding == "floor":
        v = np.floor(v)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}; expected one of {ROUNDING_MODES}")
    return np.clip(v, QMIN, QMAX).astype(np.int8)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return qp.s * (np.asarray(q, dtype=np.float64) - qp.z)


def fake_quant(x: Tensor, qp: QuantParams, rounding: str = "half-even") -> Tensor:
    """dequantize(quantize(x)) with a straight-through gradient inside the representable range."""
    lo, hi = qp.s * (QMIN - qp.z), qp.s * (QMAX - qp.z)
    out = dequantize(quantize(x.data, qp, rounding), qp).astype(x.dtype)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return record(out, (x,), backward)


# ---------------------------------------------------------------------------
# BatchNorm folding
# ---------------------------------------------------------------------------


class Identity(Layer):
    def __call__(self, x):
        return x


def fold_batchnorm(model: Layer) -> Layer:
    """Fold every BN (inference statistics) into the pointwise conv before it, in place."""
    from .backbone import ConvBNReLU

    for layer in _walk(model):
        if isinstance(layer, ConvBNReLU) and not isinstance(layer.bn, Identity):
            a, b = layer.bn.inference_affine()
            pw = layer.conv.pointwise
            dtype = pw.weight.dtype
            pw.weight.data = (pw.weight.data * a[:, None, None, None]).astype(dtype)
            pw.bias.data = (pw.bias.data * a + b).astype(dtype)
            layer.bn = Identity()
    return model


def _walk(layer: Layer):
    yield layer
    for child in list(layer._children.values()):
        yield from _walk(child)


# ---------------------------------------------------------------------------
# quantized layers
# ---------------------------------------------------------------------------


QUANTIZABLE = (ConvLayer, DepthwiseConvLayer, FullyConnectedLayer)


class QuantLayer(Layer):
    """Wraps a conv / depthwise / fc layer; parameters keep their original names."""

    def __init__(self, inner: Layer, name: str, rounding: str = "half-even"):
        super().__init__()
        object.__setattr__(self, "inner", inner)
        self._params = inner._params  # shared, so parameter names are unchanged
        self.name = name
        self.rounding = rounding
        self.mode = "float"
        self.act_min = math.inf
        self.act_max = -math.inf
        self.act_qp: QuantParams | None = None
        self.w_qp: dict | None = None  # param name -> frozen QuantParams
        self.frozen_codes: dict | None = None  # param name -> int8 codes once frozen

    def __getattr__(self, name):
        # geometry (macs, out_extent, channel counts) comes from the wrapped layer
        inner = self.__dict__.get("inner")
        if inner is None:
            raise AttributeError(name)
        return getattr(inner, name)

    # -- parameter qparams -------------------------------------------------
    def param_qparams(self, pname: str) -> QuantParams:
        if self.w_qp is not None:
            return self.w_qp[pname]
        return range_qparams(self._params[pname].data)

    def freeze(self):
        """Fix weight qparams from the current weights and snap the weights to their codes."""
        self.w_qp = {p: range_qparams(t.data) for p, t in self._params.items()}
        self.set_codes({p: quantize(t.data, self.w_qp[p], self.rounding) for p, t in self._params.items()})

    def set_codes(self, codes: dict):
        """Install int8 codes; the float parameters become their dequantized values."""
        self.frozen_codes = {p: np.asarray(c, dtype=np.int8) for p, c in codes.items()}
        for p, t in self._params.items():
            t.data = dequantize(self.frozen_codes[p], self.w_qp[p]).astype(t.dtype)

    def codes(self) -> dict:
        if self.frozen_codes is not None:
            return dict(self.frozen_codes)
        return {p: quantize(t.data, self.param_qparams(p), self.rounding) for p, t in self._params.items()}

    def _weight_term(self, pname: str, t: Tensor) -> Tensor:
        """Fake-quantized parameter; frozen layers use their stored codes exactly."""
        if self.frozen_codes is not None:
            return Tensor(dequantize(self.frozen_codes[pname], self.w_qp[pname]).astype(t.dtype))
        return fake_quant(t, self.param_qparams(pname), self.rounding)

    def observe(self, x: np.ndarray):
        self.act_min = min(self.act_min, float(x.min()))
        self.act_max = max(self.act_max, float(x.max()))

    def finish_calibration(self):
        if not math.isfinite(self.act_min):
            raise ValueError(f"layer {self.name} saw no calibration data")
        self.act_qp = compute_qparams(min(self.act_min, 0.0), max(self.act_max, 0.0))

    # -- forward -------------------------------------------------------------
    def _float(self, x, weight, bias):
        inner = self.inner
        if isinstance(inner, ConvLayer):
            return conv2d(x, weight, bias, inner.stride, inner.padding)
        if isinstance(inner, DepthwiseConvLayer):
            return depthwise_conv2d(x, weight, None, inner.stride, inner.padding)
        return fully_connected(x, weight, bias)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "float":
            return self.inner(x)
        if self.mode == "calibrate":
            self.observe(x.data)
            return self.inner(x)
        if self.act_qp is None:
            raise RuntimeError(f"layer {self.name} has no activation qparams; calibrate first")
        if self.mode == "fake":
            xq = fake_quant(x, self.act_qp, self.rounding)
            w = self._weight_term("weight", self._params["weight"])
            b = self._weight_term("bias", self._params["bias"]) if "bias" in self._params else None
            return self._float(xq, w, b)
        if self.mode == "int":
            return Tensor(self.integer_forward(x.data).astype(x.dtype))
        raise ValueError(f"unknown mode {self.mode!r}")

    def integer_forward(self, x: np.ndarray) -> np.ndarray:
        """int8 x int8 products accumulated in int32, rescaled once at the output."""
        inner = self.inner
        aq = self.act_qp
        xq = quantize(x, aq, self.rounding)
        wqp = self.param_qparams("weight")
        wq = self.codes()["weight"]
        xc = xq.astype(np.int32) - np.int32(aq.z)  # zero-point-centred; padding with 0 is padding with real 0
        wc = wq.astype(np.int32) - np.int32(wqp.z)
        if isinstance(inner, ConvLayer):
            n, _, h, w = x.shape
            cols, ho, wo = im2col(xc, inner.kernel_size, inner.stride, inner.padding)
            acc = wc.reshape(inner.out_channels, -1) @ cols
            acc = acc.reshape(inner.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
        elif isinstance(inner, DepthwiseConvLayer):
            n, c, h, w = x.shape
            k, st = inner.kernel_size, inner.stride
            ho, wo = _check_extent(h, w, k, st, inner.padding)
            xp = _pad(xc, inner.padding)
            acc = np.zeros((n, c, ho, wo), dtype=np.int32)
            for i in range(k):
                for j in range(k):
                    acc += xp[:, :, i : i + st * (ho - 1) + 1 : st, j : j + st * (wo - 1) + 1 : st] * wc[None, :, 0, i, j, None, None]
        else:
            acc = xc @ wc.T
        assert acc.dtype == np.int32
        out = (aq.s * wqp.s) * acc.astype(np.float64)
        if "bias" in self._params:
            bqp = self.param_qparams("bias")
            bias = dequantize(self.codes()["bias"], bqp)
            out = out + (bias[None, :, None, None] if out.ndim == 4 else bias[None, :])
        return out


def wrap_layers(model: Layer, rounding: str = "half-even") -> dict:
    """Replace every quantizable layer by a QuantLayer in place; returns name -> QuantLayer."""
    wrapped = {}

    def visit(layer, prefix):
        for cname, child in list(layer._children.items()):
            full = prefix + cname
            if isinstance(child, QUANTIZABLE):
                q = QuantLayer(child, full, rounding)
                setattr(layer, cname, q)
                wrapped[full] = q
            elif not isinstance(child, QuantLayer):
                visit(child, full + ".")

    visit(model, "")
    return wrapped


def set_mode(layers: dict, mode: str):
    for q in layers.values():
        q.mode = mode


# ---------------------------------------------------------------------------
# model-level API
# ---------------------------------------------------------------------------


@dataclass
class QuantizedModel:
    model: object  # the Detector with folded BN and wrapped layers
    layers: dict  # name -> QuantLayer
    rounding: str = "half-even"

    @property
    def config(self):
        return self.model.config

    def use(self, mode: str) -> "QuantizedModel":
        """Select "int" (integer kernels) or "fake" (float-simulated quantization)."""
        if mode not in ("int", "fake"):
            raise ValueError(f"unknown inference mode {mode!r}")
        set_mode(self.layers, mode)
        return self

    def __call__(self, visual, thermal):
        return self.model(visual, thermal)

    def eval(self):
        self.model.eval()
        return self

    def parameters(self):
        return self.model.parameters()

    def to_checkpoint(self) -> Checkpoint:
        tensors, wq = {}, {}
        for name, q in self.layers.items():
            for pname, codes in q.codes().items():
                key = f"{name}.{pname}"
                tensors[f"q/{key}"] = codes
                wq[key] = q.param_qparams(pname).as_list()
        meta = {
            "kind": "int8",
            "model": self.model.config.to_dict(),
            "seed": self.model.seed,
            "rounding": self.rounding,
            "bn_folded": True,
            "weight_qparams": wq,
            "activation_qparams": {n: q.act_qp.as_list() for n, q in self.layers.items()},
        }
        return Checkpoint(meta, tensors)


def calibrate(layers: dict, model, batches):
    """Running min/max of every wrapped layer's input over the calibration batches."""
    set_mode(layers, "calibrate")
    for q in layers.values():
        q.act_min, q.act_max = math.inf, -math.inf
    model.eval()
    seen = 0
    with no_grad():
        for v, t in batches:
            model(Tensor(v), Tensor(t))
            seen += 1
    if seen == 0:
        raise ValueError("calibration set is empty")
    for q in layers.values():
        q.finish_calibration()


def _batches(pairs, batch_size, dtype):
    for start in range(0, len(pairs), batch_size):
        yield to_model_input([pairs[i] for i in range(start, min(start + batch_size, len(pairs)))], dtype)


def quantize_model(ckpt: Checkpoint, calibration, rounding: str = "half-even", finetune_epochs: int = 0,
                   finetune_data=None, finetune_config=None, batch_size: int = 16) -> QuantizedModel:
    """Fold BN, calibrate activation ranges, optionally fine-tune with fake quantization, freeze."""
    if rounding not in ROUNDING_MODES:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    model = fold_batchnorm(model_from_checkpoint(ckpt))
    layers = wrap_layers(model, rounding)
    dtype = next(iter(model.parameters())).dtype
    calibrate(layers, model, _batches(calibration, batch_size, dtype))
    if finetune_epochs > 0:
        from .trainer import TrainConfig, Trainer

        base = finetune_config or TrainConfig(base_lr=0.005, momentum=0.9, seed=int(ckpt.meta.get("seed", 0)))
        cfg = TrainConfig.from_dict({**base.to_dict(), "epochs": finetune_epochs})
        set_mode(layers, "fake")
        trainer = Trainer(model, cfg)
        data = finetune_data if finetune_data is not None else calibration
        for _ in range(finetune_epochs):
            trainer.run_epoch(data)
        calibrate(layers, model, _batches(calibration, batch_size, dtype))
    for q in layers.values():
        q.freeze()
    qm = QuantizedModel(model, layers, rounding)
    model.eval()
    return qm.use("int")


def load_quantized(ckpt: Checkpoint) -> QuantizedModel:
    from .fusion import Detector, ModelConfig

    if ckpt.meta.get("kind") != "int8":
        raise CheckpointError(f"expected an int8 checkpoint, got kind {ckpt.meta.get('kind')!r}")
    model = fold_batchnorm(Detector(ModelConfig.from_dict(ckpt.meta["model"]), seed=int(ckpt.meta["seed"])))
    rounding = ckpt.meta["rounding"]
    layers = wrap_layers(model, rounding)
    acts = ckpt.meta["activation_qparams"]
    wqs = ckpt.meta["weight_qparams"]
    for name, q in layers.items():
        if name not in acts:
            raise CheckpointError(f"missing activation qparams for layer {name!r}")
        q.act_qp = QuantParams(*acts[name])
        q.w_qp, codes = {}, {}
        for pname in q._params:
            key = f"{name}.{pname}"
            if f"q/{key}" not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks quantized tensor {key!r}")
            q.w_qp[pname] = QuantParams(*wqs[key])
            codes[pname] = ckpt.tensors[f"q/{key}"]
        q.set_codes(codes)
    model.eval()
    return QuantizedModel(model, layers, rounding).use("int")


def load_any(ckpt: Checkpoint):
    """A float Detector or an integer QuantizedModel, whichever the checkpoint holds."""
    kind = ckpt.meta.get("kind")
    if kind == "int8":
        return load_quantized(ckpt)
    if kind == "float":
        return model_from_checkpoint(ckpt)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def payload_ratio(float_ckpt: Checkpoint, q_ckpt: Checkpoint, include_qparams: bool = True) -> float:
    """Quantized weight bytes (plus 8-byte scale and 4-byte zero point per tensor) over float weight bytes."""
    fbytes = float_ckpt.payload_bytes("params/")
    qbytes = q_ckpt.payload_bytes("q/")
    if include_qparams:
        qbytes += 12 * len(q_ckpt.meta["weight_qparams"])
    return qbytes / fbytes
