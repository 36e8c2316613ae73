"""Convolutional building blocks on top of :mod:`itmn.tensor`.

Functional kernels (``conv2d``, ``depthwise_conv2d``, ``max_pool2d`` ...)
take and return :class:`~itmn.tensor.Tensor` in NCHW layout.  The layer
classes own their parameters and call the kernels; the detector is written
only in terms of ``layer(x)`` calls so the quantizer can swap layers out.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, add, broadcast_to, matmul, record, reduce, relu

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_extent(h, w, k, stride, padding):
    ho, wo = output_extent(h, k, stride, padding), output_extent(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"input {h}x{w} too small for kernel {k} with padding {padding}")
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Channel-major patch matrix [C*k*k, N*Ho*Wo]; columns in (n, y, x) order."""
    n, c, h, w = x.shape
    ho, wo = _check_extent(h, w, k, stride, padding)
    xp = _pad(x, padding).transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back into an NCHW array."""
    n, c, h, w = shape
    patches = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    xpt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            xpt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += patches[:, i, j]
    return _unpad(xp, padding)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation.  ``weight`` is [out, in, k, k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    out_c, in_c, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {weight.shape}")
    if x.shape[1] != in_c:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {in_c}")
    n = x.shape[0]
    cols, ho, wo = im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(out_c, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(out_c, n, ho, wo).transpose(1, 0, 2, 3))
    xshape = x.shape

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(out_c, -1)
        gx = col2im(wmat.T @ gm, xshape, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1) if bias.requires_grad else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation.  ``weight`` is [C, 1, k, k]."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects NCHW input, got shape {x.shape}")
    c, one, k, _ = weight.shape
    if one != 1 or x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, depthwise weight is {weight.shape}")
    n, _, h, w = x.shape
    ho, wo = _check_extent(h, w, k, stride, padding)
    xp = _pad(x.data, padding)
    wk = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] * wk[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wk)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
                if gxp is not None:
                    gxp[sl] += g * wk[None, :, i, j, None, None]
                gw[:, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        grads = [_unpad(gxp, padding) if gxp is not None else None, gw[:, None]]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling with floor extents; ties go to the first cell in row-major order."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise ShapeError(f"input {h}x{w} is smaller than the pooling window {window}")
    xd = x.data
    views = [xd[:, :, i : ho * window : window, j : wo * window : window] for i in range(window) for j in range(window)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g):
        gx = np.zeros_like(xd)
        free = np.ones(out.shape, dtype=bool)
        for idx, v in enumerate(views):
            i, j = divmod(idx, window)
            hit = (v == out) & free
            gx[:, :, i : ho * window : window, j : wo * window : window] = g * hit
            free &= ~hit
        return (gx,)

    return record(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    return reduce("mean", x, (2, 3))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias, with weight stored as [d_out, d_in]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, weight.transpose())
    return add(y, broadcast_to(bias, y.shape))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance, as is conventional).
    """
    n, c, h, w = x.shape
    xd = x.data
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        a = (gamma.data * inv).astype(xd.dtype)
        b = (beta.data - running_mean * gamma.data * inv).astype(xd.dtype)
        out = xd * a[None, :, None, None] + b[None, :, None, None]

        def backward(g):
            return (g * a[None, :, None, None], (g * ((xd - running_mean[None, :, None, None]) * inv[None, :, None, None])).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return record(out.astype(xd.dtype), (x, gamma, beta), backward)

    m = n * h * w
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    if m > 1:
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat - gxhat.sum(axis=(0, 2, 3))[None, :, None, None] - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return gx, gg, gb

    return record(out.astype(xd.dtype), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# parameter-owning layers
# ---------------------------------------------------------------------------


class Layer:
    """Minimal parameter container.  Children are registered as attributes."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Layer] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Layer) and name != "_children" and "_children" in self.__dict__:
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def add_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvLayer(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.add_param("weight", _uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.add_param("bias", (rng.uniform(-1, 1, size=out_channels) / math.sqrt(fan_in)).astype(dtype))

    def out_extent(self, size: int) -> int:
        return output_extent(size, self.kernel_size, self.stride, self.padding)

    def macs(self, h: int, w: int) -> int:
        return self.out_extent(h) * self.out_extent(w) * self.out_channels * self.in_channels * self.kernel_size ** 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConvLayer(Layer):
    def __init__(self, channels: int, kernel_size: int = 3, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = self.out_channels = channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.add_param("weight", _uniform(rng, (channels, 1, kernel_size, kernel_size), kernel_size * kernel_size, dtype))

    def out_extent(self, size: int) -> int:
        return output_extent(size, self.kernel_size, self.stride, self.padding)

    def macs(self, h: int, w: int) -> int:
        return self.out_extent(h) * self.out_extent(w) * self.in_channels * self.kernel_size ** 2

    def __call__(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, None, self.stride, self.padding)


class SeparableConvLayer(Layer):
    """Depthwise k x k (no bias) followed by a biased 1 x 1 pointwise conv."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.depthwise = DepthwiseConvLayer(in_channels, kernel_size, stride, padding, rng, dtype)
        self.pointwise = ConvLayer(in_channels, out_channels, 1, 1, 0, rng, dtype)

    def out_extent(self, size: int) -> int:
        return output_extent(size, self.kernel_size, self.stride, self.padding)

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.out_extent(h), self.out_extent(w)
        return self.depthwise.macs(h, w) + self.pointwise.macs(ho, wo)

    def __call__(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


def dense_parameter_count(in_channels: int, out_channels: int, k: int) -> int:
    return in_channels * out_channels * k * k


def separable_parameter_count(in_channels: int, out_channels: int, k: int) -> int:
    """Kernel weights only (biases excluded), for comparison with a dense conv."""
    return in_channels * k * k + in_channels * out_channels


class BatchNormLayer(Layer):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.add_buffer("running_var", np.ones(channels, dtype=np.float64))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)

    def inference_affine(self):
        """(a, b) such that inference output = a * x + b per channel."""
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        a = self.gamma.data * inv
        return a, self.beta.data - self.running_mean * a


class FullyConnectedLayer(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = d_in, d_out
        self.add_param("weight", _uniform(rng, (d_out, d_in), d_in, dtype))
        self.add_param("bias", (rng.uniform(-1, 1, size=d_out) / math.sqrt(d_in)).astype(dtype))

    def macs(self) -> int:
        return self.in_features * self.out_features

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


class NINBlock(Layer):
    """1 x 1 conv mapping 2C concatenated channels back to C, then ReLU."""

    def __init__(self, in_channels: int, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        if in_channels % 2:
            raise ShapeError(f"NIN block needs an even channel count, got {in_channels}")
        self.conv = ConvLayer(in_channels, in_channels // 2, 1, 1, 0, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2:
            raise ShapeError(f"NIN block needs an even channel count, got {x.shape[1]}")
        return relu(self.conv(x))


def nin_block(x: Tensor, block: NINBlock) -> Tensor:
    return block(x)
