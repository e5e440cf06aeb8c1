"""A small reverse-mode network engine: the layers the refiner needs, plus Adam.

Every layer caches what it needs during ``forward`` and returns the gradient
with respect to its input from ``backward``, accumulating parameter gradients
into the ``grad`` buffers of its :class:`Tensor` parameters. Chaining the
``backward`` calls in reverse order is the whole of reverse-mode
differentiation for the fixed architecture.

Values are float32; batch statistics and per-channel reductions accumulate in
float64. Passing float64 inputs keeps the whole computation in float64, which
is what the finite-difference gradient checks use.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from typing import BinaryIO

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CheckpointError,
    NumericDegeneracyError,
    ShapeError,
    TrainingDivergenceError,
)

DTYPE = np.float32


class Tensor:
    """Float array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, requires_grad: bool = True, name: str = ""):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # rows: (n, oh, ow); columns: (c, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            xp[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j, :, :]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _work_dtype(x: np.ndarray):
    return np.float64 if x.dtype == np.float64 else DTYPE


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (F, C, KH, KW).

    Implemented as im2col followed by one matrix product. Returns ``(out, cache)``.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    f, c, kh, kw = weight.shape
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    n, _, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw or stride < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape} with padding {padding}")
    dt = _work_dtype(x)
    cols, oh, ow = _im2col(x.astype(dt, copy=False), kh, kw, stride, padding)
    out = cols @ weight.reshape(f, -1).T.astype(dt) + bias.astype(dt)
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, weight, stride, padding, oh, ow)


def conv2d_backward(dout: np.ndarray, cache, input_grad: bool = True):
    """Returns ``(dx, dweight, dbias)``; ``dx`` is None when ``input_grad`` is false."""
    cols, x_shape, weight, stride, pad, oh, ow = cache
    f, c, kh, kw = weight.shape
    dt = cols.dtype
    d = dout.astype(dt, copy=False).transpose(0, 2, 3, 1).reshape(-1, f)
    dbias = d.sum(axis=0, dtype=np.float64)
    dw = (d.T @ cols).reshape(weight.shape)
    dx = None
    if input_grad:
        if stride == 1 and kh - 1 - pad >= 0 and kw - 1 - pad >= 0 and kh == kw:
            # full correlation of dout with the flipped, channel-swapped kernel
            flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).astype(dt)
            dx, _ = conv2d_forward(dout.astype(dt, copy=False), flipped, np.zeros(c, dt), 1, kh - 1 - pad)
        else:
            dcols = d @ weight.reshape(f, -1).astype(dt)
            dx = _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow)
        dx = dx.astype(dout.dtype, copy=False)
    return dx, dw.astype(weight.dtype), dbias.astype(weight.dtype)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct loop implementation, used as a test oracle."""
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for k in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = float(np.sum(patch * weight[k])) + float(bias[k])
    return out


# ---------------------------------------------------------------------------
# batch norm, pooling, dense, activations


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalization over (N, H, W) for 4D input, (N,) for 2D.

    In train mode the running statistics arrays are updated in place.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {x.shape} has {x.shape[1]} channels, params have {gamma.shape[0]}")
    dt = x.dtype
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2")
        mean = x.mean(axis=axes, dtype=np.float64)
        centered = x - mean.astype(dt).reshape(bshape)
        var = np.square(centered).mean(axis=axes, dtype=np.float64)
        count = x.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mean).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += (momentum * var * count / max(count - 1, 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x - mean.astype(dt).reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.astype(dt).reshape(bshape)
    out = xhat * gamma.astype(dt).reshape(bshape) + beta.astype(dt).reshape(bshape)
    return out, (xhat, inv_std, gamma, axes, bshape, train)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, axes, bshape, train = cache
    dt = dout.dtype
    dbeta = dout.sum(axis=axes, dtype=np.float64)
    dgamma = (dout * xhat).sum(axis=axes, dtype=np.float64)
    g = gamma.astype(np.float64)
    if train:
        m = dout.size // dout.shape[1]
        # dxhat = dout * gamma, folded into the per-channel coefficients
        scale = (g * inv_std).astype(dt).reshape(bshape)
        dx = scale * (dout - (dbeta / m).astype(dt).reshape(bshape)
                      - xhat * (dgamma / m).astype(dt).reshape(bshape))
    else:
        dx = dout * (g * inv_std).astype(dt).reshape(bshape)
    return dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x2_backward(dout: np.ndarray, cache) -> np.ndarray:
    """Routes each gradient to its window's argmax (first in row-major order on ties)."""
    idx, x_shape = cache
    n, c, h, w = x_shape
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """``y = x W^T + b`` for a batch of row vectors; ``weight`` is (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"fc: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
    return x @ weight.T + bias, (x, weight)


def fc_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def concat_forward(xs: list[np.ndarray]):
    """Concatenate along the feature axis (axis 1)."""
    sizes = [x.shape[1] for x in xs]
    return np.concatenate(xs, axis=1), sizes


def concat_backward(dout: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


def l2_normalize_forward(x: np.ndarray, min_norm: float = 1e-12):
    norm = np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericDegeneracyError("l2_normalize: non-finite input")
    if np.any(norm < min_norm):
        raise NumericDegeneracyError(f"l2_normalize: row norm {float(norm.min()):.3g} below {min_norm}")
    y = x / norm.astype(x.dtype)
    return y, (y, norm.astype(x.dtype))


def l2_normalize_backward(dout: np.ndarray, cache) -> np.ndarray:
    y, norm = cache
    return (dout - y * np.sum(y * dout, axis=1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """Base layer: parameters are :class:`Tensor` attributes listed in ``params``."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, padding: int = 0, stride: int = 1,
                 rng: np.random.Generator | None = None, input_grad: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.input_grad = input_grad
        fan_in = in_ch * kernel * kernel
        self.params["weight"] = Tensor(_kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.params["bias"] = Tensor(_fan_in_uniform(rng, (out_ch,), fan_in))
        self.stride, self.padding = stride, padding
        self._cache = None

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.params["weight"].data, self.params["bias"].data,
                                          self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache, self.input_grad)
        self.params["weight"].grad += dw
        self.params["bias"].grad += db
        return dx


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.params["gamma"] = Tensor(np.ones(channels, DTYPE))
        self.params["beta"] = Tensor(np.zeros(channels, DTYPE))
        self.buffers["running_mean"] = np.zeros(channels, DTYPE)
        self.buffers["running_var"] = np.ones(channels, DTYPE)
        self.momentum, self.eps = momentum, eps
        self._cache = None

    def forward(self, x):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"].data, self.params["beta"].data,
            self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, dg, db = batchnorm_backward(dout, self._cache)
        self.params["gamma"].grad += dg
        self.params["beta"].grad += db
        return dx


class MaxPool2x2(Layer):
    def forward(self, x):
        out, self._cache = maxpool2x2_forward(x)
        return out

    def backward(self, dout):
        return maxpool2x2_backward(dout, self._cache)


class ReLU(Layer):
    def forward(self, x):
        out, self._mask = relu_forward(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._mask)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, relu_follows: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        init = _kaiming_uniform if relu_follows else _fan_in_uniform
        self.params["weight"] = Tensor(init(rng, (n_out, n_in), n_in))
        self.params["bias"] = Tensor(np.zeros(n_out, DTYPE))
        self._cache = None

    def forward(self, x):
        out, self._cache = fc_forward(x, self.params["weight"].data, self.params["bias"].data)
        return out

    def backward(self, dout):
        dx, dw, db = fc_backward(dout, self._cache)
        self.params["weight"].grad += dw
        self.params["bias"].grad += db
        return dx


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer


def set_training(layers, flag: bool):
    for layer in layers:
        layer.training = flag
        if isinstance(layer, Sequential):
            set_training(layer.layers, flag)


# ---------------------------------------------------------------------------
# optimizer


@njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, beta1, beta2, step_size, sqrt_bc2, eps):
    # single float32 pass over memory; gradients are checked finite beforehand
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    c1 = np.float32(1.0 - beta1)
    c2 = np.float32(1.0 - beta2)
    s = np.float32(step_size)
    inv = np.float32(1.0 / sqrt_bc2)
    e = np.float32(eps)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= s * mi / (np.sqrt(vi) * inv + e)


class Adam:
    """Bias-corrected Adam over a list of :class:`Tensor` parameters."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise TrainingDivergenceError(f"non-finite gradient in parameter {p.name or p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            _adam_kernel(p.data.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                         self.beta1, self.beta2, self.lr / bc1, math.sqrt(bc2), self.eps)


def adam_step(params: list[Tensor], state: Adam) -> Adam:
    """Functional form of :meth:`Adam.step`; ``params`` must be the ones ``state`` tracks."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ShapeError("adam_step: parameter list does not match optimizer state")
    state.step()
    return state


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all integers little-endian uint32):
#   magic  b"PRCKPT\0\1" (8 bytes)
#   version
#   entry count
#   per entry: name length, name (UTF-8), rank, dims[rank], float32 LE payload

MAGIC = b"PRCKPT\x00\x01"
FORMAT_VERSION = 1


def write_checkpoint(fh: BinaryIO, entries: "OrderedDict[str, np.ndarray]"):
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", a.ndim))
        if a.ndim:
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def read_checkpoint(fh: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
        out[name] = payload.reshape(dims).astype(DTYPE)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out
