"""Dense float64 tensors and a reverse-mode gradient tape.

A :class:`Tensor` is an immutable row-major float64 array. Operations are free
functions that optionally record onto a :class:`GradTape`; replaying the tape
backward yields gradients for every watched tensor. Gradient accumulation
order is fixed by tape order, so seeded runs are bitwise reproducible.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NonFiniteError, ShapeError


class Tensor:
    """Immutable dense float64 value. ``data`` is a read-only numpy array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains non-finite values")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for freshly computed op outputs: no copy, same checks.
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite values")
        arr.setflags(write=False)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls._wrap(np.full(shape, float(value), dtype=np.float64))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class GradTape:
    """Ordered record of primitive operations applied to tracked tensors.

    Single-owner: one training step builds and consumes one tape.
    """

    def __init__(self):
        self._ops = []          # (out, backward_fn) in execution order
        self._tracked = set()   # id() of tensors on the tape
        self._alive = []        # keeps tracked tensors alive so ids are stable

    def watch(self, t: Tensor) -> Tensor:
        self._tracked.add(id(t))
        self._alive.append(t)
        return t

    def _tracks(self, *tensors: Tensor) -> bool:
        return any(id(t) in self._tracked for t in tensors)

    def _record(self, out: Tensor, backward) -> None:
        self._tracked.add(id(out))
        self._alive.append(out)
        self._ops.append((out, backward))

    def backward(self, loss: Tensor) -> dict:
        """Replay the tape in reverse; returns {watched tensor: gradient}."""
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}

        def accumulate(t: Tensor, g: np.ndarray):
            if id(t) not in self._tracked:
                return
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g

        for out, bwd in reversed(self._ops):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            bwd(g_out, accumulate)

        result = {}
        for t in self._watched_leaves():
            g = grads.get(id(t))
            result[t] = Tensor._wrap(g if g is not None
                                     else np.zeros(t.shape, dtype=np.float64))
        return result

    def _watched_leaves(self):
        produced = {id(out) for out, _ in self._ops}
        seen = set()
        for t in self._alive:
            if id(t) in produced or id(t) in seen:
                continue
            seen.add(id(t))
            yield t


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Gradients of a scalar loss for every tensor watched on the tape."""
    return tape.backward(loss)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    if tape is not None and tape._tracks(a, b):
        def bwd(g, acc):
            acc(a, g)
            acc(b, g)
        tape._record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    if tape is not None and tape._tracks(a, b):
        def bwd(g, acc):
            acc(a, g)
            acc(b, -g)
        tape._record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    if tape is not None and tape._tracks(a, b):
        def bwd(g, acc):
            acc(a, g * b.data)
            acc(b, g * a.data)
        tape._record(out, bwd)
    return out


def scale(a: Tensor, s: float, tape: GradTape | None = None) -> Tensor:
    # Scalar-tensor product is the only permitted broadcast.
    s = float(s)
    out = Tensor._wrap(a.data * s)
    if tape is not None and tape._tracks(a):
        def bwd(g, acc):
            acc(a, g * s)
        tape._record(out, bwd)
    return out


def matmul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = Tensor._wrap(a.data @ b.data)
    if tape is not None and tape._tracks(a, b):
        def bwd(g, acc):
            acc(a, g @ b.data.T)
            acc(b, a.data.T @ g)
        tape._record(out, bwd)
    return out


def relu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0.0))
    if tape is not None and tape._tracks(x):
        mask = x.data > 0.0
        def bwd(g, acc):
            acc(x, g * mask)
        tape._record(out, bwd)
    return out


def ssum(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor._wrap(np.sum(x.data).reshape(()))
    if tape is not None and tape._tracks(x):
        def bwd(g, acc):
            acc(x, np.full(x.shape, float(g), dtype=np.float64))
        tape._record(out, bwd)
    return out


def mean(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor._wrap(np.mean(x.data).reshape(()))
    if tape is not None and tape._tracks(x):
        inv = 1.0 / x.size
        def bwd(g, acc):
            acc(x, np.full(x.shape, float(g) * inv, dtype=np.float64))
        tape._record(out, bwd)
    return out


def softplus(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    out = Tensor._wrap(np.logaddexp(0.0, x.data))
    if tape is not None and tape._tracks(x):
        def bwd(g, acc):
            sig = 1.0 / (1.0 + np.exp(-x.data))
            acc(x, g * sig)
        tape._record(out, bwd)
    return out


def concat_channels(parts: Sequence[Tensor], tape: GradTape | None = None) -> Tensor:
    """Concatenate [C,H,W] tensors along the channel axis."""
    if not parts:
        raise ContractError("concat_channels: empty input list")
    hw = parts[0].shape[1:]
    for p in parts:
        if p.ndim != 3 or p.shape[1:] != hw:
            raise ShapeError(
                f"concat_channels: shapes {[p.shape for p in parts]} disagree")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=0))
    if tape is not None and tape._tracks(*parts):
        splits = np.cumsum([p.shape[0] for p in parts])[:-1]
        def bwd(g, acc):
            for p, gp in zip(parts, np.split(g, splits, axis=0)):
                acc(p, gp)
        tape._record(out, bwd)
    return out


def add_channel_bias(x: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """[C,H,W] plus per-channel bias [C]."""
    if x.ndim != 3 or b.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"add_channel_bias: shapes {x.shape} and {b.shape}")
    out = Tensor._wrap(x.data + b.data[:, None, None])
    if tape is not None and tape._tracks(x, b):
        def bwd(g, acc):
            acc(x, g)
            acc(b, g.sum(axis=(1, 2)))
        tape._record(out, bwd)
    return out


def log_softmax_channels(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Log-softmax over the channel axis of a [K,H,W] tensor."""
    if x.ndim != 3:
        raise ShapeError(f"log_softmax_channels: need [K,H,W], got {x.shape}")
    m = x.data.max(axis=0, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True)) + m
    out = Tensor._wrap(x.data - lse)
    if tape is not None and tape._tracks(x):
        sm = np.exp(out.data)
        def bwd(g, acc):
            acc(x, g - sm * g.sum(axis=0, keepdims=True))
        tape._record(out, bwd)
    return out


def permute_grid(x: Tensor, index_map: np.ndarray,
                 tape: GradTape | None = None) -> Tensor:
    """Permute the H*W grid cells of a [C,H,W] tensor.

    ``index_map[i]`` is the destination linear cell of source cell ``i``;
    it must be a bijection. Channels are never mixed.
    """
    if x.ndim != 3:
        raise ShapeError(f"permute_grid: need [C,H,W], got {x.shape}")
    c, h, w = x.shape
    index_map = np.asarray(index_map)
    if index_map.shape != (h * w,):
        raise ShapeError(f"permute_grid: map length {index_map.shape} "
                         f"vs grid {h}x{w}")
    flat = x.data.reshape(c, h * w)
    out_flat = np.empty_like(flat)
    out_flat[:, index_map] = flat
    out = Tensor._wrap(out_flat.reshape(c, h, w))
    if tape is not None and tape._tracks(x):
        def bwd(g, acc):
            acc(x, g.reshape(c, h * w)[:, index_map].reshape(c, h, w))
        tape._record(out, bwd)
    return out


def _conv_cols(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # [C, H+2p, W+2p] -> [C*k*k, oh*ow] column matrix.
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # [C, oh, ow, k, k]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, oh * ow)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0,
           tape: GradTape | None = None) -> Tensor:
    """Cross-correlate [C,H,W] with [F,C,k,k] kernels."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: need [C,H,W] and [F,C,k,k], "
                         f"got {x.shape} and {kernels.shape}")
    f, kc, kh, kw = kernels.shape
    c, h, w = x.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernels must be square, got {kernels.shape}")
    if kc != c:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernels {kernels.shape}")
    k = kh
    if k % 2 != 1:
        raise ConfigError(f"conv2d: kernel size {k} must be odd")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: bad stride={stride} pad={pad}")
    if (h + 2 * pad - k) % stride != 0 or (w + 2 * pad - k) % stride != 0:
        raise ConfigError(
            f"conv2d: output size not integral for input {x.shape}, "
            f"kernel {k}, stride {stride}, pad {pad}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _conv_cols(xp, k, stride, oh, ow)
    wmat = kernels.data.reshape(f, c * k * k)
    out = Tensor._wrap((wmat @ cols).reshape(f, oh, ow))

    if tape is not None and tape._tracks(x, kernels):
        def bwd(g, acc):
            gmat = g.reshape(f, oh * ow)
            acc(kernels, (gmat @ cols.T).reshape(kernels.shape))
            gcols = (wmat.T @ gmat).reshape(c, k, k, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * oh:stride,
                        j:j + stride * ow:stride] += gcols[:, i, j]
            acc(x, gxp[:, pad:pad + h, pad:pad + w] if pad else gxp)
        tape._record(out, bwd)
    return out


def avg_pool2d(x: Tensor, k: int, tape: GradTape | None = None) -> Tensor:
    """Non-overlapping k-by-k average pooling of a [C,H,W] tensor."""
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2d: need [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % k != 0 or w % k != 0:
        raise ConfigError(f"avg_pool2d: {h}x{w} not a multiple of {k}")
    out = Tensor._wrap(x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4)))
    if tape is not None and tape._tracks(x):
        inv = 1.0 / (k * k)
        def bwd(g, acc):
            acc(x, np.repeat(np.repeat(g * inv, k, axis=1), k, axis=2))
        tape._record(out, bwd)
    return out


def space_to_depth(x: Tensor, k: int, tape: GradTape | None = None) -> Tensor:
    """Rearrange non-overlapping k-by-k pixel blocks of a [C,H,W] tensor into
    channels: output [C*k*k, H/k, W/k] with out[c*k*k + dy*k + dx, i, j] =
    x[c, i*k+dy, j*k+dx]."""
    if x.ndim != 3:
        raise ShapeError(f"space_to_depth: need [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % k != 0 or w % k != 0:
        raise ConfigError(f"space_to_depth: {h}x{w} not a multiple of {k}")
    oh, ow = h // k, w // k
    out = Tensor._wrap(x.data.reshape(c, oh, k, ow, k)
                       .transpose(0, 2, 4, 1, 3).reshape(c * k * k, oh, ow))
    if tape is not None and tape._tracks(x):
        def bwd(g, acc):
            acc(x, g.reshape(c, k, k, oh, ow)
                .transpose(0, 3, 1, 4, 2).reshape(c, h, w))
        tape._record(out, bwd)
    return out


def upsample_nearest(m: Tensor, target_h: int, target_w: int,
                     tape: GradTape | None = None) -> Tensor:
    """Nearest-neighbor upsampling of an [H,W] map to integer-multiple size."""
    if m.ndim != 2:
        raise ShapeError(f"upsample_nearest: need [H,W], got {m.shape}")
    h, w = m.shape
    if target_h < h or target_w < w or target_h % h != 0 or target_w % w != 0:
        raise ConfigError(
            f"upsample_nearest: target {target_h}x{target_w} is not an "
            f"integer multiple of {h}x{w}")
    rh, rw = target_h // h, target_w // w
    out = Tensor._wrap(np.repeat(np.repeat(m.data, rh, axis=0), rw, axis=1))
    if tape is not None and tape._tracks(m):
        def bwd(g, acc):
            acc(m, g.reshape(h, rh, w, rw).sum(axis=(1, 3)))
        tape._record(out, bwd)
    return out
