"""Minimal reverse-mode autodiff over float64 numpy arrays.

The op set is exactly what the descriptor network and its training loss
need: affine layers, ReLU, segment/global max pooling, the azimuth-periodic
cylindrical convolution, row normalization, pairwise distances, and scalar
reductions. Every op records a closure that accumulates gradients into its
parents; backward() runs the tape in reverse topological order. Max-style
ops route gradient to the first (lowest index) argmax on ties.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import MagicMismatch, NoForwardRecorded, ShapeMismatch

CHECKPOINT_MAGIC = b"SPINKIT1"


class Variable:
    """Node in the computation tape: a value, a grad slot, and parents."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # copy: g may be aliased
        else:
            self.grad += g


def backward(root: Variable) -> None:
    """Reverse-accumulate gradients of a scalar root through the tape."""
    if root.value.size != 1:
        raise ShapeMismatch("backward needs a scalar root")
    if not root._parents:
        raise NoForwardRecorded("no computation recorded for this value")
    topo: list[Variable] = []
    visited: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    root._accumulate(np.ones_like(root.value))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def constant(value) -> Variable:
    return Variable(value)


def add(a: Variable, b: Variable) -> Variable:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = Variable(a.value + b.value, (a, b))
    out._backward = lambda g: (a._accumulate(g), b._accumulate(g))
    return out


def sub(a: Variable, b: Variable) -> Variable:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    out = Variable(a.value - b.value, (a, b))
    out._backward = lambda g: (a._accumulate(g), b._accumulate(-g))
    return out


def mul(a: Variable, b: Variable) -> Variable:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = Variable(a.value * b.value, (a, b))
    out._backward = lambda g: (a._accumulate(g * b.value), b._accumulate(g * a.value))
    return out


def scale(a: Variable, factor: float) -> Variable:
    out = Variable(a.value * factor, (a,))
    out._backward = lambda g: a._accumulate(g * factor)
    return out


def shift(a: Variable, offset: float) -> Variable:
    out = Variable(a.value + offset, (a,))
    out._backward = lambda g: a._accumulate(g)
    return out


def square(a: Variable) -> Variable:
    out = Variable(a.value * a.value, (a,))
    out._backward = lambda g: a._accumulate(2.0 * a.value * g)
    return out


def sqrt(a: Variable) -> Variable:
    """Elementwise square root; subgradient 0 at exactly zero inputs."""
    y = np.sqrt(a.value)
    out = Variable(y, (a,))

    def back(g):
        safe = np.where(a.value > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        a._accumulate(g * safe)

    out._backward = back
    return out


def relu(a: Variable) -> Variable:
    out = Variable(np.maximum(a.value, 0.0), (a,))
    out._backward = lambda g: a._accumulate(g * (a.value > 0))
    return out


def matmul(a: Variable, b: Variable) -> Variable:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = Variable(a.value @ b.value, (a, b))
    out._backward = lambda g: (a._accumulate(g @ b.value.T), b._accumulate(a.value.T @ g))
    return out


def add_bias(a: Variable, bias: Variable) -> Variable:
    if bias.value.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeMismatch(f"add_bias: {a.shape} + {bias.shape}")
    out = Variable(a.value + bias.value, (a, bias))
    axes = tuple(range(a.value.ndim - 1))
    out._backward = lambda g: (a._accumulate(g), bias._accumulate(g.sum(axis=axes)))
    return out


def reshape(a: Variable, shape) -> Variable:
    out = Variable(a.value.reshape(shape), (a,))
    out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def reduce_sum(a: Variable) -> Variable:
    out = Variable(np.array(a.value.sum()), (a,))
    out._backward = lambda g: a._accumulate(np.full_like(a.value, float(g)))
    return out


def reduce_mean(a: Variable) -> Variable:
    n = a.value.size
    out = Variable(np.array(a.value.mean()), (a,))
    out._backward = lambda g: a._accumulate(np.full_like(a.value, float(g) / n))
    return out


def gather(a: Variable, flat_indices) -> Variable:
    """Pick entries of the flattened input; duplicates accumulate on backward."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = Variable(a.value.reshape(-1)[idx], (a,))

    def back(g):
        acc = np.zeros(a.value.size)
        np.add.at(acc, idx, g)
        a._accumulate(acc.reshape(a.shape))

    out._backward = back
    return out


def gather_rows(a: Variable, row_indices) -> Variable:
    idx = np.asarray(row_indices, dtype=np.intp)
    out = Variable(a.value[idx], (a,))

    def back(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    out._backward = back
    return out


def segment_max(a: Variable, offsets: np.ndarray) -> Variable:
    """Per-segment columnwise max over CSR-style row segments.

    offsets has S+1 entries delimiting segments of the (N, D) input; empty
    segments produce a zero row. Gradient routes to the first max row.
    """
    if a.value.ndim != 2:
        raise ShapeMismatch("segment_max expects (N, D)")
    offsets = np.asarray(offsets, dtype=np.intp)
    n, d = a.value.shape
    segments = len(offsets) - 1
    lengths = np.diff(offsets)
    nonempty = np.flatnonzero(lengths > 0)
    out_val = np.zeros((segments, d))
    if len(nonempty):
        starts = offsets[:-1][nonempty]
        out_val[nonempty] = np.maximum.reduceat(a.value, starts, axis=0)
    out = Variable(out_val, (a,))

    def back(g):
        if not len(nonempty):
            a._accumulate(np.zeros_like(a.value))
            return
        starts = offsets[:-1][nonempty]
        seg_of_row = np.repeat(np.arange(segments), lengths)
        is_max = a.value == out_val[seg_of_row]
        row_or_n = np.where(is_max, np.arange(n)[:, None], n)
        first_rows = np.minimum.reduceat(row_or_n, starts, axis=0)
        acc = np.zeros_like(a.value)
        # One argmax row per (segment, column): targets are unique, so a
        # plain fancy-index write is safe and faster than ufunc.at.
        cols = np.broadcast_to(np.arange(d), first_rows.shape)
        acc[first_rows, cols] = g[nonempty]
        a._accumulate(acc)

    out._backward = back
    return out


def global_maxpool(a: Variable) -> Variable:
    """Channelwise max over all spatial positions of a (..., D) feature map.

    Accepts (J, K, L, D) -> (D,) or batched (B, J, K, L, D) -> (B, D).
    """
    if a.value.ndim == 4:
        return reshape(global_maxpool(reshape(a, (1,) + a.shape)), a.shape[-1:])
    if a.value.ndim != 5:
        raise ShapeMismatch("global_maxpool expects a 4-D or 5-D feature map")
    b = a.shape[0]
    d = a.shape[-1]
    flat = a.value.reshape(b, -1, d)
    idx = np.argmax(flat, axis=1)
    out = Variable(np.max(flat, axis=1), (a,))

    def back(g):
        acc = np.zeros_like(flat)
        bb = np.arange(b)[:, None]
        dd = np.arange(d)[None, :]
        acc[bb, idx, dd] = g  # one argmax per (batch, channel): unique targets
        a._accumulate(acc.reshape(a.shape))

    out._backward = back
    return out


def l2_normalize_rows(a: Variable) -> Variable:
    if a.value.ndim not in (1, 2):
        raise ShapeMismatch("l2_normalize_rows expects (D,) or (B, D)")
    vec = a.value.ndim == 1
    x = a.value[None, :] if vec else a.value
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot L2-normalize a zero vector")
    y = x / norms
    out = Variable(y[0] if vec else y, (a,))

    def back(g):
        gm = g[None, :] if vec else g
        proj = np.sum(gm * y, axis=1, keepdims=True)
        gx = (gm - y * proj) / norms
        a._accumulate(gx[0] if vec else gx)

    out._backward = back
    return out


def pairwise_distances(a: Variable, b: Variable) -> Variable:
    """Euclidean distance matrix between row sets: out[i, j] = ||a_i - b_j||."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"pairwise_distances: {a.shape} vs {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    out = Variable(dist, (a, b))

    def back(g):
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, g / safe, 0.0)
        ga = np.einsum("ij,ijk->ik", coef, diff)
        a._accumulate(ga)
        b._accumulate(-np.einsum("ij,ijk->jk", coef, diff))

    out._backward = back
    return out


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one cylindrical convolution layer.

    Kernel extents are (radial, height, azimuth); the azimuth axis wraps
    (periodic), radial and height are valid (no padding). Strides apply
    per axis in the same order.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel extents and strides must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def weight_shape(self):
        return self.kernel + (self.in_channels, self.out_channels)

    def output_spatial(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        j, k, l = spatial
        kr, ky, kx = self.kernel
        sj, sk, sl = self.stride
        if j < kr or k < ky:
            raise ShapeMismatch(
                f"spatial extents {spatial} smaller than kernel {self.kernel}"
            )
        return ((j - kr) // sj + 1, (k - ky) // sk + 1, math.ceil(l / sl))


def cyl_conv(a: Variable, weight: Variable, spec: ConvSpec) -> Variable:
    """Cylindrical convolution: valid on radial/height, periodic on azimuth.

    out[b, j, k, l, e] = sum_{r, y, x, d} w[r, y, x, d, e] *
                         in[b, j*sj + r, k*sk + y, (l*sl + x - cx) mod L, d]

    where cx = (X - 1) // 2 centers the wrap-around window on the output
    azimuth position.
    """
    squeeze = a.value.ndim == 4
    xv = a.value[None] if squeeze else a.value
    if xv.ndim != 5:
        raise ShapeMismatch("cyl_conv expects a 4-D or 5-D feature map")
    if xv.shape[-1] != spec.in_channels:
        raise ShapeMismatch(
            f"input has {xv.shape[-1]} channels, spec expects {spec.in_channels}"
        )
    if weight.shape != spec.weight_shape:
        raise ShapeMismatch(
            f"weight shape {weight.shape} does not match spec {spec.weight_shape}"
        )
    bsz, jj, kk, ll, din = xv.shape
    jo, ko, lo = spec.output_spatial((jj, kk, ll))
    kr, ky, kx = spec.kernel
    sj, sk, sl = spec.stride
    az_base = np.arange(lo) * sl - (kx - 1) // 2
    az_idx = [(az_base + x) % ll for x in range(kx)]
    az_unique = [len(np.unique(ix)) == lo for ix in az_idx]
    offsets = [(r, y, x) for r in range(kr) for y in range(ky) for x in range(kx)]

    # im2col: one BLAS GEMM for the forward pass and one each for the two
    # gradients; the column matrix is kept alive on the tape for backward.
    n_rows = bsz * jo * ko * lo
    cols = np.empty((n_rows, len(offsets) * din))
    for pos, (r, y, x) in enumerate(offsets):
        view = xv[:, r : r + sj * (jo - 1) + 1 : sj, y : y + sk * (ko - 1) + 1 : sk]
        cols[:, pos * din : (pos + 1) * din] = view[:, :, :, az_idx[x], :].reshape(n_rows, din)
    w2 = weight.value.reshape(len(offsets) * din, spec.out_channels)
    acc = (cols @ w2).reshape(bsz, jo, ko, lo, spec.out_channels)
    out = Variable(acc[0] if squeeze else acc, (a, weight))

    def back(g):
        g2 = (g[None] if squeeze else g).reshape(n_rows, spec.out_channels)
        weight._accumulate((cols.T @ g2).reshape(weight.shape))
        gcols = g2 @ w2.T
        gx = np.zeros_like(xv)
        for pos, (r, y, x) in enumerate(offsets):
            gslab = gcols[:, pos * din : (pos + 1) * din].reshape(bsz, jo, ko, lo, din)
            view = gx[:, r : r + sj * (jo - 1) + 1 : sj, y : y + sk * (ko - 1) + 1 : sk]
            if az_unique[x]:
                view[:, :, :, az_idx[x], :] += gslab
            else:
                np.add.at(view, (slice(None), slice(None), slice(None), az_idx[x]), gslab)
        a._accumulate(gx[0] if squeeze else gx)

    out._backward = back
    return out


class ParamStore:
    """Named parameter tensors with gradient slots and Adam state."""

    def __init__(self):
        self._params: dict[str, Variable] = {}
        self._moment1: dict[str, np.ndarray] = {}
        self._moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Variable:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        var = Variable(np.array(value, dtype=np.float64))
        self._params[name] = var
        self._moment1[name] = np.zeros_like(var.value)
        self._moment2[name] = np.zeros_like(var.value)
        return var

    def __getitem__(self, name: str) -> Variable:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(v.value.size for v in self._params.values())

    def clear_grads(self) -> None:
        for var in self._params.values():
            var.grad = None

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Bias-corrected Adam update; increments the step counter and clears grads."""
        missing = [n for n, v in self._params.items() if v.grad is None]
        if missing:
            raise ValueError(f"gradients not populated for: {missing[:3]}")
        t = self.step_count + 1
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for name, var in self._params.items():
            g = var.grad
            m = self._moment1[name]
            v = self._moment2[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            var.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        self.step_count = t
        self.clear_grads()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(self._params)))
            for name, var in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<Q", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<Q", var.value.ndim))
                for dim in var.value.shape:
                    fh.write(struct.pack("<Q", dim))
                fh.write(np.ascontiguousarray(var.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise MagicMismatch(f"{path} is not a parameter checkpoint")
            (count,) = struct.unpack("<Q", fh.read(8))
            for _ in range(count):
                (name_len,) = struct.unpack("<Q", fh.read(8))
                name = fh.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<Q", fh.read(8))
                shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
                n_values = int(np.prod(shape)) if rank else 1
                values = np.frombuffer(fh.read(8 * n_values), dtype="<f8")
                store.add(name, values.reshape(shape))
        return store
