"""Raw volumetric kernels: 3D convolution, max pooling and upsampling.

Tensors are plain ``numpy.ndarray`` values in C (row-major) order with the
channel axis leading: a single volume is ``[C, D, H, W]`` and a batch is
``[B, C, D, H, W]``. Every kernel here accepts either form and returns the
same form it was given.

Parameters are stored as float32; all reductions run in float64.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import CorruptedTraceError, GeometryError

ACC_DTYPE = np.float64
PARAM_DTYPE = np.float32

_deterministic = False


def is_deterministic():
    return _deterministic


@contextlib.contextmanager
def deterministic_mode(seed=0):
    """Serial reductions and a fixed global seed for the duration of the block.

    BLAS is pinned to one thread so that matrix products reduce in a fixed
    order; numpy's legacy global generator is seeded for any code that
    still reaches for it.
    """
    global _deterministic
    from threadpoolctl import threadpool_limits

    previous = _deterministic
    state = np.random.get_state()
    _deterministic = True
    np.random.seed(seed)
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        _deterministic = previous
        np.random.set_state(state)


def _triple(value, name):
    if np.isscalar(value):
        value = (value,) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3 or any(v < 1 for v in value):
        raise GeometryError(f"{name} must be three positive integers, got {value}")
    return value


@dataclass(frozen=True)
class ConvSpec:
    kernel_count: int
    kernel_extents: tuple = (3, 3, 3)
    strides: tuple = (1, 1, 1)
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "kernel_extents", _triple(self.kernel_extents, "kernel extents"))
        object.__setattr__(self, "strides", _triple(self.strides, "strides"))
        if self.padding not in ("same", "valid"):
            raise GeometryError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if int(self.kernel_count) < 1:
            raise GeometryError("kernel count must be positive")
        object.__setattr__(self, "kernel_count", int(self.kernel_count))

    def pads(self, extents):
        """(low, high) zero padding per spatial axis for the given input extents."""
        if self.padding == "valid":
            return ((0, 0),) * 3
        return tuple(same_padding(n, f, s) for n, f, s in zip(extents, self.kernel_extents, self.strides))

    def output_extents(self, extents):
        out = []
        for n, f, s, (lo, hi) in zip(extents, self.kernel_extents, self.strides, self.pads(extents)):
            if f > n + lo + hi:
                raise GeometryError(f"kernel extent {f} exceeds padded input extent {n + lo + hi}")
            out.append((n + lo + hi - f) // s + 1)
        return tuple(out)


@dataclass(frozen=True)
class PoolSpec:
    window: tuple = (2, 2, 2)
    strides: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "window", _triple(self.window, "pool window"))
        strides = self.window if self.strides is None else self.strides
        object.__setattr__(self, "strides", _triple(strides, "pool strides"))

    def output_extents(self, extents):
        out = []
        for n, f, s in zip(extents, self.window, self.strides):
            if f > n:
                raise GeometryError(f"pool window {f} larger than input extent {n}")
            out.append((n - f) // s + 1)
        return tuple(out)


def output_extent(n, p, f, s):
    """Extent after sliding a kernel of size ``f`` with stride ``s`` over ``n``
    voxels padded by ``p`` on both sides: ``floor((n + 2p - f) / s) + 1``."""
    if s < 1 or n < 1 or f < 1 or p < 0:
        raise GeometryError(f"invalid geometry n={n} p={p} f={f} s={s}")
    if f > n + 2 * p:
        raise GeometryError(f"kernel extent {f} exceeds padded input extent {n + 2 * p}")
    return (n + 2 * p - f) // s + 1


def same_padding(n, f, s=1):
    """(low, high) padding giving ``ceil(n / s)`` outputs; odd totals put the
    extra voxel on the high side."""
    out = -(-n // s)
    total = max((out - 1) * s + f - n, 0)
    return total // 2, total - total // 2


def _as_batch(x, rank):
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise GeometryError(f"expected a rank-{rank} tensor or a batch of them, got shape {x.shape}")


def _pad(x, pads):
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pads))


def _window_slices(offset, stride, count):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _check_conv(x, kernels, spec):
    if kernels.ndim != 5:
        raise GeometryError(f"kernels must be [N, C_in, f_d, f_h, f_w], got {kernels.shape}")
    if kernels.shape[0] != spec.kernel_count or kernels.shape[2:] != spec.kernel_extents:
        raise GeometryError(
            f"kernel block {kernels.shape} does not match spec "
            f"({spec.kernel_count} kernels of {spec.kernel_extents})"
        )
    if x.shape[1] != kernels.shape[1]:
        raise GeometryError(f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}")


def conv3d(x, kernels, bias, spec):
    """Cross-correlate ``x`` with each kernel (zero padding in same mode) and add bias."""
    xb, single = _as_batch(x, 4)
    kernels = np.asarray(kernels)
    _check_conv(xb, kernels, spec)
    bias = np.asarray(bias, dtype=ACC_DTYPE)
    if bias.shape != (spec.kernel_count,):
        raise GeometryError(f"bias must have shape ({spec.kernel_count},), got {bias.shape}")
    out_ext = spec.output_extents(xb.shape[2:])
    xp = _pad(xb.astype(ACC_DTYPE, copy=False), spec.pads(xb.shape[2:]))
    k64 = kernels.astype(ACC_DTYPE, copy=False)

    out = np.zeros((spec.kernel_count, xb.shape[0]) + out_ext, dtype=ACC_DTYPE)
    sd, sh, sw = spec.strides
    for i, j, k in itertools.product(*(range(f) for f in spec.kernel_extents)):
        slab = xp[:, :, _window_slices(i, sd, out_ext[0]), _window_slices(j, sh, out_ext[1]),
                  _window_slices(k, sw, out_ext[2])]
        out += np.tensordot(k64[:, :, i, j, k], slab, axes=([1], [1]))
    out += bias[:, None, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    return out[0] if single else out


def conv3d_input_grad(upstream, kernels, input_shape, spec):
    """Gradient of ``sum(upstream * conv3d(x))`` with respect to ``x``.

    Also the transposed convolution used by relevance propagation.
    """
    up, single = _as_batch(upstream, 4)
    input_shape = tuple(input_shape)
    if single:
        input_shape = (1,) + input_shape
    extents = input_shape[2:]
    out_ext = spec.output_extents(extents)
    if up.shape != (input_shape[0], spec.kernel_count) + out_ext:
        raise GeometryError(f"upstream shape {up.shape} does not match conv output "
                            f"{(input_shape[0], spec.kernel_count) + out_ext}")
    pads = spec.pads(extents)
    padded = tuple(n + lo + hi for n, (lo, hi) in zip(extents, pads))
    dxp = np.zeros((input_shape[1], input_shape[0]) + padded, dtype=ACC_DTYPE)
    up64 = up.astype(ACC_DTYPE, copy=False)
    k64 = np.asarray(kernels).astype(ACC_DTYPE, copy=False)
    sd, sh, sw = spec.strides
    for i, j, k in itertools.product(*(range(f) for f in spec.kernel_extents)):
        dxp[:, :, _window_slices(i, sd, out_ext[0]), _window_slices(j, sh, out_ext[1]),
            _window_slices(k, sw, out_ext[2])] += np.tensordot(k64[:, :, i, j, k], up64, axes=([0], [1]))
    dx = dxp[:, :,
             pads[0][0]:pads[0][0] + extents[0],
             pads[1][0]:pads[1][0] + extents[1],
             pads[2][0]:pads[2][0] + extents[2]]
    dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3, 4))
    return dx[0] if single else dx


def conv3d_grads(x, kernels, upstream, spec):
    """Return ``(d_input, d_kernels, d_bias)`` of ``sum(upstream * conv3d(x, kernels, b))``."""
    xb, single = _as_batch(x, 4)
    up, up_single = _as_batch(upstream, 4)
    kernels = np.asarray(kernels)
    _check_conv(xb, kernels, spec)
    if single != up_single:
        raise GeometryError("input and upstream must both be batched or both single")
    out_ext = spec.output_extents(xb.shape[2:])
    if up.shape != (xb.shape[0], spec.kernel_count) + out_ext:
        raise GeometryError(f"upstream shape {up.shape} does not match conv output "
                            f"{(xb.shape[0], spec.kernel_count) + out_ext}")
    xp = _pad(xb.astype(ACC_DTYPE, copy=False), spec.pads(xb.shape[2:]))
    up64 = up.astype(ACC_DTYPE, copy=False)
    dk = np.zeros(kernels.shape, dtype=ACC_DTYPE)
    sd, sh, sw = spec.strides
    for i, j, k in itertools.product(*(range(f) for f in spec.kernel_extents)):
        slab = xp[:, :, _window_slices(i, sd, out_ext[0]), _window_slices(j, sh, out_ext[1]),
                  _window_slices(k, sw, out_ext[2])]
        dk[:, :, i, j, k] = np.tensordot(up64, slab, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    db = up64.sum(axis=(0, 2, 3, 4))
    dx = conv3d_input_grad(up64, kernels, xb.shape, spec)
    return (dx[0] if single else dx), dk, db


def maxpool3d(x, spec):
    """Max over each window. Returns ``(pooled, arg_indices)`` where
    ``arg_indices`` holds, per output voxel, the flat index of the winning
    voxel within its channel volume. Ties go to the lowest flat index."""
    xb, single = _as_batch(x, 4)
    out_ext = spec.output_extents(xb.shape[2:])
    D, H, W = xb.shape[2:]
    windows = np.lib.stride_tricks.sliding_window_view(xb, spec.window, axis=(2, 3, 4))
    windows = windows[:, :, ::spec.strides[0], ::spec.strides[1], ::spec.strides[2]]
    windows = windows[:, :, :out_ext[0], :out_ext[1], :out_ext[2]]
    flat = windows.reshape(windows.shape[:5] + (-1,))
    local = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    fd, fh, fw = spec.window
    ld, rem = np.divmod(local, fh * fw)
    lh, lw = np.divmod(rem, fw)
    od, oh, ow = np.meshgrid(*(np.arange(n) * s for n, s in zip(out_ext, spec.strides)), indexing="ij")
    arg = ((od + ld) * H + (oh + lh)) * W + (ow + lw)
    if single:
        return pooled[0], arg[0]
    return pooled, arg


def maxpool3d_grad(arg_indices, upstream, input_shape):
    """Route each upstream value to its recorded winner (summing on overlap)."""
    arg, single = _as_batch(arg_indices, 4)
    up, _ = _as_batch(upstream, 4)
    input_shape = tuple(input_shape)
    if single:
        input_shape = (1,) + input_shape
    if arg.shape != up.shape:
        raise CorruptedTraceError(f"arg indices {arg.shape} do not match upstream {up.shape}")
    B, C = input_shape[:2]
    volume = int(np.prod(input_shape[2:]))
    if arg.shape[:2] != (B, C):
        raise CorruptedTraceError(f"arg indices {arg.shape} do not match input {input_shape}")
    if arg.size and (arg.min() < 0 or arg.max() >= volume):
        raise CorruptedTraceError("pooling arg index out of bounds")
    offsets = (np.arange(B * C) * volume).reshape(B, C, 1, 1, 1)
    dx = np.bincount((arg + offsets).ravel(), weights=up.astype(ACC_DTYPE).ravel(),
                     minlength=B * C * volume)
    dx = dx.reshape(input_shape)
    return dx[0] if single else dx


def upsample3d(x, factor):
    """Nearest-neighbour replication of every voxel into a ``factor`` block."""
    factor = _triple(factor, "upsample factor")
    xb, single = _as_batch(x, 4)
    out = xb
    for axis, f in zip((2, 3, 4), factor):
        if f > 1:
            out = np.repeat(out, f, axis=axis)
    return out[0] if single else out


def upsample3d_grad(upstream, factor):
    factor = _triple(factor, "upsample factor")
    up, single = _as_batch(upstream, 4)
    B, C, D, H, W = up.shape
    fd, fh, fw = factor
    if D % fd or H % fh or W % fw:
        raise GeometryError(f"upstream extents {up.shape[2:]} not divisible by factor {factor}")
    dx = up.reshape(B, C, D // fd, fd, H // fh, fh, W // fw, fw).sum(axis=(3, 5, 7))
    return dx[0] if single else dx
