"""Dense tensor substrate.

Float64 tensors in channel-major, row-major layout (feature maps C x H x W,
kernels C_out x C_in x K_h x K_w). Provides the two primitives everything else
is built from (cross-correlation style convolution and 3D sum-pooling), plus
linear maps, a counter-based seeded random generator, and a bit-exact binary
file container.

Convolution is cross-correlation: no kernel flip, zero padding only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GeometryError(ValueError):
    """Stride/padding/dilation values produce no valid output."""


class ContainerError(ValueError):
    """Malformed tensor container file."""


def _as_pair(v, name, minimum):
    if isinstance(v, int):
        v = (v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 2:
        raise ValueError(f"{name} must be an int or a pair, got {v!r}")
    if any(x < minimum for x in v):
        raise ValueError(f"{name} must be >= {minimum} per axis, got {v}")
    return v


@dataclass(frozen=True)
class ConvGeometry:
    """Stride, zero padding, and dilation for the two spatial axes, plus groups.

    Scalars are broadcast to both axes. Asymmetric (per-axis) values are
    first-class.
    """

    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stride", _as_pair(self.stride, "stride", 1))
        object.__setattr__(self, "padding", _as_pair(self.padding, "padding", 0))
        object.__setattr__(self, "dilation", _as_pair(self.dilation, "dilation", 1))
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")


def out_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    """Output extent of one spatial axis: floor((size + 2p - d(k-1) - 1)/s) + 1."""
    span = size + 2 * padding - dilation * (kernel - 1) - 1
    if span < 0:
        raise GeometryError(
            f"kernel (extent {kernel}, dilation {dilation}) exceeds padded input "
            f"(extent {size}, padding {padding})"
        )
    return span // stride + 1


def _check_3d(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be rank 3 (C x H x W), got rank {x.ndim}")
    return x


def _gather_patches(xp, out_hw, k_hw, stride, dilation):
    # xp: (..., Hp, Wp) already padded. Returns (..., H', W', kh, kw) with
    # patches[..., i, j, u, v] = xp[..., i*sh + u*dh, j*sw + v*dw].
    ho, wo = out_hw
    kh, kw = k_hw
    sh, sw = stride
    dh, dw = dilation
    rows = sh * np.arange(ho)[:, None] + dh * np.arange(kh)[None, :]
    cols = sw * np.arange(wo)[:, None] + dw * np.arange(kw)[None, :]
    lead = (slice(None),) * (xp.ndim - 2)
    return xp[lead + (rows[:, None, :, None], cols[None, :, None, :])]


def conv(x, kernel, geom: ConvGeometry = ConvGeometry()):
    """Convolve x (C x H x W) with kernel (C_out x C/g x K_h x K_w).

    Cross-correlation with zero padding; returns C_out x H' x W'. With
    groups=g, input and output channels are split into g contiguous blocks and
    block i of the output sees only block i of the input.
    """
    x = _check_3d(x, "input")
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be rank 4, got rank {kernel.ndim}")
    c_in, h, w = x.shape
    c_out, c_k, kh, kw = kernel.shape
    g = geom.groups
    if c_in % g != 0 or c_out % g != 0:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups {g}")
    if c_k != c_in // g:
        raise ShapeError(
            f"kernel expects {c_k} input channels per group, input has {c_in // g}"
        )
    ho = out_extent(h, kh, geom.stride[0], geom.padding[0], geom.dilation[0])
    wo = out_extent(w, kw, geom.stride[1], geom.padding[1], geom.dilation[1])
    ph, pw = geom.padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    patches = _gather_patches(xp, (ho, wo), (kh, kw), geom.stride, geom.dilation)
    if g == 1:
        return np.einsum("chwuv,ocuv->ohw", patches, kernel, optimize=True)
    pg = patches.reshape(g, c_in // g, ho, wo, kh, kw)
    kg = kernel.reshape(g, c_out // g, c_k, kh, kw)
    out = np.einsum("gchwuv,gocuv->gohw", pg, kg, optimize=True)
    return out.reshape(c_out, ho, wo)


def sum_pool3d(x, pool_dims, geom: ConvGeometry = ConvGeometry()):
    """Sliding-window sum over (channel, height, width).

    The channel window slides with stride 1 and no padding or dilation; the
    spatial axes use geom's stride, zero padding, and dilation. Equivalent to
    convolving with an all-ones kernel of shape pool_dims slid over channels
    and space.
    """
    x = _check_3d(x, "input")
    kc, kh, kw = (int(d) for d in pool_dims)
    if min(kc, kh, kw) < 1:
        raise ShapeError(f"pool dims must be >= 1, got {pool_dims}")
    c_in, h, w = x.shape
    if kc > c_in:
        raise ShapeError(f"channel window {kc} exceeds {c_in} input channels")
    ho = out_extent(h, kh, geom.stride[0], geom.padding[0], geom.dilation[0])
    wo = out_extent(w, kw, geom.stride[1], geom.padding[1], geom.dilation[1])
    ph, pw = geom.padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    patches = _gather_patches(xp, (ho, wo), (kh, kw), geom.stride, geom.dilation)
    spatial = patches.sum(axis=(-2, -1))
    if kc == 1:
        return spatial
    windows = np.lib.stride_tricks.sliding_window_view(spatial, kc, axis=0)
    return np.moveaxis(windows, -1, 1).sum(axis=1)


def linear(weight, x):
    """Matrix-vector product: weight (P x Q) applied to x (Q,)."""
    weight = np.asarray(weight, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if weight.ndim != 2 or x.ndim != 1:
        raise ShapeError(
            f"linear expects a matrix and a vector, got ranks {weight.ndim} and {x.ndim}"
        )
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(f"matrix is {weight.shape}, vector has length {x.shape[0]}")
    return weight @ x


# Counter-based generator: element i of a draw is SplitMix64 applied to
# seed + (i+1) * 0x9E3779B97F4A7C15 (mod 2^64), with the mixed value's top
# 53 bits mapped to a double in [0, 1) and then rescaled to [-1, 1).
# Constants are SplitMix64's published ones; the sequence is reproducible
# from this comment alone.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(v):
    v = (v ^ (v >> np.uint64(30))) * _MIX1
    v = (v ^ (v >> np.uint64(27))) * _MIX2
    return v ^ (v >> np.uint64(31))


def random_tensor(seed: int, shape) -> np.ndarray:
    """Seeded random tensor with values in [-1, 1), reproducible bit for bit."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have rank >= 1")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    n = int(np.prod(shape))
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN
        bits = _splitmix64(state)
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
    out = (2.0 * u - 1.0).reshape(shape)
    out.flags.writeable = False
    return out


# File container: magic "STCV", then little-endian u32 version (=1), u32 rank,
# rank u32 extents, then the payload as IEEE-754 binary64, row major.
_MAGIC = b"STCV"
_VERSION = 1
_MAX_RANK = 32
_MAX_ELEMS = 1 << 40


def write_tensor(path, x) -> None:
    """Write x to the binary container at path."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim < 1 or x.ndim > _MAX_RANK:
        raise ShapeError(f"container supports rank 1..{_MAX_RANK}, got {x.ndim}")
    if any(d < 1 for d in x.shape):
        raise ShapeError(f"all extents must be >= 1, got {x.shape}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, x.ndim))
        f.write(struct.pack(f"<{x.ndim}I", *x.shape))
        f.write(x.astype("<f8", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor container; the round trip through write_tensor is bit exact."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ContainerError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    if len(raw) < 12:
        raise ContainerError("truncated header")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if rank < 1 or rank > _MAX_RANK:
        raise ContainerError(f"rank {rank} outside supported range 1..{_MAX_RANK}")
    if len(raw) < 12 + 4 * rank:
        raise ContainerError("truncated extent list")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    if any(d < 1 for d in shape):
        raise ContainerError(f"zero extent in shape {shape}")
    n = 1
    for d in shape:
        n *= d
        if n > _MAX_ELEMS:
            raise ContainerError(f"element count overflow in shape {shape}")
    start = 12 + 4 * rank
    expected = start + 8 * n
    if len(raw) < expected:
        raise ContainerError(f"truncated payload: {len(raw) - start} of {8 * n} bytes")
    if len(raw) > expected:
        raise ContainerError(f"{len(raw) - expected} trailing bytes after payload")
    out = np.frombuffer(raw[start:expected], dtype="<f8").astype(np.float64).reshape(shape)
    out.flags.writeable = False
    return out
