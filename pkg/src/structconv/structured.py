"""Structured kernels and their sum-pooling decomposition.

A structured kernel on a C x N x N grid is built from the c*n*n basis whose
element (i, j, k) is an all-ones cuboid of shape (C-c+1) x (N-n+1) x (N-n+1)
with its low corner at (i, j, k). Convolution with such a kernel factors
exactly into a 3D sum-pool with that cuboid's window followed by a small
c x n x n convolution, which is where the parameter and op savings come from.

This module generates the basis, builds the structure matrix A whose columns
are the vectorized basis elements, projects arbitrary kernels onto the
structured subspace, and decomposes conv/linear layers into their pooled form.
Vectorization order is fixed everywhere: channel-major, then kernel row, then
kernel column (a plain row-major flatten of a (C, N, N) array).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .composite import CompositeBasis
from .tensor import (
    ConvGeometry,
    GeometryError,
    ShapeError,
    conv,
    out_extent,
    read_tensor,
    sum_pool3d,
    write_tensor,
)

_SV_CUTOFF = 1e-12  # singular values below cutoff*sigma_max count as zero


class ConfigError(ValueError):
    """Structured config violates 1 <= c <= C, 1 <= n <= N."""


class ResidualError(ValueError):
    """Weights are farther from the structured subspace than the tolerance."""


@dataclass(frozen=True)
class StructuredConfig:
    """Grid dims (C, N) and structure dims (c, n); c = C and/or n = N degrade
    gracefully to channel-only or spatial-only structure."""

    C: int
    N: int
    c: int
    n: int

    def __post_init__(self):
        for name in ("C", "N", "c", "n"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an int, got {v!r}")
        if not (1 <= self.c <= self.C):
            raise ConfigError(f"need 1 <= c <= C, got c={self.c}, C={self.C}")
        if not (1 <= self.n <= self.N):
            raise ConfigError(f"need 1 <= n <= N, got n={self.n}, N={self.N}")

    @property
    def basis_size(self) -> int:
        return self.c * self.n * self.n

    @property
    def pool_dims(self) -> tuple[int, int, int]:
        return (self.C - self.c + 1, self.N - self.n + 1, self.N - self.n + 1)

    @property
    def compression_ratio(self) -> Fraction:
        """Dense over structured parameter count, C*N^2 / (c*n^2)."""
        return Fraction(self.C * self.N * self.N, self.basis_size)


def generate_structured_basis(cfg: StructuredConfig) -> CompositeBasis:
    """The c*n*n shifted all-ones cuboids, in lexicographic (i, j, k) order."""
    C, N, c, n = cfg.C, cfg.N, cfg.c, cfg.n
    wc, wn = C - c + 1, N - n + 1
    elements = np.zeros((cfg.basis_size, C, N, N))
    m = 0
    for i in range(c):
        for j in range(n):
            for k in range(n):
                elements[m, i : i + wc, j : j + wn, k : k + wn] = 1.0
                m += 1
    return CompositeBasis(elements)


@dataclass(frozen=True)
class StructureMatrix:
    """A (C*N^2 x c*n^2) with vectorized basis elements as columns, plus its
    pseudoinverse and the orthogonal projector A @ pinv onto the column span."""

    cfg: StructuredConfig
    A: np.ndarray
    pinv: np.ndarray
    projector: np.ndarray


def _build_structure_matrix(cfg: StructuredConfig) -> StructureMatrix:
    C, N, c, n = cfg.C, cfg.N, cfg.c, cfg.n
    wc, wn = C - c + 1, N - n + 1
    m_total = cfg.basis_size
    A = np.zeros((C * N * N, m_total))
    view = A.reshape(C, N, N, m_total)
    m = 0
    for i in range(c):
        for j in range(n):
            for k in range(n):
                view[i : i + wc, j : j + wn, k : k + wn, m] = 1.0
                m += 1
    s = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(s > _SV_CUTOFF * s[0]))
    if rank != m_total:
        raise RuntimeError(
            f"structured basis for {cfg} is rank deficient ({rank} < {m_total}); "
            "this indicates an internal bug"
        )
    pinv = np.linalg.pinv(A, rcond=_SV_CUTOFF)
    proj = A @ pinv
    for arr in (A, pinv, proj):
        arr.flags.writeable = False
    return StructureMatrix(cfg=cfg, A=A, pinv=pinv, projector=proj)


@lru_cache(maxsize=128)
def structure_matrix(cfg: StructuredConfig) -> StructureMatrix:
    return _build_structure_matrix(cfg)


def _check_kernel(w, cfg: StructuredConfig, name="kernel"):
    w = np.asarray(w, dtype=np.float64)
    expect = (cfg.C, cfg.N, cfg.N)
    if w.shape != expect:
        raise ShapeError(f"{name} shape {w.shape} does not match config dims {expect}")
    return w


def project(w, cfg: StructuredConfig) -> tuple[np.ndarray, float]:
    """Orthogonal projection onto the structured subspace.

    Returns (w_hat, residual) with residual = ||w - w_hat|| / ||w||, or 0 for
    a zero kernel (which is exactly structured).
    """
    w = _check_kernel(w, cfg)
    sm = structure_matrix(cfg)
    vec = w.reshape(-1)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return np.zeros_like(w), 0.0
    proj_vec = sm.projector @ vec
    residual = float(np.linalg.norm(vec - proj_vec) / norm)
    return proj_vec.reshape(w.shape), residual


def extract_alpha(w, cfg: StructuredConfig) -> np.ndarray:
    """Least-squares coefficients pinv(A) @ vec(w), shaped (c, n, n)."""
    w = _check_kernel(w, cfg)
    sm = structure_matrix(cfg)
    return (sm.pinv @ w.reshape(-1)).reshape(cfg.c, cfg.n, cfg.n)


def _reconstruct_stack(alphas, cfg: StructuredConfig):
    # alphas (..., c, n, n) -> kernels (..., C, N, N): each output entry is the
    # sum of coefficients whose cuboid covers it, i.e. a sliding-window sum of
    # the zero-padded coefficient block.
    wc, wn = cfg.C - cfg.c + 1, cfg.N - cfg.n + 1
    pad = [(0, 0)] * (alphas.ndim - 3) + [(wc - 1, wc - 1), (wn - 1, wn - 1), (wn - 1, wn - 1)]
    padded = np.pad(alphas, pad)
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (wc, wn, wn), axis=(-3, -2, -1)
    )
    return windows.sum(axis=(-3, -2, -1))


def reconstruct(alpha, cfg: StructuredConfig) -> np.ndarray:
    """Dense (C, N, N) kernel from coefficients alpha (c, n, n)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    expect = (cfg.c, cfg.n, cfg.n)
    if alpha.shape != expect:
        raise ShapeError(f"alpha shape {alpha.shape} does not match config dims {expect}")
    return _reconstruct_stack(alpha, cfg)


def _worst_block_residual(flat, sm: StructureMatrix):
    # flat: one kernel per row. Zero rows are exactly structured.
    worst_idx, worst_res = -1, 0.0
    for b in range(flat.shape[0]):
        norm = np.linalg.norm(flat[b])
        if norm == 0.0:
            continue
        res = float(np.linalg.norm(flat[b] - sm.projector @ flat[b]) / norm)
        if res > worst_res:
            worst_idx, worst_res = b, res
    return worst_idx, worst_res


def worst_kernel_residual(weights, cfg: StructuredConfig) -> float:
    """Largest per-kernel residual across a layer's output channels (rows for
    a linear layer, channel planes for depthwise)."""
    weights = np.asarray(weights, dtype=np.float64)
    flat = weights.reshape(-1, cfg.C * cfg.N * cfg.N)
    return _worst_block_residual(flat, structure_matrix(cfg))[1]


@dataclass(frozen=True)
class DecomposedConvLayer:
    """Conv layer refactored as sum-pool (window pool_dims, stride 1, original
    padding and dilation) followed by a small conv (original stride and
    dilation, no padding), with the bias untouched."""

    cfg: StructuredConfig
    pool_dims: tuple[int, int, int]
    pool_geom: ConvGeometry
    alpha: np.ndarray
    small_geom: ConvGeometry
    bias: np.ndarray | None = None


def decompose_conv_layer(
    weights,
    cfg: StructuredConfig,
    geom: ConvGeometry = ConvGeometry(),
    bias=None,
    residual_tol: float = 1e-6,
) -> DecomposedConvLayer:
    """Split a (C_out, C, N, N) conv layer into its pooled equivalent.

    Every output channel's kernel must lie within residual_tol of the
    structured subspace; the worst offender is reported otherwise. The pool is
    shared by all output channels, so it is stored once.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4:
        raise ShapeError(f"weights must be rank 4, got rank {weights.ndim}")
    if weights.shape[1:] != (cfg.C, cfg.N, cfg.N):
        raise ShapeError(
            f"weights shape {weights.shape} does not match config dims "
            f"(C_out, {cfg.C}, {cfg.N}, {cfg.N})"
        )
    if geom.groups != 1:
        raise ShapeError("grouped layers decompose channel block by channel block; pass groups=1")
    c_out = weights.shape[0]
    sm = structure_matrix(cfg)
    flat = weights.reshape(c_out, -1)
    worst_idx, worst_res = _worst_block_residual(flat, sm)
    if worst_res > residual_tol:
        raise ResidualError(
            f"output channel {worst_idx} has residual {worst_res:.3e} "
            f"> tolerance {residual_tol:.3e}"
        )
    alphas = np.ascontiguousarray((sm.pinv @ flat.T).T.reshape(c_out, cfg.c, cfg.n, cfg.n))
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    return DecomposedConvLayer(
        cfg=cfg,
        pool_dims=cfg.pool_dims,
        pool_geom=ConvGeometry(stride=1, padding=geom.padding, dilation=geom.dilation),
        alpha=alphas,
        small_geom=ConvGeometry(stride=geom.stride, padding=0, dilation=geom.dilation),
        bias=bias,
    )


def forward_decomposed(x, layer: DecomposedConvLayer) -> np.ndarray:
    """Pool, then small conv, then bias. Output extents match the dense path
    for every admissible input; that is asserted, not assumed."""
    x = np.asarray(x, dtype=np.float64)
    pooled = sum_pool3d(x, layer.pool_dims, layer.pool_geom)
    out = conv(pooled, layer.alpha, layer.small_geom)
    cfg, sg = layer.cfg, layer.small_geom
    ph, pw = layer.pool_geom.padding
    expect = (
        out_extent(x.shape[1], cfg.N, sg.stride[0], ph, sg.dilation[0]),
        out_extent(x.shape[2], cfg.N, sg.stride[1], pw, sg.dilation[1]),
    )
    if out.shape[1:] != expect:
        raise GeometryError(
            f"decomposed output extents {out.shape[1:]} diverged from dense-path "
            f"extents {expect}; this indicates an internal bug"
        )
    if layer.bias is not None:
        out = out + layer.bias[:, np.newaxis, np.newaxis]
    return out


@dataclass(frozen=True)
class DecomposedDepthwiseLayer:
    """Depthwise conv refactored per channel: each channel pools its own plane
    spatially (window (N-n+1)^2, stride 1) and applies its own n x n kernel.
    Nothing is shared across channels."""

    cfg: StructuredConfig
    channels: int
    pool_dims: tuple[int, int, int]
    pool_geom: ConvGeometry
    alpha: np.ndarray
    small_geom: ConvGeometry
    bias: np.ndarray | None = None


def decompose_depthwise_layer(
    weights,
    n: int,
    geom: ConvGeometry = ConvGeometry(),
    bias=None,
    residual_tol: float = 1e-6,
) -> DecomposedDepthwiseLayer:
    """Split a (C, 1, N, N) depthwise layer; every channel's kernel must be
    within residual_tol of the spatial-structure subspace."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[1] != 1:
        raise ShapeError(f"depthwise weights must be (C, 1, N, N), got {weights.shape}")
    channels, _, kN, kN2 = weights.shape
    if kN != kN2:
        raise ShapeError(f"kernel must be square, got {kN}x{kN2}")
    cfg = StructuredConfig(C=1, N=kN, c=1, n=n)
    sm = structure_matrix(cfg)
    flat = weights.reshape(channels, -1)
    worst_idx, worst_res = _worst_block_residual(flat, sm)
    if worst_res > residual_tol:
        raise ResidualError(
            f"channel {worst_idx} has residual {worst_res:.3e} > tolerance {residual_tol:.3e}"
        )
    alphas = np.ascontiguousarray((sm.pinv @ flat.T).T.reshape(channels, 1, n, n))
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (channels,):
            raise ShapeError(f"bias shape {bias.shape} does not match {channels} channels")
    return DecomposedDepthwiseLayer(
        cfg=cfg,
        channels=channels,
        pool_dims=(1, kN - n + 1, kN - n + 1),
        pool_geom=ConvGeometry(stride=1, padding=geom.padding, dilation=geom.dilation),
        alpha=alphas,
        small_geom=ConvGeometry(stride=geom.stride, padding=0, dilation=geom.dilation),
        bias=bias,
    )


def forward_decomposed_depthwise(x, layer: DecomposedDepthwiseLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != layer.channels:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.channels}")
    pooled = sum_pool3d(x, layer.pool_dims, layer.pool_geom)
    sg = layer.small_geom
    grouped = ConvGeometry(
        stride=sg.stride, padding=sg.padding, dilation=sg.dilation, groups=layer.channels
    )
    out = conv(pooled, layer.alpha, grouped)
    if layer.bias is not None:
        out = out + layer.bias[:, np.newaxis, np.newaxis]
    return out


@dataclass(frozen=True)
class DecomposedLinearLayer:
    """Fully connected layer (P x Q) refactored as a length-(Q-R+1) sliding
    window sum producing R values, then a small P x R matrix."""

    in_features: int
    R: int
    small: np.ndarray
    bias: np.ndarray | None = None

    @property
    def window(self) -> int:
        return self.in_features - self.R + 1


def decompose_linear(weights, R: int, bias=None, residual_tol: float = 1e-6) -> DecomposedLinearLayer:
    """Split a (P, Q) matrix whose rows are structured with parameter R.

    Each row is treated as a Q x 1 x 1 kernel with channel structure R, so the
    shared pooled vector has R entries and the per-row work drops from Q to R
    multiplications.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError(f"weights must be rank 2, got rank {weights.ndim}")
    p_out, q_in = weights.shape
    if not (1 <= R <= q_in):
        raise ConfigError(f"need 1 <= R <= in_features, got R={R}, in_features={q_in}")
    cfg = StructuredConfig(C=q_in, N=1, c=R, n=1)
    sm = structure_matrix(cfg)
    worst_idx, worst_res = _worst_block_residual(weights, sm)
    if worst_res > residual_tol:
        raise ResidualError(
            f"row {worst_idx} has residual {worst_res:.3e} > tolerance {residual_tol:.3e}"
        )
    small = np.ascontiguousarray((sm.pinv @ weights.T).T)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (p_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match {p_out} outputs")
    return DecomposedLinearLayer(in_features=q_in, R=R, small=small, bias=bias)


def forward_decomposed_linear(x, layer: DecomposedLinearLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_features,):
        raise ShapeError(f"input shape {x.shape} does not match ({layer.in_features},)")
    pooled = np.lib.stride_tricks.sliding_window_view(x, layer.window).sum(axis=-1)
    out = layer.small @ pooled
    if layer.bias is not None:
        out = out + layer.bias
    return out


def _geom_to_json(g: ConvGeometry) -> dict:
    return {"stride": list(g.stride), "padding": list(g.padding), "dilation": list(g.dilation)}


def _geom_from_json(d) -> ConvGeometry:
    return ConvGeometry(
        stride=tuple(d["stride"]), padding=tuple(d["padding"]), dilation=tuple(d["dilation"])
    )


def save_decomposed_layer(out_dir, name: str, layer) -> dict:
    """Write alpha (or the small matrix), optional bias, and a JSON sidecar.

    Returns the sidecar dict; files land in out_dir as {name}.json,
    {name}_alpha.stcv, and {name}_bias.stcv when a bias is present.
    """
    os.makedirs(out_dir, exist_ok=True)
    alpha_file = f"{name}_alpha.stcv"
    bias_file = f"{name}_bias.stcv" if layer.bias is not None else None
    if isinstance(layer, (DecomposedConvLayer, DecomposedDepthwiseLayer)):
        write_tensor(os.path.join(out_dir, alpha_file), layer.alpha)
        sidecar = {
            "kind": "dwconv" if isinstance(layer, DecomposedDepthwiseLayer) else "conv",
            "config": {"C": layer.cfg.C, "N": layer.cfg.N, "c": layer.cfg.c, "n": layer.cfg.n},
            "pool_dims": list(layer.pool_dims),
            "pool_geom": _geom_to_json(layer.pool_geom),
            "small_geom": _geom_to_json(layer.small_geom),
            "alpha_file": alpha_file,
            "bias_file": bias_file,
        }
        if isinstance(layer, DecomposedDepthwiseLayer):
            sidecar["channels"] = layer.channels
    elif isinstance(layer, DecomposedLinearLayer):
        write_tensor(os.path.join(out_dir, alpha_file), layer.small)
        sidecar = {
            "kind": "linear",
            "in_features": layer.in_features,
            "R": layer.R,
            "alpha_file": alpha_file,
            "bias_file": bias_file,
        }
    else:
        raise TypeError(f"not a decomposed layer: {type(layer).__name__}")
    if bias_file is not None:
        write_tensor(os.path.join(out_dir, bias_file), layer.bias)
    with open(os.path.join(out_dir, f"{name}.json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return sidecar


def load_decomposed_layer(sidecar_path):
    """Inverse of save_decomposed_layer."""
    base = os.path.dirname(sidecar_path)
    with open(sidecar_path, encoding="utf-8") as f:
        sidecar = json.load(f)
    alpha = read_tensor(os.path.join(base, sidecar["alpha_file"]))
    bias = None
    if sidecar.get("bias_file"):
        bias = read_tensor(os.path.join(base, sidecar["bias_file"]))
    if sidecar["kind"] in ("conv", "dwconv"):
        cd = sidecar["config"]
        cfg = StructuredConfig(C=cd["C"], N=cd["N"], c=cd["c"], n=cd["n"])
        common = dict(
            cfg=cfg,
            pool_dims=tuple(sidecar["pool_dims"]),
            pool_geom=_geom_from_json(sidecar["pool_geom"]),
            alpha=alpha,
            small_geom=_geom_from_json(sidecar["small_geom"]),
            bias=bias,
        )
        if sidecar["kind"] == "dwconv":
            return DecomposedDepthwiseLayer(channels=sidecar["channels"], **common)
        return DecomposedConvLayer(**common)
    if sidecar["kind"] == "linear":
        return DecomposedLinearLayer(
            in_features=sidecar["in_features"], R=sidecar["R"], small=alpha, bias=bias
        )
    raise ValueError(f"unknown layer kind {sidecar['kind']!r}")
