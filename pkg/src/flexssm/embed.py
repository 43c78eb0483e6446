"""Video tokenization and the resize operators used to flex its weights.

Every resize is materialized as an explicit sparse matrix acting on the
leading axis of its input, so the backward pass is the transpose.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, apply_linear_map, as_tensor, concat, matmul, mul, reshape, transpose

MODES = ("linear", "bicubic")
CUBIC_A = -0.5


def _cubic(x: np.ndarray) -> np.ndarray:
    a = CUBIC_A
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    xn, xf = x[near], x[far]
    out[near] = (a + 2) * xn ** 3 - (a + 3) * xn ** 2 + 1
    out[far] = a * xf ** 3 - 5 * a * xf ** 2 + 8 * a * xf - 4 * a
    return out


def source_coords(src_len: int, dst_len: int) -> np.ndarray:
    """Endpoint-aligned sample positions; a single output samples the midpoint."""
    if dst_len == 1:
        return np.array([(src_len - 1) / 2.0])
    i = np.arange(dst_len, dtype=np.float64)
    return i * (src_len - 1) / (dst_len - 1)


@dataclass(frozen=True)
class ResizeOp:
    """Sparse linear resize ``matrix`` (prod(dst_shape) x prod(src_shape))."""

    src_shape: tuple
    dst_shape: tuple
    matrix: sp.csr_matrix

    def __call__(self, x):
        """Apply to the leading axis of an ndarray or a Tensor (tape-recorded)."""
        if isinstance(x, Tensor):
            return apply_linear_map(self.matrix, x)
        x = np.asarray(x)
        flat = x.reshape(self.matrix.shape[1], -1)
        return np.asarray(self.matrix @ flat, dtype=x.dtype).reshape((self.matrix.shape[0],) + x.shape[1:])

    @property
    def T(self) -> "ResizeOp":
        return ResizeOp(self.dst_shape, self.src_shape, self.matrix.T.tocsr())

    @property
    def is_identity(self) -> bool:
        return self.src_shape == self.dst_shape


@functools.lru_cache(maxsize=512)
def build_resize_1d(src_len: int, dst_len: int, mode: str = "linear") -> ResizeOp:
    if src_len < 1 or dst_len < 1:
        raise ValueError(f"build_resize_1d: lengths must be >= 1, got {src_len} -> {dst_len}")
    if mode not in MODES:
        raise ValueError(f"build_resize_1d: unknown mode {mode!r}")
    if src_len == dst_len:
        return ResizeOp((src_len,), (dst_len,), sp.identity(src_len, format="csr"))
    s = source_coords(src_len, dst_len)
    base = np.floor(s).astype(np.int64)
    frac = s - base
    if mode == "linear":
        taps = np.stack([base, base + 1], axis=1)
        w = np.stack([1.0 - frac, frac], axis=1)
    else:
        offs = np.arange(-1, 3)
        taps = base[:, None] + offs[None, :]
        w = _cubic(frac[:, None] - offs[None, :])
    taps = np.clip(taps, 0, src_len - 1)
    rows = np.repeat(np.arange(dst_len), taps.shape[1])
    # duplicate (row, col) pairs from edge clamping are summed by the constructor
    m = sp.coo_matrix((w.ravel(), (rows, taps.ravel())), shape=(dst_len, src_len)).tocsr()
    m.eliminate_zeros()
    return ResizeOp((src_len,), (dst_len,), m)


@functools.lru_cache(maxsize=512)
def build_resize_2d(src_hw: tuple, dst_hw: tuple, mode: str = "bicubic") -> ResizeOp:
    """Separable 2-D resize of a row-major flattened ``src_hw`` grid."""
    rh = build_resize_1d(src_hw[0], dst_hw[0], mode)
    rw = build_resize_1d(src_hw[1], dst_hw[1], mode)
    return ResizeOp(tuple(src_hw), tuple(dst_hw), sp.kron(rh.matrix, rw.matrix, format="csr"))


@dataclass
class PatchEmbed:
    w: Tensor   # (D, C, P_def, P_def)
    b: Tensor   # (D,)

    @property
    def p_def(self) -> int:
        return self.w.shape[-1]


@dataclass
class PositionalEmbeds:
    e_pos: Tensor    # (G_def**2, D)
    e_temp: Tensor   # (T_def, D)
    cls: Tensor      # (1, D) token
    cls_pos: Tensor  # (1, D) its own positional vector, never interpolated

    @property
    def g_def(self) -> int:
        n = self.e_pos.shape[0]
        g = int(round(np.sqrt(n)))
        if g * g != n:
            raise ValueError(f"spatial positional embedding has {n} rows, not a perfect square")
        return g

    @property
    def t_def(self) -> int:
        return self.e_temp.shape[0]


def flex_kernel(pe: PatchEmbed, p_new: int) -> Tensor:
    """Bicubic-resize every kernel plane to ``p_new`` and rescale by ``(P_def / p_new)**2``."""
    if p_new < 1:
        raise ValueError(f"flex_kernel: patch size must be >= 1, got {p_new}")
    w = pe.w
    D, C, P, _ = w.shape
    if p_new == P:
        return w
    op = build_resize_2d((P, P), (p_new, p_new), "bicubic")
    planes = transpose(reshape(w, (D * C, P * P)), (1, 0))
    resized = op(planes)
    out = reshape(transpose(resized, (1, 0)), (D, C, p_new, p_new))
    return mul(out, (P / p_new) ** 2)


def flex_pos_embed(pos: PositionalEmbeds, g_new: int) -> Tensor:
    if g_new < 1:
        raise ValueError(f"flex_pos_embed: grid side must be >= 1, got {g_new}")
    g = pos.g_def
    if g_new == g:
        return pos.e_pos
    return build_resize_2d((g, g), (g_new, g_new), "bicubic")(pos.e_pos)


def flex_temp_embed(pos: PositionalEmbeds, t_new: int) -> Tensor:
    if t_new < 1:
        raise ValueError(f"flex_temp_embed: frame count must be >= 1, got {t_new}")
    if t_new == pos.t_def:
        return pos.e_temp
    return build_resize_1d(pos.t_def, t_new, "linear")(pos.e_temp)


def patchify(video, kernel: Tensor, bias: Tensor, P: int) -> Tensor:
    """Non-overlapping stride-``P`` convolution of (B, T, H, W, C) frames.

    Returns tokens (B, T, G_h * G_w, D) with the grid flattened row-major.
    A (T, H, W, C) input is treated as a batch of one.
    """
    video = as_tensor(video)
    if video.ndim == 4:
        video = reshape(video, (1,) + video.shape)
    B, T, H, W, C = video.shape
    D = kernel.shape[0]
    if kernel.shape != (D, C, P, P):
        raise ShapeError(f"patchify: kernel {kernel.shape} does not match C={C}, P={P}")
    if H % P or W % P:
        raise ShapeError(f"patchify: frame {H}x{W} is not a multiple of patch size {P}")
    gh, gw = H // P, W // P
    x = reshape(video, (B, T, gh, P, gw, P, C))
    x = transpose(x, (0, 1, 2, 4, 6, 3, 5))
    x = reshape(x, (B * T * gh * gw, C * P * P))
    wmat = transpose(reshape(kernel, (D, C * P * P)), (1, 0))
    tok = matmul(x, wmat) + bias
    return reshape(tok, (B, T, gh * gw, D))


@functools.lru_cache(maxsize=256)
def _tile_op(T: int, N: int) -> sp.csr_matrix:
    rows = np.arange(T * N)
    return sp.csr_matrix((np.ones(T * N), (rows, rows % N)), shape=(T * N, N))


@functools.lru_cache(maxsize=256)
def _repeat_op(T: int, N: int) -> sp.csr_matrix:
    rows = np.arange(T * N)
    return sp.csr_matrix((np.ones(T * N), (rows, rows // N)), shape=(T * N, T))


def assemble_sequence(tokens: Tensor, e_pos: Tensor, e_temp: Tensor, cls: Tensor,
                      cls_pos: Tensor | None = None) -> Tensor:
    """Add spatial and temporal embeddings and prepend the CLS row.

    ``tokens`` (B, T, N, D) becomes (B, 1 + T*N, D), frame-major.
    """
    if tokens.ndim == 3:
        tokens = reshape(tokens, (1,) + tokens.shape)
    B, T, N, D = tokens.shape
    if e_pos.shape != (N, D):
        raise ShapeError(f"assemble_sequence: spatial embedding {e_pos.shape} for {N} tokens of width {D}")
    if e_temp.shape != (T, D):
        raise ShapeError(f"assemble_sequence: temporal embedding {e_temp.shape} for {T} frames of width {D}")
    z = reshape(tokens, (B, T * N, D))
    z = z + apply_linear_map(_tile_op(T, N), e_pos)
    z = z + apply_linear_map(_repeat_op(T, N), e_temp)
    head = cls if cls_pos is None else cls + cls_pos
    head = reshape(apply_linear_map(sp.csr_matrix(np.ones((B, 1))), head), (B, 1, D))
    return concat([head, z], axis=1)


__all__ = [
    "ResizeOp", "build_resize_1d", "build_resize_2d", "source_coords", "PatchEmbed", "PositionalEmbeds",
    "flex_kernel", "flex_pos_embed", "flex_temp_embed", "patchify", "assemble_sequence",
]
