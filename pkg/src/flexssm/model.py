"""The video SSM backbone, its parameters and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"SSNK"                      magic
    u32 version                  currently 1
    u32 n_dims, then n_dims u32  D, expand, n_state, n_blocks, k, num_classes,
                                 bidirectional, T_def, G_def, P_def
    u32 n_tensors
    per tensor:
        u32 name_len, name bytes (utf-8)
        u32 rank, rank x u64 extents
        prod(extents) x f32 values, row-major
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .embed import PatchEmbed, PositionalEmbeds, assemble_sequence, flex_kernel, flex_pos_embed, flex_temp_embed, patchify
from .flex import FlexConfig
from .ssm import SSMBlockParams, ScanParams, _trunc_normal, init_block_params, mamba_block, proj_std
from .tensor import Tensor, default_dtype, layernorm, matmul

MAGIC = b"SSNK"
VERSION = 1
CHANNELS = 3


@dataclass(frozen=True)
class ModelDims:
    D: int = 64
    expand: int = 2
    n_state: int = 8
    n_blocks: int = 4
    k: int = 4
    num_classes: int = 8
    bidirectional: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "bidirectional" and (not isinstance(v, (int, np.integer)) or v < 1):
                raise ValueError(f"ModelDims.{f.name} must be a positive integer, got {v!r}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.D


@dataclass
class ParamStore:
    dims: ModelDims
    patch: PatchEmbed
    pos: PositionalEmbeds
    blocks: list
    final_g: Tensor
    final_b: Tensor
    head_w: Tensor
    head_b: Tensor

    @property
    def T_def(self) -> int:
        return self.pos.t_def

    @property
    def G_def(self) -> int:
        return self.pos.g_def

    @property
    def P_def(self) -> int:
        return self.patch.p_def

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("patch.w", self.patch.w), ("patch.b", self.patch.b),
               ("pos.e_pos", self.pos.e_pos), ("pos.e_temp", self.pos.e_temp),
               ("pos.cls", self.pos.cls), ("pos.cls_pos", self.pos.cls_pos)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named(f"blocks.{i}."))
        out += [("final.g", self.final_g), ("final.b", self.final_b),
                ("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_params(dims: ModelDims, seed: int, T_def: int = 8, G_def: int = 7, P_def: int = 8,
                dtype=None, scheme: str = "fan-in", embed_std: float = 0.02) -> ParamStore:
    """Truncated-normal weights, zero biases, zero head.

    Embedding vectors (E_pos, E_temp, CLS and its positional vector) use
    ``embed_std``.  Projections and the patch kernel use
    ``1/sqrt(fan_in)`` under the default scheme, or 0.02 under ``"std0.02"``;
    at desk widths the flat 0.02 leaves the block outputs too small for the
    CLS feature to vary across clips.
    """
    dtype = dtype or default_dtype()
    rng = np.random.default_rng(seed)

    def T(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    D = dims.D
    psd = proj_std(CHANNELS * P_def * P_def, scheme)
    patch = PatchEmbed(w=T(_trunc_normal(rng, (D, CHANNELS, P_def, P_def), psd)), b=T(np.zeros(D)))
    if not embed_std > 0:
        raise ValueError(f"embed_std must be > 0, got {embed_std}")
    pos = PositionalEmbeds(e_pos=T(_trunc_normal(rng, (G_def * G_def, D), embed_std)),
                           e_temp=T(_trunc_normal(rng, (T_def, D), embed_std)),
                           cls=T(_trunc_normal(rng, (1, D), embed_std)),
                           cls_pos=T(_trunc_normal(rng, (1, D), embed_std)))
    blocks = [init_block_params(rng, D, dims.d_inner, dims.n_state, dims.k, dims.bidirectional, dtype, scheme)
              for _ in range(dims.n_blocks)]
    return ParamStore(dims=dims, patch=patch, pos=pos, blocks=blocks,
                      final_g=T(np.ones(D)), final_b=T(np.zeros(D)),
                      head_w=T(np.zeros((D, dims.num_classes))), head_b=T(np.zeros(dims.num_classes)))


def embed(video, cfg: FlexConfig, params: ParamStore) -> Tensor:
    """Flex the kernel and embeddings to ``cfg`` and build the (B, 1 + T*G^2, D) sequence."""
    video = video if isinstance(video, Tensor) else Tensor(np.asarray(video, dtype=params.patch.w.data.dtype))
    if video.ndim == 4:
        video = video.reshape(1, *video.shape)
    _, T, H, W, C = video.shape
    if (T, H, W) != (cfg.T, cfg.H, cfg.W):
        raise ValueError(f"forward: video {(T, H, W)} does not match config {(cfg.T, cfg.H, cfg.W)}")
    kernel = flex_kernel(params.patch, cfg.P)
    tokens = patchify(video, kernel, params.patch.b, cfg.P)
    e_pos = flex_pos_embed(params.pos, cfg.G)
    e_temp = flex_temp_embed(params.pos, cfg.T)
    return assemble_sequence(tokens, e_pos, e_temp, params.pos.cls, params.pos.cls_pos)


def forward(video, cfg: FlexConfig, params: ParamStore, reference_scan: bool = False):
    """Return ``(cls_feature (B, D), logits (B, K), token_features (B, L, D))``."""
    x = embed(video, cfg, params)
    bidir = params.dims.bidirectional
    for blk in params.blocks:
        x = x + mamba_block(layernorm(x, blk.norm_g, blk.norm_b), blk, bidir, reference_scan)
    feats = layernorm(x, params.final_g, params.final_b)
    cls = feats[:, 0, :]
    logits = matmul(cls, params.head_w) + params.head_b
    return cls, logits, feats


# ---------------------------------------------------------------------------
# checkpoint io

_DIM_ORDER = ("D", "expand", "n_state", "n_blocks", "k", "num_classes", "bidirectional")


def _dims_record(params: ParamStore) -> list[int]:
    d = params.dims
    return [int(getattr(d, f)) for f in _DIM_ORDER] + [params.T_def, params.G_def, params.P_def]


def checkpoint_bytes(params: ParamStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    rec = _dims_record(params)
    buf.write(struct.pack(f"<I{len(rec)}I", len(rec), *rec))
    named = params.named()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(params: ParamStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path, dtype=None) -> ParamStore:
    dtype = dtype or default_dtype()
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    if bytes(view[:4]) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    (version,) = take("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_dims,) = take("<I")
    rec = take(f"<{n_dims}I")
    dims = ModelDims(**{f: (bool(v) if f == "bidirectional" else v) for f, v in zip(_DIM_ORDER, rec)})
    T_def, G_def, P_def = rec[len(_DIM_ORDER):len(_DIM_ORDER) + 3]
    params = init_params(dims, 0, T_def=T_def, G_def=G_def, P_def=P_def, dtype=dtype)
    table = dict(params.named())
    (count,) = take("<I")
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        if name not in table or table[name].shape != tuple(shape):
            raise ValueError(f"{path}: unexpected tensor {name} {tuple(shape)}")
        table[name].data = arr.astype(dtype)
    return params


def params_equal(a: ParamStore, b: ParamStore) -> bool:
    na, nb = a.named(), b.named()
    return len(na) == len(nb) and all(
        x[0] == y[0] and x[1].shape == y[1].shape and np.array_equal(x[1].data, y[1].data)
        for x, y in zip(na, nb))


__all__ = [
    "ModelDims", "ParamStore", "init_params", "embed", "forward", "checkpoint_bytes", "save_checkpoint",
    "load_checkpoint", "params_equal", "SSMBlockParams", "ScanParams",
]
