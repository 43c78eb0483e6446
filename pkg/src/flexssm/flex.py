"""Per-batch sampling of spatio-temporal working geometries.

Strategy names are the exact strings used in config files and on the CLI.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .embed import build_resize_1d

STRATEGIES = ("fixed", "temporal", "static-patch", "static-tokens", "flexivit", "flex-all")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class FlexSets:
    """Sampling sets and default geometry.  Defaults are the full-scale values (224 px, 16 frames)."""

    R_s: tuple = (96, 128, 224, 384)
    R_t: tuple = (8, 16, 32, 64)
    flexivit_res: int = 240
    flexivit_patches: tuple = (8, 10, 12, 15, 16, 20, 24, 30, 40, 48)
    flexall_patch_bounds: tuple = (12, 48)
    T_def: int = 16
    H_def: int = 224
    P_def: int = 16

    def __post_init__(self):
        if self.H_def % self.P_def:
            raise ValueError(f"H_def={self.H_def} is not a multiple of P_def={self.P_def}")
        bad = [p for p in self.flexivit_patches if self.flexivit_res % p]
        if bad:
            raise ValueError(f"flexivit patches {bad} do not divide {self.flexivit_res}")

    @property
    def G_def(self) -> int:
        return self.H_def // self.P_def

    @classmethod
    def desk(cls) -> "FlexSets":
        """Geometry shrunk about 4x for CPU-scale runs."""
        return cls(R_s=(24, 32, 56, 96), R_t=(4, 8, 16), flexivit_res=60,
                   flexivit_patches=(2, 3, 4, 5, 6, 10, 12), flexall_patch_bounds=(3, 12),
                   T_def=8, H_def=56, P_def=8)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FlexSets":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class FlexConfig:
    strategy: str
    T: int
    H: int
    P: int
    W: int = field(default=None)

    def __post_init__(self):
        if self.W is None:
            object.__setattr__(self, "W", self.H)
        if self.H % self.P or self.W % self.P:
            raise ValueError(f"FlexConfig: H={self.H} not a multiple of P={self.P}")

    @property
    def G(self) -> int:
        return self.H // self.P

    @property
    def n_tokens(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def seq_len(self) -> int:
        return 1 + self.T * self.n_tokens


def patch_for_grid(H: int, g_target: int) -> tuple[int, int]:
    """Patch size giving exactly ``g_target`` tokens per side, and the matching frame size."""
    P = max(1, round_half_up(H / g_target))
    return P, P * g_target


def grid_for_patch(H: int, P: int) -> tuple[int, int]:
    """Grid side for a fixed patch size, with the frame size snapped to ``P * G``."""
    G = max(1, round_half_up(H / P))
    return G, P * G


def flexall_candidates(H: int, bounds: tuple) -> list[int]:
    lo, hi = bounds
    return [p for p in range(lo, hi + 1) if H % p == 0]


def _pick(rng: np.random.Generator, values):
    values = tuple(values)
    return values[int(rng.integers(len(values)))]


def sample_flex(strategy: str, sets: FlexSets, rng: np.random.Generator) -> FlexConfig:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    if strategy == "fixed":
        return FlexConfig(strategy, sets.T_def, sets.H_def, sets.P_def)
    T = _pick(rng, sets.R_t)
    if strategy == "temporal":
        return FlexConfig(strategy, T, sets.H_def, sets.P_def)
    if strategy == "flexivit":
        return FlexConfig(strategy, T, sets.flexivit_res, _pick(rng, sets.flexivit_patches))
    H = _pick(rng, sets.R_s)
    if strategy == "static-patch":
        _, H = grid_for_patch(H, sets.P_def)
        return FlexConfig(strategy, T, H, sets.P_def)
    if strategy == "static-tokens":
        P, H = patch_for_grid(H, sets.G_def)
        return FlexConfig(strategy, T, H, P)
    cands = flexall_candidates(H, sets.flexall_patch_bounds)
    assert cands, f"no admissible patch size for H={H}"
    return FlexConfig(strategy, T, H, _pick(rng, cands))


def temporal_indices(t_src: int, t_new: int) -> np.ndarray:
    """Frame indices sampled at the centres of ``t_new`` equal slices of the clip."""
    i = np.arange(t_new)
    return np.clip(np.floor((i + 0.5) * t_src / t_new).astype(np.int64), 0, t_src - 1)


def resize_video(video: np.ndarray, t_new: int, h_new: int, w_new: int | None = None) -> np.ndarray:
    """Uniform temporal sampling plus separable bilinear spatial resize of (T, H, W, C) frames."""
    w_new = h_new if w_new is None else w_new
    if t_new < 1 or h_new < 1 or w_new < 1:
        raise ValueError(f"resize_video: target dims must be >= 1, got {(t_new, h_new, w_new)}")
    video = np.asarray(video)
    T, H, W, C = video.shape
    out = video[temporal_indices(T, t_new)] if t_new != T else video
    if h_new != H:
        rh = build_resize_1d(H, h_new, "linear")
        out = rh(out.transpose(1, 0, 2, 3)).transpose(1, 0, 2, 3)
    if w_new != W:
        rw = build_resize_1d(W, w_new, "linear")
        out = rw(out.transpose(2, 0, 1, 3)).transpose(1, 2, 0, 3)
    return np.ascontiguousarray(out)


__all__ = [
    "STRATEGIES", "FlexSets", "FlexConfig", "patch_for_grid", "grid_for_patch", "flexall_candidates",
    "sample_flex", "temporal_indices", "resize_video", "round_half_up",
]
