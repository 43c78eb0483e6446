"""Procedural action clips stored as motion programs, rendered at any (T, H, W).

Eight classes: a coarse pair (grow / shrink), two fine-grained direction
pairs (translate-left / -right, rotate-cw / -ccw) and a long-horizon pair
(late-diverge-A / -B) that shares its first half exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CLASSES = ("translate-left", "translate-right", "rotate-cw", "rotate-ccw",
           "grow", "shrink", "late-diverge-A", "late-diverge-B")
SHAPES = ("disc", "square", "triangle")
SPLIT_T = 0.5
CLIP_MAGIC = b"SSVC"


@dataclass
class MotionClip:
    id: str
    class_id: int
    sprite: dict          # {"shape", "size", "color"}
    program: dict         # {"kind", "params"}
    noise_sigma: float
    seed: int
    split: str = "train"

    @property
    def kind(self) -> str:
        return self.program["kind"]


@dataclass
class DatasetManifest:
    seed: int
    clips: list
    classes: list = field(default_factory=lambda: list(CLASSES))
    format_version: int = FORMAT_VERSION

    def split(self, name: str) -> list:
        return [c for c in self.clips if c.split == name]

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "seed": self.seed,
            "classes": [{"id": i, "name": n} for i, n in enumerate(self.classes)],
            "clips": [asdict(c) for c in self.clips],
        }
        return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('format_version')}")
        classes = [c["name"] for c in sorted(doc["classes"], key=lambda c: c["id"])]
        clips = [MotionClip(**c) for c in doc["clips"]]
        ids = [c.id for c in clips]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate clip ids")
        for c in clips:
            if not 0 <= c.class_id < len(classes):
                raise ValueError(f"{path}: clip {c.id} has unknown class {c.class_id}")
        return cls(seed=doc["seed"], clips=clips, classes=classes, format_version=doc["format_version"])


def _u(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def _program_params(kind: str, rng) -> dict:
    if kind.startswith("translate"):
        return {"mx": _u(rng, 0.35, 0.65), "my": _u(rng, 0.3, 0.7), "speed": _u(rng, 0.3, 0.5),
                "angle": _u(rng, 0, 2 * np.pi)}
    if kind.startswith("rotate"):
        return {"cx": _u(rng, 0.4, 0.6), "cy": _u(rng, 0.4, 0.6), "radius": _u(rng, 0.15, 0.25),
                "phase": _u(rng, 0, 2 * np.pi), "sweep": _u(rng, np.pi, 1.5 * np.pi),
                "angle": _u(rng, 0, 2 * np.pi)}
    if kind in ("grow", "shrink"):
        return {"mx": _u(rng, 0.35, 0.65), "my": _u(rng, 0.35, 0.65), "rate": _u(rng, 1.0, 1.6),
                "angle": _u(rng, 0, 2 * np.pi)}
    return {"x0": _u(rng, 0.25, 0.4), "y0": _u(rng, 0.4, 0.6), "vx": _u(rng, 0.3, 0.45),
            "amp": _u(rng, 0.03, 0.08), "freq": _u(rng, 1.0, 2.0), "turn": _u(rng, 0.4, 0.6),
            "angle": _u(rng, 0, 2 * np.pi)}


def _sprite(rng) -> dict:
    return {"shape": SHAPES[int(rng.integers(len(SHAPES)))], "size": _u(rng, 0.1, 0.25),
            "color": [_u(rng, 0.35, 1.0) for _ in range(3)]}


def generate(num_per_class: int, split_fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Deterministic class-balanced manifest with a stratified train/test split.

    Late-diverge-A clip ``k`` and late-diverge-B clip ``k`` share sprite and
    drift parameters, so they differ only after the turn.
    """
    if num_per_class < 2:
        raise ValueError("need ≥2 per class")
    if not 0 < split_fraction < 1:
        raise ValueError(f"split fraction must be in (0, 1), got {split_fraction}")
    rng = np.random.default_rng(seed)
    n_train = min(num_per_class - 1, max(1, int(round(num_per_class * split_fraction))))
    clips = []
    shared = {}
    for cid, kind in enumerate(CLASSES):
        order = rng.permutation(num_per_class)
        train_slots = set(order[:n_train].tolist())
        for k in range(num_per_class):
            if kind.startswith("late-diverge"):
                if k not in shared:
                    shared[k] = (_sprite(rng), _program_params(kind, rng))
                sprite, params = shared[k]
            else:
                sprite, params = _sprite(rng), _program_params(kind, rng)
            clips.append(MotionClip(
                id=f"clip-{len(clips):05d}", class_id=cid, sprite=dict(sprite),
                program={"kind": kind, "params": dict(params)},
                noise_sigma=_u(rng, 0.0, 0.05), seed=int(rng.integers(2 ** 31 - 1)),
                split="train" if k in train_slots else "test"))
    return DatasetManifest(seed=seed, clips=clips)


# ---------------------------------------------------------------------------
# motion programs


def trajectory(clip: MotionClip, t: np.ndarray):
    """Centre (x, y), scale multiplier and orientation for times ``t`` in [0, 1]."""
    kind, p = clip.kind, clip.program["params"]
    t = np.asarray(t, dtype=np.float64)
    one = np.ones_like(t)
    if kind in ("translate-left", "translate-right"):
        sgn = -1.0 if kind == "translate-left" else 1.0
        x = p["mx"] + sgn * p["speed"] * (t - 0.5)
        y = p["my"] * one
        scale, ang = one, p["angle"] * one
    elif kind in ("rotate-cw", "rotate-ccw"):
        # image y points down, so increasing phase runs clockwise on screen
        sgn = 1.0 if kind == "rotate-cw" else -1.0
        phi = p["phase"] + sgn * p["sweep"] * t
        x = p["cx"] + p["radius"] * np.cos(phi)
        y = p["cy"] + p["radius"] * np.sin(phi)
        scale, ang = one, p["angle"] + sgn * p["sweep"] * t
    elif kind in ("grow", "shrink"):
        sgn = 1.0 if kind == "grow" else -1.0
        x, y = p["mx"] * one, p["my"] * one
        scale, ang = np.exp(sgn * p["rate"] * (t - 0.5)), p["angle"] * one
    elif kind in ("late-diverge-A", "late-diverge-B"):
        x = p["x0"] + p["vx"] * t
        y = p["y0"] + p["amp"] * np.sin(2 * np.pi * p["freq"] * t)
        sgn = -1.0 if kind == "late-diverge-A" else 1.0
        y = y + sgn * p["turn"] * np.maximum(t - SPLIT_T, 0.0)
        scale, ang = one, p["angle"] * one
    else:
        raise ValueError(f"unknown motion program {kind!r}")
    return np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0), scale, ang


def frame_times(T: int, t_span=(0.0, 1.0)) -> np.ndarray:
    t0, t1 = t_span
    return t0 + (np.arange(T) + 0.5) / T * (t1 - t0)


def _coverage(clip: MotionClip, times: np.ndarray, H: int, W: int) -> np.ndarray:
    """Binary inside-test at the centres of an H x W grid, per frame."""
    x, y, scale, ang = trajectory(clip, times)
    gy = (np.arange(H) + 0.5) / H
    gx = (np.arange(W) + 0.5) / W
    dx = gx[None, None, :] - x[:, None, None]
    dy = gy[None, :, None] - y[:, None, None]
    r = (clip.sprite["size"] * scale / 2.0)[:, None, None]
    th = ang[:, None, None]
    shape = clip.sprite["shape"]
    if shape == "disc":
        inside = dx * dx + dy * dy <= r * r
    elif shape == "square":
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        inside = (np.abs(u) <= r) & (np.abs(v) <= r)
    elif shape == "triangle":
        inside = np.ones(np.broadcast_shapes(dx.shape, dy.shape), dtype=bool)
        for k in range(3):
            a = th - np.pi / 2 + 2 * np.pi * k / 3
            inside &= dx * np.cos(a) + dy * np.sin(a) <= r / 2
    else:
        raise ValueError(f"unknown sprite shape {shape!r}")
    return inside.astype(np.float64)


def box_downsample(x: np.ndarray, s: int) -> np.ndarray:
    """Mean over non-overlapping s x s blocks of the last two axes."""
    if s == 1:
        return x
    *lead, H, W = x.shape
    return x.reshape(*lead, H // s, s, W // s, s).mean(axis=(-3, -1))


def render_clean(clip: MotionClip, T: int, H: int, W: int, supersample: int = 2, t_span=(0.0, 1.0)) -> np.ndarray:
    """Noise-free (T, H, W, 3) frames in float64."""
    if min(T, H, W, supersample) < 1:
        raise ValueError(f"rasterize: invalid dims T={T}, H={H}, W={W}, supersample={supersample}")
    cov = box_downsample(_coverage(clip, frame_times(T, t_span), H * supersample, W * supersample), supersample)
    color = np.asarray(clip.sprite["color"], dtype=np.float64)
    return cov[..., None] * color


def rasterize(clip: MotionClip, T: int, H: int, W: int | None = None, supersample: int = 2,
              t_span=(0.0, 1.0), dtype=np.float32) -> np.ndarray:
    """Render ``clip`` to a (T, H, W, 3) array in [0, 1], with the clip's pixel noise."""
    W = H if W is None else W
    frames = render_clean(clip, T, H, W, supersample, t_span)
    if clip.noise_sigma > 0:
        rng = np.random.default_rng([clip.seed, T, H, W])
        frames = frames + clip.noise_sigma * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(dtype)


def write_clip_cache(path, video: np.ndarray) -> None:
    """Store frames as u8 RGB behind the ``SSVC`` header."""
    T, H, W, C = video.shape
    data = np.round(np.clip(video, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(CLIP_MAGIC + struct.pack("<4I", T, H, W, C) + data.tobytes())


def read_clip_cache(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip cache file")
    T, H, W, C = struct.unpack_from("<4I", raw, 4)
    data = np.frombuffer(raw, dtype=np.uint8, offset=20, count=T * H * W * C)
    return data.reshape(T, H, W, C).astype(np.float32) / 255.0


__all__ = [
    "CLASSES", "SHAPES", "MotionClip", "DatasetManifest", "generate", "trajectory", "frame_times",
    "render_clean", "rasterize", "box_downsample", "write_clip_cache", "read_clip_cache",
]
