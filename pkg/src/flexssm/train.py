"""Flexible training: per-batch geometry sampling, AdamW with warmup + cosine decay."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .flex import STRATEGIES, FlexConfig, FlexSets, sample_flex
from .model import ModelDims, ParamStore, forward, init_params, save_checkpoint
from .ssm import INIT_SCHEMES
from .synth import DatasetManifest, MotionClip, rasterize
from .tensor import NonFiniteError, Tape, softmax_cross_entropy, zero_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "loss", "lr", "strategy", "T", "H", "P", "G")
_NO_DECAY_SUFFIXES = (".b", "_b", "norm_g", "final.g")


class ConfigError(ValueError):
    pass


class TrainingDiverged(NonFiniteError):
    def __init__(self, msg, flex: FlexConfig | None = None, step: int | None = None):
        super().__init__(msg)
        self.flex = flex
        self.step = step


@dataclass
class TrainConfig:
    strategy: str = "static-tokens"
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    train_seed: int = 0
    dataset: str | None = None
    dims: ModelDims = field(default_factory=ModelDims)
    flex: FlexSets = field(default_factory=FlexSets.desk)
    grad_clip: float | None = None
    max_train_clips: int | None = None
    threads: int = 1
    init: str = "fan-in"
    embed_std: float = 0.02

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError("warmup_epochs < epochs violated")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}; valid: {', '.join(INIT_SCHEMES)}")
        if not self.embed_std > 0:
            raise ConfigError("embed_std must be > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["flex"] = self.flex.to_dict()
        return d


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, schedule: str = "cosine") -> float:
    """Linear ramp from 0 over the warmup, then cosine decay towards 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant":
        return base_lr
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to everything but biases, norm parameters and positional embeddings."""
    if name.startswith("pos."):
        return False
    return not (name.endswith(_NO_DECAY_SUFFIXES) or name in ("final.b", "head.b"))


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: OptimizerState, lr: float, wd: float, betas=(0.9, 0.999),
               eps: float = 1e-8, decay_mask=None, names=None) -> None:
    """One decoupled-weight-decay Adam update; parameter arrays are replaced, not mutated."""
    b1, b2 = betas
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            label = names[i] if names else f"#{i}"
            raise NonFiniteError(f"adamw_step: non-finite gradient for parameter {label}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if decay_mask is None or decay_mask[i]:
            update = update + wd * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


class ClipRenderer:
    """Rasterizes clips at a requested geometry with a byte-bounded LRU cache."""

    def __init__(self, budget_bytes: int = 1 << 30, threads: int = 1):
        self.budget = budget_bytes
        self.used = 0
        self.cache: OrderedDict = OrderedDict()
        self.threads = max(1, threads)

    def one(self, clip: MotionClip, T: int, H: int) -> np.ndarray:
        key = (clip.id, T, H)
        hit = self.cache.get(key)
        if hit is not None:
            self.cache.move_to_end(key)
            return hit
        video = rasterize(clip, T, H, H)
        self.cache[key] = video
        self.used += video.nbytes
        while self.used > self.budget and self.cache:
            _, old = self.cache.popitem(last=False)
            self.used -= old.nbytes
        return video

    def batch(self, clips, T: int, H: int) -> np.ndarray:
        if self.threads > 1 and len(clips) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                vids = list(pool.map(lambda c: rasterize(c, T, H, H), clips))
        else:
            vids = [self.one(c, T, H) for c in clips]
        return np.stack(vids)


@dataclass
class TrainResult:
    params: ParamStore
    rows: list
    state: OptimizerState


def _grad_norm(grads) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))


def train(cfg: TrainConfig, manifest: DatasetManifest | None = None, params: ParamStore | None = None,
          renderer: ClipRenderer | None = None) -> TrainResult:
    cfg.validate()
    if manifest is None:
        if cfg.dataset is None:
            raise ConfigError("no dataset given")
        manifest = DatasetManifest.load(cfg.dataset)
    clips = manifest.split("train")
    if cfg.max_train_clips is not None:
        clips = clips[: cfg.max_train_clips]
    if not clips:
        raise ConfigError("training split is empty")
    sets = cfg.flex
    if params is None:
        params = init_params(cfg.dims, cfg.train_seed, T_def=sets.T_def, G_def=sets.G_def, P_def=sets.P_def,
                             scheme=cfg.init, embed_std=cfg.embed_std)
    renderer = renderer or ClipRenderer(threads=cfg.threads)
    order_rng = np.random.default_rng([cfg.train_seed, 1])
    flex_rng = np.random.default_rng([cfg.train_seed, 2])

    named = params.named()
    plist = [t for _, t in named]
    names = [n for n, _ in named]
    mask = [decays(n) for n in names]
    state = OptimizerState.zeros_like(plist)
    steps_per_epoch = math.ceil(len(clips) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(clips))
        losses, hist = [], Counter()
        for s in range(steps_per_epoch):
            batch = [clips[i] for i in perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            fc = sample_flex(cfg.strategy, sets, flex_rng)
            video = renderer.batch(batch, fc.T, fc.H)
            labels = np.array([c.class_id for c in batch])
            lr = lr_at(step, total, warm, cfg.base_lr, cfg.schedule)
            zero_grad(plist)
            try:
                with Tape() as tape:
                    _, logits, _ = forward(video, fc, params)
                    loss = softmax_cross_entropy(logits, labels)
                tape.backward(loss)
            except NonFiniteError as e:
                raise TrainingDiverged(f"non-finite value at step {step} with {fc}: {e}", fc, step) from e
            lval = loss.item()
            if not math.isfinite(lval):
                raise TrainingDiverged(f"non-finite loss at step {step} with {fc}", fc, step)
            grads = [p.grad for p in plist]
            if cfg.grad_clip is not None:
                norm = _grad_norm(grads)
                if norm > cfg.grad_clip:
                    grads = [None if g is None else g * (cfg.grad_clip / norm) for g in grads]
            try:
                adamw_step(plist, grads, state, lr, cfg.weight_decay, cfg.betas, cfg.eps, mask, names)
            except NonFiniteError as e:
                raise TrainingDiverged(f"step {step} with {fc}: {e}", fc, step) from e
            rows.append({"epoch": epoch, "step": step, "loss": lval, "lr": lr, "strategy": cfg.strategy,
                         "T": fc.T, "H": fc.H, "P": fc.P, "G": fc.G})
            losses.append(lval)
            hist[(fc.T, fc.H, fc.P)] += 1
            step += 1
        log.info("epoch %d loss %.4f lr %.2e %s %s", epoch, float(np.mean(losses)), rows[-1]["lr"],
                 cfg.strategy, dict(sorted(hist.items())))
    zero_grad(plist)
    return TrainResult(params=params, rows=rows, state=state)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_run(result: TrainResult, cfg: TrainConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "checkpoint.ssnk", "metrics": out / "metrics.csv", "run": out / "run.json"}
    save_checkpoint(result.params, paths["checkpoint"])
    write_metrics(result.rows, paths["metrics"])
    paths["run"].write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return paths


__all__ = [
    "TrainConfig", "ConfigError", "TrainingDiverged", "OptimizerState", "adamw_step", "lr_at", "decays",
    "ClipRenderer", "TrainResult", "train", "write_metrics", "read_metrics", "save_run", "METRIC_COLUMNS",
]
