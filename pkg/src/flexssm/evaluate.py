"""Frozen-feature evaluation: retrieval, linear probing, resolution sweeps and an analytic cost model."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flex import FlexConfig, grid_for_patch, patch_for_grid
from .model import ModelDims, ParamStore, forward, load_checkpoint
from .synth import DatasetManifest
from .tensor import Tape, Tensor, matmul, softmax_cross_entropy, zero_grad
from .train import ClipRenderer, OptimizerState, adamw_step

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("strategy", "checkpoint", "T", "H", "P", "G", "seq_len", "gflops", "top1")
PATCH_RULES = ("fixed", "static-tokens")


@dataclass
class FeatureSet:
    features: np.ndarray        # (n, D), rows L2-normalized
    labels: np.ndarray          # (n,)
    cfg: FlexConfig | None = None
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError(f"FeatureSet: {self.features.shape} features for {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


def _normalize(f: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("feature rows must be nonzero to be L2-normalized")
    return f / norms


def _as_params(checkpoint) -> ParamStore:
    return checkpoint if isinstance(checkpoint, ParamStore) else load_checkpoint(checkpoint)


def extract_features(checkpoint, clips, cfg: FlexConfig, batch_size: int = 32,
                     renderer: ClipRenderer | None = None) -> FeatureSet:
    """L2-normalized CLS features for ``clips`` rendered at ``cfg``; no tape is recorded."""
    clips = list(clips)
    if not clips:
        raise ValueError("extract_features: empty split")
    params = _as_params(checkpoint)
    renderer = renderer or ClipRenderer(budget_bytes=0)
    rows = []
    for s in range(0, len(clips), batch_size):
        video = renderer.batch(clips[s:s + batch_size], cfg.T, cfg.H)
        cls, _, _ = forward(video, cfg, params)
        rows.append(cls.data.astype(np.float64))
    return FeatureSet(_normalize(np.concatenate(rows)), np.array([c.class_id for c in clips]), cfg,
                      [c.id for c in clips])


def retrieval_top1(gallery: FeatureSet, query: FeatureSet) -> float:
    """Fraction of queries whose cosine nearest neighbour in the gallery has the same label.

    Ties go to the lowest gallery index (``argmax`` returns the first maximum).
    """
    if len(gallery) == 0:
        raise ValueError("retrieval_top1: empty gallery")
    if len(query) == 0:
        raise ValueError("retrieval_top1: empty query set")
    sim = _normalize(query.features) @ _normalize(gallery.features).T
    nn = np.argmax(sim, axis=1)
    return float(np.mean(gallery.labels[nn] == query.labels))


@dataclass
class ProbeConfig:
    epochs: int = 200
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0


def linear_probe(train_feats: FeatureSet, test_feats: FeatureSet, cfg: ProbeConfig | None = None,
                 num_classes: int | None = None) -> float:
    """Multinomial logistic regression on frozen features, full-batch AdamW, constant lr."""
    cfg = cfg or ProbeConfig()
    k = int(num_classes or max(train_feats.labels.max(), test_feats.labels.max()) + 1)
    missing = sorted(set(range(k)) - set(train_feats.labels.tolist()))
    if missing:
        raise ValueError(f"linear_probe: classes {missing} absent from the training features")
    D = train_feats.features.shape[1]
    w = Tensor(np.zeros((D, k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    params = [w, b]
    state = OptimizerState.zeros_like(params)
    x = Tensor(train_feats.features.astype(w.data.dtype))
    y = train_feats.labels
    for _ in range(cfg.epochs):
        zero_grad(params)
        with Tape() as tape:
            loss = softmax_cross_entropy(matmul(x, w) + b, y)
        tape.backward(loss)
        adamw_step(params, [w.grad, b.grad], state, cfg.lr, cfg.weight_decay, decay_mask=[True, False])
    logits = test_feats.features @ w.data + b.data
    return float(np.mean(np.argmax(logits, axis=1) == test_feats.labels))


# ---------------------------------------------------------------------------
# cost model


def flops_terms(cfg: FlexConfig, dims: ModelDims) -> dict:
    """Multiply-accumulate counts for one forward pass, split by term."""
    L = cfg.seq_len
    D, Di, N, k = dims.D, dims.d_inner, dims.n_state, dims.k
    dirs = 2 if dims.bidirectional else 1
    return {
        "patch": cfg.T * cfg.n_tokens * 3 * cfg.P * cfg.P * D,
        "proj": dims.n_blocks * dirs * L * (D * 2 * Di + Di * D),
        "conv": dims.n_blocks * dirs * L * Di * k,
        "dbc": dims.n_blocks * dirs * L * Di * (Di + 2 * N),
        "scan": dims.n_blocks * dirs * 3 * L * Di * N,
        "head": D * dims.num_classes,
    }


def estimate_flops(cfg: FlexConfig, dims: ModelDims) -> float:
    """GFLOPs of one forward pass (1 MAC = 2 FLOPs; norms and elementwise ops omitted)."""
    return 2.0 * sum(flops_terms(cfg, dims).values()) / 1e9


# ---------------------------------------------------------------------------
# sweeps


def sweep_config(rule: str, T: int, H: int, P_def: int, G_def: int) -> FlexConfig:
    if rule == "static-tokens":
        P, H_adj = patch_for_grid(H, G_def)
    elif rule == "fixed":
        P = P_def
        _, H_adj = grid_for_patch(H, P_def)
    else:
        raise ValueError(f"unknown patch rule {rule!r}; valid: {', '.join(PATCH_RULES)}")
    return FlexConfig(rule, T, H_adj, P)


@dataclass
class SweepCell:
    T: int
    H: int
    P: int
    G: int
    seq_len: int
    gflops: float
    top1: float | None
    error: str | None = None


@dataclass
class SweepReport:
    strategy: str
    checkpoint: str
    cells: list

    def rows(self) -> list[dict]:
        return [{"strategy": self.strategy, "checkpoint": self.checkpoint, "T": c.T, "H": c.H, "P": c.P,
                 "G": c.G, "seq_len": c.seq_len, "gflops": c.gflops, "top1": c.top1} for c in self.cells]

    def cell(self, T: int, H: int) -> SweepCell:
        for c in self.cells:
            if (c.T, c.H) == (T, H):
                return c
        raise KeyError((T, H))

    def mean_top1(self) -> float:
        return float(np.mean([c.top1 for c in self.cells if c.top1 is not None]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows():
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in SWEEP_COLUMNS])
        return buf.getvalue()

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("gflops", "top1"))
        for c in self.cells:
            if c.top1 is not None:
                w.writerow((repr(c.gflops), repr(c.top1)))
        return buf.getvalue()

    def write(self, path) -> tuple[Path, Path]:
        path = Path(path)
        pairs = path.with_name(path.stem + "_pairs" + path.suffix)
        path.write_text(self.to_csv())
        pairs.write_text(self.pairs_csv())
        return path, pairs


def sweep(checkpoint, manifest: DatasetManifest, T_list, H_list, patch_rule: str = "static-tokens",
          strategy: str = "", checkpoint_name: str | None = None, batch_size: int = 32,
          renderer: ClipRenderer | None = None) -> SweepReport:
    """Retrieval (train gallery, test query) and GFLOPs at every (T, H) cell.

    A failing cell is recorded with ``top1=None`` and the remaining cells still run.
    The reported H is the requested one; the model sees ``P * G``.
    """
    params = _as_params(checkpoint)
    name = checkpoint_name or (str(checkpoint) if not isinstance(checkpoint, ParamStore) else "<memory>")
    gallery_clips, query_clips = manifest.split("train"), manifest.split("test")
    cells = []
    for T in T_list:
        for H in H_list:
            cfg = sweep_config(patch_rule, T, H, params.P_def, params.G_def)
            gf = estimate_flops(cfg, params.dims)
            try:
                g = extract_features(params, gallery_clips, cfg, batch_size, renderer)
                q = extract_features(params, query_clips, cfg, batch_size, renderer)
                top1, err = retrieval_top1(g, q), None
            except Exception as e:  # noqa: BLE001 - cells are independent by contract
                log.warning("sweep cell T=%d H=%d failed: %s", T, H, e)
                top1, err = None, f"{type(e).__name__}: {e}"
            cells.append(SweepCell(T, H, cfg.P, cfg.G, cfg.seq_len, gf, top1, err))
            log.info("cell T=%d H=%d P=%d G=%d top1=%s", T, H, cfg.P, cfg.G, top1)
    return SweepReport(strategy or patch_rule, name, cells)


def write_features(fs: FeatureSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class_id"] + [f"f{i}" for i in range(fs.features.shape[1])])
        for i, (lab, row) in enumerate(zip(fs.labels, fs.features)):
            w.writerow([fs.ids[i] if fs.ids else i, int(lab)] + [repr(float(v)) for v in row])


__all__ = [
    "FeatureSet", "extract_features", "retrieval_top1", "ProbeConfig", "linear_probe", "flops_terms",
    "estimate_flops", "sweep_config", "SweepCell", "SweepReport", "sweep", "write_features",
    "SWEEP_COLUMNS", "PATCH_RULES",
]
