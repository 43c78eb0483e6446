"""Fixed-geometry vs. flexible training comparison used by the scripts and the acceptance suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluate import SweepReport, sweep
from .flex import FlexSets
from .model import ModelDims, init_params
from .synth import generate
from .train import ClipRenderer, TrainConfig, save_run, train

log = logging.getLogger(__name__)

DESK_DIMS = ModelDims(D=32, expand=2, n_state=8, n_blocks=2, k=4, num_classes=8)
# from-scratch training on 160 clips for 300 steps needs a larger step than the fine-tuning default of 1e-3,
# and embeddings closer to the patch-token scale so position and time survive the pre-norms
DESK_LR = 3e-3
DESK_EMBED_STD = 0.06
GRID_T = (4, 8, 16)
GRID_H = (24, 32, 56, 96)
# each trained model is swept with the patch rule of its own training regime
SWEEP_RULE = {"fixed": "fixed", "static-tokens": "static-tokens"}


@dataclass
class PairResult:
    seed: int
    reports: dict  # strategy -> SweepReport
    seconds: float

    def summary(self) -> dict:
        out = {"seed": self.seed, "seconds": round(self.seconds, 1)}
        for s, rep in self.reports.items():
            out[s] = {"mean": rep.mean_top1(), "cells": {f"T{c.T}_H{c.H}": c.top1 for c in rep.cells}}
        return out


def run_pair(seed: int, dims: ModelDims = DESK_DIMS, epochs: int = 30, per_class: int = 25,
             strategies=("fixed", "static-tokens"), out_dir=None, grid_T=GRID_T, grid_H=GRID_H,
             base_lr: float = DESK_LR, embed_std: float = DESK_EMBED_STD) -> PairResult:
    """Train each strategy from the same initialization on the same corpus, then sweep it.

    ``seed`` is used as both the data seed and the train seed of the pair.
    """
    t0 = time.time()
    manifest = generate(per_class, 0.8, seed)
    sets = FlexSets.desk()
    renderer = ClipRenderer()
    reports = {}
    for strategy in strategies:
        cfg = TrainConfig(strategy=strategy, epochs=epochs, train_seed=seed, dims=dims, flex=sets,
                          base_lr=base_lr, embed_std=embed_std)
        params = init_params(dims, seed, T_def=sets.T_def, G_def=sets.G_def, P_def=sets.P_def, embed_std=embed_std)
        result = train(cfg, manifest, params, renderer)
        rep = sweep(result.params, manifest, grid_T, grid_H, SWEEP_RULE[strategy], strategy=strategy,
                    checkpoint_name=f"seed{seed}-{strategy}", renderer=renderer)
        reports[strategy] = rep
        log.info("seed %d %s mean top1 %.3f", seed, strategy, rep.mean_top1())
        if out_dir is not None:
            d = Path(out_dir) / f"seed{seed}" / strategy
            save_run(result, cfg, d)
            rep.write(d / "sweep.csv")
    return PairResult(seed, reports, time.time() - t0)


def directional_verdict(pairs: list[PairResult], margin: float = 0.05, spread: float = 0.15) -> dict:
    """Evaluate the three directional conditions over a list of seed pairs."""
    t_min, h_min = min(GRID_T), min(GRID_H)
    wins = [p.reports["static-tokens"].mean_top1() > p.reports["fixed"].mean_top1() for p in pairs]
    gaps = [p.reports["static-tokens"].cell(t_min, h_min).top1 - p.reports["fixed"].cell(t_min, h_min).top1
            for p in pairs]
    spreads = []
    for p in pairs:
        acc = [c.top1 for c in p.reports["static-tokens"].cells]
        spreads.append(max(acc) - min(acc))
    return {
        "a_mean_wins": sum(wins), "a_pass": all(wins),
        "b_corner_gap": float(np.mean(gaps)), "b_pass": float(np.mean(gaps)) >= margin,
        "c_spreads": spreads, "c_pass": all(s <= spread for s in spreads),
    }


def save_summary(pairs: list[PairResult], path) -> None:
    doc = {"pairs": [p.summary() for p in pairs], "verdict": directional_verdict(pairs)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


__all__ = ["DESK_DIMS", "DESK_LR", "DESK_EMBED_STD", "GRID_T", "GRID_H", "PairResult", "run_pair", "directional_verdict", "save_summary"]
