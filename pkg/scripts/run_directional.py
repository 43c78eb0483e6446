"""Train fixed and static-tokens models for several seed pairs and report the directional verdict.

    python scripts/run_directional.py --seeds 0,1,2 --out runs/directional

Each pair trains both strategies from the same initialization on the same corpus,
sweeps retrieval over the T x H grid and writes per-run checkpoints, metrics and
sweep CSVs under --out, plus summary.json with the verdict.
"""
import argparse
import logging
from pathlib import Path

from flexssm.experiments import directional_verdict, run_pair, save_summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: 0,1,2)")
    ap.add_argument("--epochs", type=int, default=30, help="training epochs per model (default: 30)")
    ap.add_argument("--out", default="runs/directional", help="output directory (default: runs/directional)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    pairs = []
    for seed in (int(s) for s in args.seeds.split(",")):
        pair = run_pair(seed, epochs=args.epochs, out_dir=out)
        pairs.append(pair)
        for strategy, rep in pair.reports.items():
            acc = [c.top1 for c in rep.cells if c.top1 is not None]
            print(f"seed {seed}  {strategy:<14} mean top1 {rep.mean_top1():.3f}  range {min(acc):.3f}..{max(acc):.3f}")
    v = directional_verdict(pairs)
    print(f"(a) static-tokens higher mean in {v['a_mean_wins']}/{len(pairs)}: {'PASS' if v['a_pass'] else 'FAIL'}")
    print(f"(b) corner gap {100 * v['b_corner_gap']:+.1f} points: {'PASS' if v['b_pass'] else 'FAIL'}")
    print(f"(c) static-tokens spreads {[round(100 * s, 1) for s in v['c_spreads']]}: "
          f"{'PASS' if v['c_pass'] else 'FAIL'}")
    save_summary(pairs, out / "summary.json")


if __name__ == "__main__":
    main()
