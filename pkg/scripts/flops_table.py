"""Print the analytic GFLOPs of the desk sweep grid under both patch rules.

    python scripts/flops_table.py
"""
from flexssm.evaluate import estimate_flops, sweep_config
from flexssm.experiments import DESK_DIMS, GRID_H, GRID_T
from flexssm.flex import FlexSets


def main() -> None:
    sets = FlexSets.desk()
    for rule in ("fixed", "static-tokens"):
        print(f"patch rule {rule}")
        print(f"{'T':>4} {'H':>4} {'P':>4} {'G':>4} {'seq':>6} {'GFLOPs':>9}")
        costs = {}
        for T in GRID_T:
            for H in GRID_H:
                cfg = sweep_config(rule, T, H, sets.P_def, sets.G_def)
                costs[T, H] = estimate_flops(cfg, DESK_DIMS)
                print(f"{T:>4} {cfg.H:>4} {cfg.P:>4} {cfg.G:>4} {cfg.seq_len:>6} {costs[T, H]:>9.4f}")
        small, big = costs[min(GRID_T), min(GRID_H)], costs[max(GRID_T), max(GRID_H)]
        print(f"reduction ({min(GRID_T)}, {min(GRID_H)}) vs ({max(GRID_T)}, {max(GRID_H)}): {100 * (1 - small / big):.1f}%\n")


if __name__ == "__main__":
    main()
