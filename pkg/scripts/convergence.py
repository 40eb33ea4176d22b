"""Per-sub-epoch convergence of the scheduled-learning student.

Writes one CSV per seed with the held-out frame error after every
sub-epoch and its reduction against that seed's labeled-only baseline,
then prints the reductions side by side.

    python scripts/convergence.py --seeds 0 1 --out-dir convergence/
"""

import argparse
import csv
import logging
from pathlib import Path

from ssl_am.experiment import ExperimentConfig, run_seed
from ssl_am.schedule import relative_error_reduction


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--arm", default="ssl_sl", choices=("ssl_sl", "ssl_nosl", "ssl_sl_weak"))
    ap.add_argument("--out-dir", default="convergence")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cfg = ExperimentConfig()
    table = {}
    for seed in args.seeds:
        res = run_seed(cfg, seed)
        base = res.errors["baseline"]
        curve = res.curves[args.arm]
        path = out / f"{args.arm}-seed{seed}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sub_epoch", "heldout_frame_error", "relative_error_reduction_vs_baseline"])
            for s, err in enumerate(curve):
                w.writerow([s, repr(err), repr(relative_error_reduction(base, err))])
        table[seed] = [relative_error_reduction(base, e) for e in curve]
        print(f"wrote {path}")

    print("\nsub_epoch " + " ".join(f"seed{s:>3}" for s in table))
    for i in range(max(map(len, table.values()))):
        print(f"{i:>9} " + " ".join(f"{v[i]:7.2f}" if i < len(v) else " " * 7 for v in table.values()))


if __name__ == "__main__":
    main()
