"""Directional ablation on the synthetic corpus.

Trains, per seed, a strong and a weak teacher, a labeled-only baseline and
three students (SSL with scheduled labeled passes, SSL without them, SSL
with the weak teacher), then prints held-out frame errors and relative
reductions against the baseline.

    python scripts/ablation.py --seeds 0 1 2 --out ablation.json
"""

import argparse
import json
import logging
import time
from dataclasses import asdict

from ssl_am.experiment import ExperimentConfig, run_seed
from ssl_am.schedule import relative_error_reduction

ARMS = ("teacher_strong", "teacher_weak", "baseline", "ssl_sl", "ssl_nosl", "ssl_sl_weak")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--protocol", choices=("gtc", "bmuf"), default="gtc")
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig(workers=args.workers, protocol=args.protocol)
    t0 = time.time()
    results = [run_seed(cfg, s) for s in args.seeds]

    print(f"\n{'seed':>4} " + " ".join(f"{a:>14}" for a in ARMS))
    for r in results:
        print(f"{r.seed:>4} " + " ".join(f"{r.errors[a]:>14.4f}" for a in ARMS))
    print("\nrelative frame-error reduction vs baseline (%)")
    for arm in ("ssl_sl", "ssl_nosl", "ssl_sl_weak"):
        vals = [relative_error_reduction(r.errors["baseline"], r.errors[arm]) for r in results]
        print(f"  {arm:<12} " + " ".join(f"{v:7.2f}" for v in vals))
    checks = {
        "ssl_sl < baseline": sum(r.errors["ssl_sl"] < r.errors["baseline"] for r in results),
        "ssl_sl < ssl_nosl": sum(r.errors["ssl_sl"] < r.errors["ssl_nosl"] for r in results),
        "strong <= weak teacher student": sum(r.errors["ssl_sl"] <= r.errors["ssl_sl_weak"] for r in results),
    }
    for name, n in checks.items():
        print(f"  {name:<32} {n}/{len(results)} seeds")
    print(f"total {time.time() - t0:.0f}s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": asdict(cfg), "seeds": [asdict(r) for r in results]}, fh, indent=2, default=str)


if __name__ == "__main__":
    main()
