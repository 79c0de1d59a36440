"""Method comparison on the standard suite and the steps × iterations heatmap.

Usage: python scripts/run_benchmarks.py [--out artifacts/bench] [--part compare|heatmap|all]
"""
import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from dwsmpc import bench as B

ENVS = ("table", "shelf", "drawer")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("artifacts/bench"))
    ap.add_argument("--models", type=Path, default=Path("artifacts/models"))
    ap.add_argument("--slots", type=Path, default=Path("artifacts/slots/slots.dwsw"))
    ap.add_argument("--part", default="all", choices=["compare", "heatmap", "all"])
    ap.add_argument("--variant", default="slots")
    ap.add_argument("--scenes", type=int, default=5, help="scenes per environment")
    ap.add_argument("--problems", type=int, default=30)
    ap.add_argument("--heatmap-problems", type=int, default=2, help="problems per scene in the sweep")
    ap.add_argument("--methods", nargs="+", default=list(B.TAGS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    bank = B.load_models(args.models, ENVS, [args.variant], slot_path=args.slots)
    log = lambda m: print(m, flush=True)  # noqa: E731
    if args.part in ("compare", "all"):
        problems = B.problem_suite(ENVS, args.scenes, args.problems, seed=1000)
        path = args.out / "compare.json"
        results = json.loads(path.read_text()) if path.exists() else {}
        for tag in args.methods:
            m = B.MethodSpec(tag, args.variant)
            t0 = time.time()
            row, _ = B.evaluate(m, problems, bank, args.seed, csv_path=args.out / f"rows_{tag}.csv", log=log)
            results[tag] = {**asdict(row), "method_spec": m.to_dict(), "suite": [args.scenes * len(ENVS), args.problems]}
            path.write_text(json.dumps(results, indent=1))
            print(f"{m.name}: success {row.success_rate:.3f} cost {row.avg_cost:.1f} time {row.mean_time:.2f} s "
                  f"({time.time() - t0:.0f} s)", flush=True)
        B.write_metrics(args.out / "compare.csv", [B.MetricsRow(**{k: v for k, v in r.items()
                                                                  if k not in ("method_spec", "suite")})
                                                   for r in results.values()])
    if args.part in ("heatmap", "all"):
        problems = B.problem_suite(ENVS, args.scenes, args.heatmap_problems, seed=2000)
        grid = B.sweep_heatmap(problems, bank, variant=args.variant, seed=args.seed, log=log)
        B.write_metrics(args.out / "heatmap.csv", grid)
    return 0


if __name__ == "__main__":
    sys.exit(main())
