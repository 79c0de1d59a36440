"""Generate expert datasets for the three environments.

Usage: python scripts/generate_data.py [--out artifacts/data] [--scenes 60] [--problems 6] [--seed 0]
       [--rrt-iters N] [--ocp-iters N] [env ...]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from dwsmpc import datagen, scene
from dwsmpc.arm import ArmSpec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("envs", nargs="*", default=["table", "shelf", "drawer"])
    ap.add_argument("--out", type=Path, default=Path("artifacts/data"))
    ap.add_argument("--scenes", type=int, default=60)
    ap.add_argument("--problems", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--rrt-iters", type=int, default=None)
    ap.add_argument("--ocp-iters", type=int, default=None)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    spec, params = ArmSpec(), datagen.DatagenParams()
    if args.rrt_iters is not None:
        params.rrt.max_iters = args.rrt_iters
    if args.ocp_iters is not None:
        params.ocp_iters = args.ocp_iters
    for name in args.envs:
        env = scene.environment(name)
        t0 = time.time()

        def progress(rep):
            if rep.attempted % 10 == 0:
                print(f"[{name}] {rep.accepted}/{rep.attempted} accepted, {time.time() - t0:.0f} s", flush=True)

        records, report = datagen.generate(env, spec, args.scenes, args.problems, params, args.seed, args.workers, progress)
        datagen.write_dataset(args.out / f"{name}.jsonl", datagen.make_header(spec, params.T, name, params.dt), records)
        summary = report.summary() | {"params": params.to_dict(), "seed": args.seed}
        (args.out / f"{name}_report.json").write_text(json.dumps(summary, indent=1))
        print(f"[{name}] done: {report.accepted}/{report.attempted} in {time.time() - t0:.0f} s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
