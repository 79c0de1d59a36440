"""Train one trajectory denoiser per environment on its expert dataset.

Usage: python scripts/train_diffusion.py [--variant slots] [--steps 2500] [--width 64] [env ...]
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from dwsmpc import bench, datagen
from dwsmpc import diffusion as D
from dwsmpc import slot_encoder as SE
from dwsmpc.arm import ArmSpec


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("envs", nargs="*", default=["table", "shelf", "drawer"])
    ap.add_argument("--data", type=Path, default=Path("artifacts/data"))
    ap.add_argument("--slots", type=Path, default=Path("artifacts/slots/slots.dwsw"))
    ap.add_argument("--out", type=Path, default=Path("artifacts/models"))
    ap.add_argument("--variant", default="slots", choices=D.VARIANTS)
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--max-records", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    spec = ArmSpec()
    enc = D.Encoders(spec, SE.load(args.slots) if args.variant == "slots" else None)
    summary_path = args.out / "training.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    for name in args.envs:
        cpu0, t0 = time.process_time(), time.time()
        header, records = datagen.read_dataset(args.data / f"{name}.jsonl", spec)
        records = records[: args.max_records]
        x0, conds = D.prepare_training_set(records, enc, args.variant, spec)
        cfg = D.DenoiserConfig(T=header["T"], n=spec.n, width=args.width, token_dim=enc.token_dim(args.variant),
                               variant=args.variant)
        tc = D.DiffusionTrainConfig(steps=args.steps)
        trained, hist = D.train(x0, conds, spec, cfg, tc, args.seed,
                                log=lambda m: print(f"[{name}] {m}", flush=True))
        D.save(trained, bench.model_path(args.out, name, args.variant), {"env": name})
        summary[f"{name}_{args.variant}"] = {
            "records": len(records),
            "steps": args.steps,
            "width": args.width,
            "loss_first100": float(np.mean(hist["loss"][:100])),
            "loss_last100": float(np.mean(hist["loss"][-100:])),
            "cpu_seconds": time.process_time() - cpu0,
            "wall_seconds": time.time() - t0,
        }
        summary_path.write_text(json.dumps(summary, indent=1))
        print(f"[{name}] done {summary[f'{name}_{args.variant}']}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
