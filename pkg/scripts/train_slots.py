"""Train the slot encoder on renders of all three environments.

Usage: python scripts/train_slots.py [--out artifacts/slots] [--count 10000] [--epochs 5] [--seed 0]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from dwsmpc import scene as S
from dwsmpc import slot_encoder as SE
from dwsmpc.rng import derive_seed


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("artifacts/slots"))
    ap.add_argument("--count", type=int, default=10000)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    envs = [S.environment(n) for n in ("table", "shelf", "drawer")]
    t0 = time.time()
    images = SE.render_dataset(envs, args.count, derive_seed(args.seed, 100))
    val = SE.render_dataset(envs, 256, derive_seed(args.seed, 200))
    print(f"rendered {len(images)} scenes in {time.time() - t0:.0f} s", flush=True)
    cfg, tc = SE.SlotConfig(), SE.TrainConfig(epochs=args.epochs)
    (args.out / "config.json").write_text(SE.config_json(cfg, tc))
    model, hist = SE.train(images, cfg, tc, args.seed, val, args.out, log=lambda m: print(m, flush=True))
    SE.save(model, args.out / "slots.dwsw", {"val_mse": hist["val"][-1]})
    held_out = [S.sample_scene(envs[i % 3], derive_seed(args.seed, 300, i)) for i in range(150)]
    val_var = float(SE.as_float(val).var(axis=(0, 1, 2)).mean())
    summary = {
        "val_mse_start": hist["val"][0],
        "val_mse_end": hist["val"][-1],
        "val_variance": val_var,
        "mask_purity": SE.mask_purity(model, held_out),
        "steps": len(hist["loss"]),
        "seconds": time.time() - t0,
        "loss": hist["loss"][::10],
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1))
    print({k: v for k, v in summary.items() if k != "loss"}, flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
