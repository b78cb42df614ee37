#!/usr/bin/env python3
"""Band-limit ablation: train the equivariant policy at degrees L = 1, 2, 3
with the same seed and budget and compare rotated-scene success rates.

Usage: python scripts/run_degree_ablation.py [--demos 200] [--rollouts 200]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from sphdiff import bench
from sphdiff.encoder import EncoderConfig
from sphdiff.policy import PolicyConfig, SphericalPolicy
from sphdiff.unet import SDTUConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--demos", type=int, default=200)
    ap.add_argument("--rollouts", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=250)
    ap.add_argument("--degrees", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/degree_ablation")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = bench.default_task_spec()
    demos = bench.gen_demos(spec, args.demos, np.random.default_rng(args.seed + 1))
    tcfg = bench.TrainConfig(
        epochs=args.epochs, batch_size=32, learning_rate=1e-3,
        warmup_steps=100, seed=args.seed,
    )

    results = {}
    for L in args.degrees:
        policy = SphericalPolicy(
            PolicyConfig(),
            EncoderConfig(band_limit=L, out_channels=16),
            SDTUConfig(band_limit=L, horizon=16, widths=(8, 16, 32)),
            np.random.default_rng(args.seed),
        )
        t0 = time.time()
        rows = bench.train(policy, demos, tcfg)
        report, _ = bench.evaluate(policy, spec, args.rollouts, "haar", seed=args.seed + 7)
        results[f"L={L}"] = {
            "params": policy.param_count(),
            "final_loss": rows[-1]["loss"],
            "haar_success": report.success_rate,
        }
        print(
            f"L={L}: {policy.param_count()} params, loss {rows[-1]['loss']:.4f}, "
            f"haar success {report.success_rate:.3f} ({time.time() - t0:.0f}s)"
        )

    (out / "summary.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
