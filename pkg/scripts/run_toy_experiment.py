#!/usr/bin/env python3
"""Run the full toy experiment: corpus generation, two-stage training,
ablation twins, held-out benchmark, and all evaluation passes.

Everything caches inside --work, so re-runs only redo missing phases.

    python scripts/run_toy_experiment.py --work runs/full
    python scripts/run_toy_experiment.py --work runs/pilot --clips 150 \
        --stage1-steps 1500 --stage2-steps 1000 --ablation-steps 500
"""

import argparse
import json
import sys

from stillmotion.pipeline import ExperimentConfig, run_full_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work", required=True, help="working directory for all artifacts")
    parser.add_argument("--clips", type=int, default=500)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--frames", type=int, default=16)
    parser.add_argument("--base-channels", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stage1-steps", type=int, default=5000)
    parser.add_argument("--stage1-lr", type=float, default=2e-4)
    parser.add_argument("--stage2-steps", type=int, default=4000)
    parser.add_argument("--stage2-lr", type=float, default=1e-3)
    parser.add_argument("--ablation-steps", type=int, default=2000)
    parser.add_argument("--manifest-entries", type=int, default=30)
    parser.add_argument("--eval-steps", type=int, default=15)
    parser.add_argument("--cfg-scale", type=float, default=7.5)
    args = parser.parse_args()

    cfg = ExperimentConfig(
        work_dir=args.work,
        clips=args.clips,
        size=args.size,
        frame_count=args.frames,
        base_channels=args.base_channels,
        seed=args.seed,
        stage1_steps=args.stage1_steps,
        stage1_lr=args.stage1_lr,
        stage2_steps=args.stage2_steps,
        stage2_lr=args.stage2_lr,
        ablation_steps=args.ablation_steps,
        manifest_entries=args.manifest_entries,
        eval_ddim_steps=args.eval_steps,
        cfg_scale=args.cfg_scale,
    )
    summary = run_full_experiment(cfg)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
