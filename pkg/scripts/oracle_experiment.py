#!/usr/bin/env python3
"""Desk-scale repair experiment: synthesize scenes, corrupt labels, run the
oracle pipeline, and report AP before/after plus the correction rate.

    python scripts/oracle_experiment.py --images 200 --noise-rate 0.2 \
        --flag-accuracy 1.0 --classifier-accuracy 1.0 --workdir /tmp/vla-exp
"""

import argparse
import sys
from pathlib import Path

from vla.evaluation import render_report
from vla.experiment import OracleExperimentSpec, run_oracle_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", type=int, default=200)
    parser.add_argument("--noise-rate", type=float, default=0.2)
    parser.add_argument("--flag-accuracy", type=float, default=1.0)
    parser.add_argument("--false-flag-rate", type=float, default=0.0)
    parser.add_argument("--classifier-accuracy", type=float, default=1.0)
    parser.add_argument("--categories", type=int, default=5)
    parser.add_argument("--seed", type=int, default=101)
    parser.add_argument("--workdir", default="vla-experiment")
    args = parser.parse_args()

    spec = OracleExperimentSpec(
        images=args.images,
        noise_rate=args.noise_rate,
        category_count=args.categories,
        synth_seed=args.seed,
        noise_seed=args.seed + 1,
        run_seed=args.seed + 2,
        flag_accuracy=args.flag_accuracy,
        false_flag_rate=args.false_flag_rate,
        classifier_accuracy=args.classifier_accuracy,
    )
    outcome = run_oracle_experiment(spec, Path(args.workdir))

    print(f"injected label errors: {outcome.manifest_size}")
    print(f"flagged: {outcome.summary['flagged']}  relabeled: {outcome.summary['relabeled']}")
    print("\nbefore correction:")
    print(render_report(outcome.pre, None, "text-table"))
    print("after correction:")
    print(render_report(outcome.post, outcome.correction, "text-table"))
    print(f"artifacts: {outcome.run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
