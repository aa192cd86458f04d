#!/usr/bin/env python3
"""Reproduce the covariate-shift classification study end to end.

Order matters: the verification pipeline loads the rotation estimator, the
identifier, and the classifier from checkpoints, so their producing recipes
run first. key=value arguments override config fields for every stage.

    python3 scripts/run_ced_study.py test_limit=200 n_candidates=10
"""

import sys

from mechknow.config import parse_overrides
from mechknow.recipes import run_recipe

STAGES = (
    "exp_noise_rotation",
    "identifier_f1",
    "classifier_baseline",
    "ced_rotated_mnist",
    "candidate_sweep",
)


def main() -> int:
    overrides = parse_overrides(sys.argv[1:])
    for name in STAGES:
        print(f"=== {name} ===", flush=True)
        manifest = run_recipe(name, overrides=dict(overrides))
        print(manifest.metrics, flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
