#!/usr/bin/env python3
"""Side studies: noise pixel-ratio sweep, restoration, joint-vs-individual.

    python3 scripts/run_ablations.py epochs=8
"""

import sys

from mechknow.config import parse_overrides
from mechknow.recipes import run_recipe

STAGES = (
    "bw_ratio_sweep",
    "exp_noise_translation",
    "restoration",
    "joint_vs_individual",
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
