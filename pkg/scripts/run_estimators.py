#!/usr/bin/env python3
"""Train and evaluate the parameter estimators for every experiment scheme.

Runs the twelve estimator recipes (three experiment schemes x four
mechanisms) with their default desk budgets. Pass key=value pairs to
override any config field for all runs, e.g.:

    python3 scripts/run_estimators.py epochs=5 pairs_per_epoch=2048
"""

import sys

from mechknow.config import parse_overrides
from mechknow.recipes import REGISTRY, run_recipe


def main() -> int:
    overrides = parse_overrides(sys.argv[1:])
    names = [n for n in REGISTRY if n.startswith("exp_")]
    for name in names:
        print(f"=== {name} ===", flush=True)
        manifest = run_recipe(name, overrides=dict(overrides))
        print(manifest.metrics, flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
