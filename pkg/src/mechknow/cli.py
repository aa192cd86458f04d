"""Command-line front end.

Verbs:
  fetch-data   download/verify raw datasets into the cache
  run          execute a named recipe (key=value overrides accepted)
  list         show the recipe registry
  plot         re-render summary charts from a results directory

Failures exit nonzero after printing one machine-readable JSON error record
to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as dmod
from . import evaluation as evmod
from . import recipes as rmod


def _fail(kind: str, detail: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "detail": detail}) + "\n")
    return 1


def cmd_fetch_data(args) -> int:
    sources = args.sources.split(",") if args.sources else list(dmod.MIRRORS)
    report = dmod.fetch_data(sources, Path(args.cache_dir))
    print(json.dumps(report, indent=2))
    bad = sorted(k for k, v in report.items() if v.startswith("unavailable"))
    if bad:
        return _fail("fetch_failed", f"files not available: {bad}")
    return 0


def cmd_run(args) -> int:
    from .config import parse_overrides

    overrides = parse_overrides(args.overrides)
    manifest = rmod.run_recipe(
        args.recipe, overrides=overrides,
        config_file=Path(args.config) if args.config else None,
    )
    print(json.dumps({"recipe": manifest.recipe, "metrics": manifest.metrics,
                      "elapsed_s": manifest.elapsed_s,
                      "run_dir": str(Path(manifest.config["results_dir"]) / manifest.recipe)},
                     indent=2, default=float))
    return 0


def cmd_list(args) -> int:
    rows = rmod.list_recipes()
    width = max(len(name) for name, _, _ in rows)
    for name, anchor, deps in rows:
        suffix = f"  [needs: {', '.join(deps)}]" if deps else ""
        print(f"{name:<{width}}  {anchor}{suffix}")
    return 0


def cmd_plot(args) -> int:
    root = Path(args.results_dir)
    if not root.is_dir():
        return _fail("bad_path", f"not a directory: {root}")
    rendered = []
    for manifest_path in sorted(root.rglob("manifest.json")):
        payload = json.loads(manifest_path.read_text())
        flat = {}
        for key, value in payload.get("metrics", {}).items():
            if isinstance(value, (int, float)):
                flat[key] = float(value)
            elif isinstance(value, dict) and all(
                isinstance(v, (int, float)) for v in value.values()
            ):
                rendered += evmod.emit_plots(
                    {f"replot_{key}": {str(k): float(v) for k, v in value.items()}},
                    manifest_path.parent,
                )
        if flat:
            rendered += evmod.emit_plots({"replot_headline": flat}, manifest_path.parent)
    if not rendered:
        return _fail("nothing_to_plot", f"no plottable metrics under {root}")
    for p in rendered:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mechknow", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("fetch-data", help="download/verify raw datasets")
    p.add_argument("--sources", default="", help="comma-separated source names")
    p.add_argument("--cache-dir", default=str(dmod.DEFAULT_CACHE))
    p.set_defaults(fn=cmd_fetch_data)

    p = sub.add_parser("run", help="execute a recipe")
    p.add_argument("recipe")
    p.add_argument("overrides", nargs="*", help="key=value config overrides")
    p.add_argument("--config", default=None, help="key=value config file")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("list", help="show the recipe registry")
    p.set_defaults(fn=cmd_list)

    p = sub.add_parser("plot", help="re-render charts from a results directory")
    p.add_argument("results_dir")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except rmod.MissingDependencyError as e:
        return _fail("missing_dependency", str(e))
    except (dmod.IngestionError, dmod.IntegrityError) as e:
        return _fail("data_error", str(e))
    except (ValueError, RuntimeError) as e:
        return _fail(type(e).__name__, str(e))
