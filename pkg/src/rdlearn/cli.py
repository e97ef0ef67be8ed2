"""Command line entry point.

    rdlearn train <config>
    rdlearn compare <run-dir>... [--out DIR]
    rdlearn rdm-export <checkpoint> <dataset> <tap> [--out STEM]
    rdlearn validate <config>

Run directories go under ``$RDL_OUTPUT_ROOT`` (default ``./runs``). Failures
exit nonzero with a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import load_config
from .data import load_dataset, load_mnist
from .errors import ConfigError, RdlError
from .rdm import METRICS, compute_rdm, export_rdm
from .runner import compare_dirs, export_subset, output_root, run


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    record = run(cfg, Path(args.output_root) if args.output_root else None)
    print(json.dumps({"run_dir": str(record.directory), "final_test_error": record.final_test_error}))
    return 0


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(json.dumps({"valid": True, "name": cfg.name, "method": cfg.method_kind}))
    return 0


def _cmd_compare(args) -> int:
    out = Path(args.out) if args.out else output_root() / "comparison"
    report = compare_dirs(args.run_dirs, out)
    print(json.dumps({"out": str(out), "errors": report.errors}))
    return 0


def _load_any_dataset(path: Path, split: str):
    if path.is_dir():
        return load_mnist(path, split)
    return load_dataset(path)


def _cmd_rdm_export(args) -> int:
    net = checkpoint.load(args.checkpoint)
    ds = _load_any_dataset(Path(args.dataset), args.split)
    idx = export_subset(ds, args.per_class) if args.per_class else np.arange(min(args.count, len(ds)))
    acts = net.activations(ds.images[idx], [args.tap])[args.tap]
    rdm = compute_rdm(acts, args.metric, labels=ds.labels[idx])
    stem = Path(args.out) if args.out else Path(f"rdm_{args.tap}")
    paths = export_rdm(rdm, stem, title=args.tap)
    print(json.dumps({"files": [str(p) for p in paths], "n": rdm.n}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configured run")
    t.add_argument("config")
    t.add_argument("--output-root", help=f"overrides ${'RDL_OUTPUT_ROOT'}")
    t.set_defaults(func=_cmd_train)

    v = sub.add_parser("validate", help="check a config and report every problem")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)

    c = sub.add_parser("compare", help="compare finished run directories")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=_cmd_compare)

    e = sub.add_parser("rdm-export", help="export an RDM (CSV, JSON sidecar, SVG heatmap)")
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="MNIST IDX directory or dataset cache file")
    e.add_argument("tap")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--per-class", type=int, default=10, help="examples per class; 0 uses --count")
    e.add_argument("--count", type=int, default=100)
    e.add_argument("--metric", default="Euclidean", choices=METRICS)
    e.add_argument("--out", help="output stem")
    e.set_defaults(func=_cmd_rdm_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "problems": exc.problems}), file=sys.stderr)
        return 2
    except (RdlError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
