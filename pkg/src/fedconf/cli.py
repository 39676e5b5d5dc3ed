"""Command-line entry point.

Subcommands::

    fedconf gen-data          write dataset.csv + manifest.json
    fedconf validate-entropy  per-trip loss and entropy matrices
    fedconf compare           fedavg / feddf / confidence_distill across modes and seeds
    fedconf plotdata FILE     per-method learning curves from a metrics CSV

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fedconf import experiments as ex
from fedconf.config import ExperimentConfig, load_config, render_config
from fedconf.datagen import Dataset, dump_dataset, load_dataset
from fedconf.errors import ConfigError, DomainError, FormatError, ParseError, ShapeError

log = logging.getLogger("fedconf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
_INVALID = (ConfigError, ParseError, FormatError, DomainError, ShapeError)

CONFIG_NAME = "config.resolved"


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out)
    ex.write_atomic(out / CONFIG_NAME, render_config(cfg))
    return out


def _dataset(args, cfg: ExperimentConfig) -> Dataset:
    if args.data:
        return load_dataset(args.data)
    log.info("no --data given; generating the dataset from the config (seed %d)", cfg.seed)
    return ex.make_dataset(cfg)


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    data = ex.make_dataset(cfg)
    ex.write_atomic(out / "dataset.csv", dump_dataset(data))
    ex.write_atomic(out / "manifest.json", ex.to_json(ex.manifest(cfg, data, "dataset.csv")))
    print(f"wrote {len(data)} samples to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_validate_entropy(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    res = ex.run_divergence(_dataset(args, cfg), cfg)
    summary = ex.divergence_summary(res)
    ex.write_atomic(out / "loss_matrix.csv", ex.grid_csv(res.loss))
    ex.write_atomic(out / "entropy_matrix.csv", ex.grid_csv(res.entropy))
    for name, grid in res.entropies.items():
        ex.write_atomic(out / f"entropy_matrix_{name}.csv", ex.grid_csv(grid))
    ex.write_atomic(out / "divergence_summary.json", ex.to_json(summary))
    n = len(res.trips)
    print(f"hypothesis 1 (diagonal minimal): {summary['hypothesis1_columns']}/{n} columns")
    for name, entry in summary["by_entropy_mode"].items():
        tag = " (scored)" if name == cfg.entropy_mode else ""
        print(f"hypothesis 2 (entropy argmin == loss argmin, {name}{tag}): {entry['hypothesis2_columns']}/{n} columns")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    res = ex.run_compare(_dataset(args, cfg), cfg)
    parsed = {}
    for mode, rows in res.metrics.items():
        text = ex.metrics_csv(rows, cfg.record_wall_ms)
        ex.write_atomic(out / f"metrics_{mode}.csv", text)
        ex.write_atomic(out / f"clients_{mode}.csv", ex.histogram_csv(rows))
        parsed[mode] = ex.read_metrics(text)
    summary = ex.compare_summary(parsed)
    ex.write_atomic(out / "summary.json", ex.to_json(summary))
    text = ex.summary_text(summary)
    ex.write_atomic(out / "summary.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    path = Path(args.metrics)
    rows = ex.read_metrics(path.read_text())
    out = Path(args.out) if args.out else path.parent
    if not rows:
        log.warning("%s has no data rows; nothing written", path)
        return EXIT_OK
    for method, points in ex.curves(rows).items():
        target = out / f"{path.stem}_{method}.csv"
        ex.write_atomic(target, ex.curve_csv(points))
        print(f"wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedconf", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key = value config file (defaults apply for missing keys)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the dataset/validation seed")
        if data:
            p.add_argument("--data", help="dataset file from gen-data (default: generate from config)")

    p = sub.add_parser("gen-data", help="generate the synthetic multi-trip dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("validate-entropy", help="loss vs entropy divergence matrices")
    common(p)
    p.set_defaults(func=cmd_validate_entropy)
    p = sub.add_parser("compare", help="run all methods over modes and seeds")
    common(p)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("plotdata", help="learning-curve files from a metrics CSV")
    p.add_argument("metrics", help="metrics CSV written by compare")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps everything else to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
