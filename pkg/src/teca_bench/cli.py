"""Command-line entry points.

Exit codes: 0 success, 1 configuration error, 2 runtime error. The output
root can be moved wholesale with the ``TECA_BENCH_OUT`` environment
variable; relative ``out_dir`` values are resolved under it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import runner
from .config import RunConfig, apply_overrides, config_from_dict, load_config
from .errors import ConfigError, TecaBenchError
from .reporting import (
    emit_image_dumps,
    emit_report,
    entropy_severity_sweep,
    write_comparison_table,
    write_sweep_csv,
)


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _out_root(cfg: RunConfig) -> Path:
    root = Path(cfg.out_dir)
    env = os.environ.get("TECA_BENCH_OUT")
    if env and not root.is_absolute():
        root = Path(env) / root
    return root


def cmd_train_classifier(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    art = runner.prepare_classifier(cfg, out, force=args.force)
    print(f"classifier ready: clean error {art.meta['clean_error_rate']:.2f}% -> {out / 'checkpoints'}")
    return 0


def cmd_train_enhancer(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    art = runner.prepare_bundle(cfg, out, force=args.force)
    print(f"bundle ready: snapshot digest {art.meta['snapshot_digest'][:12]} -> {out / 'checkpoints'}")
    return 0


def cmd_build_suite(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    _, test = runner.prepare_data(cfg)
    suite = runner.prepare_suite(cfg, test, out)
    print(
        f"suite '{suite.manifest['label']}': {len(suite.cells)} cells x "
        f"{suite.manifest['n_per_cell']} samples -> {out / 'suite'}"
    )
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    art = runner.prepare_bundle(cfg, out)
    suite = runner.prepare_suite(cfg, art.test, out)
    reports, summary = runner.run_all_seeds(cfg, art.bundle, suite, art.train.images)
    label = cfg.method.kind + ("_teca" if cfg.teca.enabled else "")
    run_dir = out / "runs" / f"{cfg.protocol.kind}_{label}"
    for rep in reports:
        trial = "" if rep.config.get("protocol", {}).get("kind") != "diverse" else ""
        emit_report(rep, run_dir / f"seed{rep.seed}{trial}")
    write_comparison_table(reports, run_dir / "table.csv")
    (run_dir / "seed_mean.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if cfg.dump_images:
        emit_image_dumps(art.bundle, suite, run_dir / "images", k=cfg.dump_images)
    print(f"{label}: mean error {summary['mean_error']:.2f}% over {len(reports)} run(s) -> {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    art = runner.prepare_bundle(cfg, out)
    suite = runner.prepare_suite(cfg, art.test, out)
    grid = runner.run_ablation_grid(cfg, art.bundle, suite, source_images=art.train.images)
    table = runner.format_ablation_table(grid)
    dst = out / "ablation"
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "table.csv").write_text(table)
    (dst / "grid.json").write_text(json.dumps(grid, indent=2, sort_keys=True))
    print(table)
    return 0


def cmd_sweep_severity(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    art = runner.prepare_bundle(cfg, out)
    sweep_cfg = apply_overrides(cfg, ["corruptions.severities=[1, 2, 3, 4, 5]"])
    suite = runner.prepare_suite(sweep_cfg, art.test, None)
    rows = entropy_severity_sweep(art.bundle, suite)
    dst = out / "sweep"
    write_sweep_csv(rows, dst / "severity_sweep.csv")
    for r in rows:
        print(f"severity {r['severity']}: error {r['error_rate']:.2f}%  entropy {r['mean_entropy']:.4f}")
    return 0


def cmd_reproduce_all(args) -> int:
    cfg = _load(args)
    out = _out_root(cfg)
    art = runner.prepare_bundle(cfg, out)
    suite = runner.prepare_suite(cfg, art.test, out)
    src = art.train.images

    results = {}
    for mkind in ("source", "input_adapt", "bn_adapt", "tent", "eata", "cotta"):
        for teca in (False, True):
            if teca and mkind in ("source", "input_adapt"):
                continue
            v = runner._variant(cfg, **{"method.kind": mkind, "teca.enabled": teca})
            reports, summary = runner.run_all_seeds(v, art.bundle, suite, src)
            label = mkind + ("_teca" if teca else "")
            run_dir = out / "runs" / f"standard_{label}"
            for rep in reports:
                emit_report(rep, run_dir / f"seed{rep.seed}")
            write_comparison_table(reports, run_dir / "table.csv")
            (run_dir / "seed_mean.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
            results[label] = summary["mean_error"]
            print(f"{label:16s} mean error {summary['mean_error']:.2f}%")

    grid = runner.run_param_range_grid(cfg, art.bundle, suite, source_images=src)
    (out / "param_range").mkdir(parents=True, exist_ok=True)
    (out / "param_range" / "grid.json").write_text(json.dumps(grid, indent=2, sort_keys=True))

    ablation = runner.run_ablation_grid(cfg, art.bundle, suite, source_images=src)
    (out / "ablation").mkdir(parents=True, exist_ok=True)
    (out / "ablation" / "grid.json").write_text(json.dumps(ablation, indent=2, sort_keys=True))
    (out / "ablation" / "table.csv").write_text(runner.format_ablation_table(ablation))

    sweep_cfg = apply_overrides(cfg, ["corruptions.severities=[1, 2, 3, 4, 5]"])
    sweep_suite = runner.prepare_suite(sweep_cfg, art.test, None)
    rows = entropy_severity_sweep(art.bundle, sweep_suite)
    write_sweep_csv(rows, out / "sweep" / "severity_sweep.csv")

    emit_image_dumps(art.bundle, suite, out / "images", k=max(cfg.dump_images, 6))
    (out / "summary.json").write_text(
        json.dumps({"standard": results, "param_range": grid, "ablation": ablation}, indent=2, sort_keys=True)
    )
    print(f"all artifacts -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="teca-bench")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config leaf via dotted path (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, extra in (
        ("train-classifier", cmd_train_classifier, True),
        ("train-enhancer", cmd_train_enhancer, True),
        ("build-suite", cmd_build_suite, False),
        ("run", cmd_run, False),
        ("ablate", cmd_ablate, False),
        ("sweep-severity", cmd_sweep_severity, False),
        ("reproduce-all", cmd_reproduce_all, False),
    ):
        p = sub.add_parser(name)
        if extra:
            p.add_argument("--force", action="store_true", help="retrain even if cached")
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    runner.set_threads(cfg.threads)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except TecaBenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
