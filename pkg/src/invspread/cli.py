"""Command-line entry point: train, eval, ablate, export-embeddings.

Exit status is 0 on success, 2 for invalid configuration or usage and 1 for
any other failure (unreadable data, incompatible checkpoint, aborted training).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import pipeline, trainer
from .config import RunConfig, load_run_config, preset_names
from .errors import ConfigError, ContractError, InvSpreadError

log = logging.getLogger("invspread")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

ABLATION_FIELDS = ("strategy", "knn_accuracy", "linear_accuracy", "nmi", "histogram_median_gap", "changed")


def _resolve(args) -> RunConfig:
    if args.config is None and args.preset is None:
        raise ConfigError("give --config and/or --preset")
    overrides = {"train": {"master_seed": args.seed}} if args.seed is not None else None
    return load_run_config(args.config, preset=args.preset, overrides=overrides)


def _checkpoint(args, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else cfg.run_dir / "last.bin"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else cfg.run_dir
    state, history = pipeline.train_run(cfg, out, resume=args.checkpoint)
    log.info("trained to epoch %d; artifacts in %s", state.epoch, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = _checkpoint(args, cfg)
    params = trainer.load_encoder(ckpt, cfg.train.encoder)
    train_ds, test_ds = pipeline.load_datasets(cfg)
    result = pipeline.evaluate(params, cfg, train_ds, test_ds)
    out = Path(args.out) if args.out else ckpt.parent
    pipeline.write_eval(result, out)
    r = result.report
    print(f"knn_accuracy={r.knn_accuracy:.4f} linear_accuracy={r.linear_accuracy} nmi={r.nmi:.4f} report={out / 'report.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    if not args.sweep:
        raise ConfigError(f"empty sweep spec; choose one of {pipeline.AXES}", field="sweep")
    try:
        points = pipeline.sweep_points(cfg, args.sweep)
    except ContractError as exc:
        raise ConfigError(str(exc), field="sweep") from None
    root = (Path(args.out) if args.out else cfg.run_dir) / f"ablation-{args.sweep}"
    train_ds, test_ds = pipeline.load_datasets(cfg)
    rows = []
    for label, point in points:
        out = root / pipeline.slug(label)
        log.info("sweep point %s -> %s", label, out)
        state, _ = pipeline.train_run(point, out, train_ds=train_ds)
        result = pipeline.evaluate(state.params, point, train_ds, test_ds)
        pipeline.write_eval(result, out)
        r = result.report
        rows.append((label, r.knn_accuracy, r.linear_accuracy, r.nmi, r.histogram_median_gap, ";".join(pipeline.config_diff(cfg, point))))
    table = root.parent / f"ablation_{args.sweep}.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        w.writerows(rows)
    for row in rows:
        print(f"{row[0]:8s} knn={row[1]:.4f}")
    print(f"table: {table}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _resolve(args)
    ckpt = _checkpoint(args, cfg)
    params = trainer.load_encoder(ckpt, cfg.train.encoder)
    train_ds, test_ds = pipeline.load_datasets(cfg)
    ds = train_ds if args.split == "train" else test_ds
    es = pipeline.embedding_set(params, ds, cfg)
    out = Path(args.out) if args.out else ckpt.parent / f"embeddings_{args.split}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_embeddings(es, out)
    print(f"wrote {len(es)}x{es.dim} embeddings to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invspread", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config YAML")
        p.add_argument("--preset", help=f"named preset ({', '.join(preset_names())})")
        p.add_argument("--seed", type=int, help="override train.master_seed")
        p.add_argument("--out", help="output directory (file for export-embeddings)")
        return p

    p = common(sub.add_parser("train", help="train an encoder"))
    p.add_argument("--checkpoint", help="resume from this training checkpoint")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", help="checkpoint or encoder file (default: <run dir>/last.bin)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="run an ablation sweep"))
    p.add_argument("--sweep", "--axis", dest="sweep", default="", help=f"sweep axis: {' or '.join(pipeline.AXES)}")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("export-embeddings", help="write embeddings to the binary export format"))
    p.add_argument("--checkpoint", help="checkpoint or encoder file (default: <run dir>/last.bin)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvSpreadError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
