"""Command line entry point: ``havt-ivd {gen,train,eval,ablate,report}``.

Exit status is 0 on success, 2 for configuration errors (bad flags, bad
config files, invalid values) and 3 for failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError, HavtError
from ..metrics import evaluate, write_detections
from ..synthetic_scene import SceneConfig, generate_corpus
from .ablation import AXES, run_ablation, value_label
from .config import RunConfig, desk_run_config, load_config
from .data import SplitDataset
from .report import render_report
from .training import load_checkpoint, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _profiles(name: str) -> tuple[RunConfig, SceneConfig]:
    if name == "desk":
        return desk_run_config(), SceneConfig.desk()
    return RunConfig(), SceneConfig()


def _config(args) -> tuple[RunConfig, SceneConfig]:
    run, scene = _profiles(args.profile)
    return load_config(args.config, args.set or (), base=run, scene=scene)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="file of section.key=value lines")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry (repeatable)")
    p.add_argument("--profile", choices=("default", "desk"), default="default", help="base configuration before --config/--set")


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--ratios expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"--ratios expects three values, got {text!r}")
    return parts


def _resolve_ckpt(text: str) -> Path:
    path = Path(text)
    if path.is_dir():
        path = path / "best.pt"
    elif not path.exists() and path.with_suffix(".pt").exists():
        path = path.with_suffix(".pt")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {text} not found")
    return path


def cmd_gen(args) -> int:
    _, scene = _config(args)
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    if args.n < 1:
        raise ConfigError("--n must be positive")
    root = generate_corpus(scene, args.n, args.out, _ratios(args.ratios), workers=args.workers)
    print(f"wrote {args.n} samples to {root} (manifest {root / 'manifest.txt'})")
    return EXIT_OK


def cmd_train(args) -> int:
    run, _ = _config(args)
    result = train(run, args.data, args.out, progress=lambda r: print(r.csv(), flush=True))
    print(f"best_epoch={result.best_epoch} best_val_map={100 * result.best_val_map:.2f} checkpoint={result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, run, _ = load_checkpoint(_resolve_ckpt(args.ckpt))
    data = SplitDataset(args.data, run.mics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dets = predict(model, data, run)
    write_detections(out / "detections.txt", dict(zip(data.ids, dets)))
    report = evaluate(out / "detections.txt", args.data)
    report.write(out / "report.txt")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _axis_values(axis: str, text: str) -> list:
    """Parse ``--values`` against the axis' own value list, by label."""
    known = {value_label(v): v for v in AXES[axis][1]}
    picked = []
    for label in text.split(","):
        if label not in known:
            raise ConfigError(f"axis {axis} has no value {label!r}; choose from {sorted(known)}")
        picked.append(known[label])
    return picked


def cmd_ablate(args) -> int:
    run, _ = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    values = _axis_values(args.axis, args.values) if args.values else None
    table = run_ablation(
        args.axis, run, args.data, args.out, seeds=seeds, values=values, eval_split=args.split,
        progress=lambda tag, rec: print(f"[{tag}] {rec.csv()}", flush=True),
    )
    sys.stdout.write(table.to_text())
    return EXIT_OK


def cmd_report(args) -> int:
    figures = render_report(args.root)
    for path in figures:
        print(path)
    if not figures:
        print(f"no log.csv or ablation tables under {args.root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="havt-ivd", description="Audio-visual idling vehicle detection: data, training, evaluation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ratios", default="0.75,0.125,0.125", help="train,val,test fractions")
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", type=Path, required=True, help="corpus root holding train/ and val/")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--ckpt", required=True, help="checkpoint file, run directory, or name without .pt")
    p.add_argument("--data", type=Path, required=True, help="split directory, e.g. data/test")
    p.add_argument("--out", type=Path, default=Path("."), help="where detections.txt and report.txt go")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare one ablation axis")
    p.add_argument("--axis", choices=sorted(AXES), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--values", help="subset of the axis values, comma-separated labels such as 16-32,8-16-32")
    p.add_argument("--split", default="test")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render PNG figures next to logs and ablation tables")
    p.add_argument("--root", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"havt-ivd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"havt-ivd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HavtError, OSError, ValueError, RuntimeError) as exc:
        print(f"havt-ivd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
