"""Command-line pipeline: gen-data, train-detector, train-filter, eval, gradcam.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    DEFAULT_SIZES,
    AttackDiverged,
    apply_filter,
    default_attack_config,
    init_identity_filter,
    load_filter,
    optimize_filter,
    save_filter,
)
from .data import ATTACKS, generate_corpus, read_corpus, split_partition, write_corpus
from .detector import ARCHITECTURES, default_train_config, load_detector, save_detector, train_detector
from .evaluation import cross_eval
from .explain import LABELS, average_heatmaps, gradcam_batch, render_heatmap

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
PATH_KEYS = ("out", "data", "detector", "detectors", "filters")


class InputError(Exception):
    """Bad arguments, configuration or missing inputs (exit code 2)."""


def filter_name(attack: str, size: int, detector_id: str) -> str:
    return f"filter_{attack}_L{size}_{detector_id}"


def detector_name(arch: str) -> str:
    return f"detector_{arch}"


def _odd_size(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1 or v % 2 == 0:
        raise argparse.ArgumentTypeError(f"filter size must be a positive odd integer, got {v}")
    return v


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _metadata(args, **extra) -> dict:
    effective = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func", "config")}
    effective = {k: ([str(p) for p in v] if isinstance(v, list) and v and isinstance(v[0], Path) else v) for k, v in effective.items()}
    return {"command": args.command, "version": __version__, "effective": effective, **extra}


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    attacks = args.attacks.split(",") if args.attacks else list(ATTACKS)
    try:
        corpus = generate_corpus(args.seed, args.n_bona, attacks, args.height, args.width)
        partition = split_partition(corpus, args.ratio, args.seed)
    except ValueError as e:
        raise InputError(str(e)) from None
    out = args.out
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".gen-data-", dir=out.parent))
    except OSError as e:
        raise InputError(f"cannot write under {out}: {e}") from None
    try:
        write_corpus(corpus, partition, staging)
        _write_json(staging / "gen-data.meta.json", _metadata(args))
        out.mkdir(exist_ok=True)
        for entry in sorted(staging.iterdir()):
            target = out / entry.name
            if target.is_dir():
                shutil.rmtree(target)
            entry.replace(target)
    except OSError as e:
        raise InputError(f"cannot write corpus to {out}: {e}") from None
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    n_spoof = sum(len(v) for v in corpus.spoofs.values())
    print(
        f"corpus: {corpus.n_bona} bona fide, {n_spoof} spoof ({', '.join(corpus.attack_ids)}), "
        f"{'x'.join(map(str, corpus.image_shape))}, part1={len(partition.part1)} part2={len(partition.part2)} -> {out}"
    )
    return EXIT_OK


def _load_corpus(path: Path):
    try:
        return read_corpus(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read corpus at {path}: {e}") from None


def _load_detector(path: Path):
    if not path.is_file():
        raise InputError(f"detector checkpoint not found: {path}")
    try:
        det = load_detector(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise InputError(f"invalid detector checkpoint {path}: {e}") from None
    if not det.frozen:
        det.freeze()
    return det


def cmd_train_detector(args) -> int:
    corpus, partition = _load_corpus(args.data)
    overrides = {"seed": args.seed}
    for key in ("epochs", "batch_size", "learning_rate", "weight_decay"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    try:
        config = default_train_config(args.arch, **overrides)
    except (ValueError, TypeError) as e:
        raise InputError(str(e)) from None
    args.out.mkdir(parents=True, exist_ok=True)

    def log(epoch, loss):
        print(f"[{args.arch}] epoch {epoch + 1}/{config.epochs} loss {loss:.4f}", flush=True)

    det = train_detector(corpus, partition, args.arch, config, log=None if args.quiet else log)
    path = args.out / f"{detector_name(args.arch)}.json"
    save_detector(det, path)
    _write_json(args.out / f"{detector_name(args.arch)}.meta.json", _metadata(args, train_config=vars_of(config)))
    print(f"detector {args.arch} -> {path} (sha256 {det.fingerprint()[:12]})")
    return EXIT_OK


def vars_of(dc) -> dict:
    return {k: getattr(dc, k) for k in dc.__dataclass_fields__}


def cmd_train_filter(args) -> int:
    det = _load_detector(args.detector)
    corpus, partition = _load_corpus(args.data)
    if args.attack not in corpus.attack_ids:
        raise InputError(f"attack {args.attack!r} not in corpus (has {', '.join(corpus.attack_ids)})")
    bona, spoofs = corpus.select(partition.part1)
    overrides = {"seed": args.seed}
    for key in ("learning_rate", "weight_decay", "batch_size", "max_epochs", "eer_stop_threshold"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    try:
        config = default_attack_config(det.architecture_id, args.size, **overrides)
    except (ValueError, TypeError) as e:
        raise InputError(str(e)) from None
    args.out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        print(f"[{args.attack} L={args.size} {det.architecture_id}] epoch {rec.epoch} objective {rec.objective:.4f} EER {rec.eer:.2f}%", flush=True)

    try:
        filt, log = optimize_filter(
            spoofs[args.attack], bona, det, args.size, config, attack_id=args.attack,
            progress=None if args.quiet else progress,
        )  # fmt: skip
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        raise InputError(str(e)) from None
    filt.trained_on = det.architecture_id
    stem = filter_name(args.attack, args.size, det.architecture_id)
    save_filter(filt, args.out / f"{stem}.json")
    (args.out / f"{stem}_log.csv").write_text(log.to_csv())
    _write_json(
        args.out / f"{stem}.meta.json",
        _metadata(
            args,
            attack_config=vars_of(config),
            detector_sha256=det.fingerprint(),
            stop_reason=log.stop_reason,
            initial_eer=log.initial_eer,
            initial_objective=log.initial_objective,
        ),
    )
    last = log.records[-1]
    print(f"filter {stem}: {len(log.records)} epochs, stop={log.stop_reason}, monitored EER {log.initial_eer:.2f}% -> {last.eer:.2f}%")
    return EXIT_OK


def _load_detectors(paths):
    dets = {}
    for p in paths:
        d = _load_detector(p)
        if d.architecture_id in dets:
            raise InputError(f"two checkpoints for detector {d.architecture_id}")
        dets[d.architecture_id] = d
    return dets


def cmd_eval(args) -> int:
    if not 1 <= len(args.detectors) <= 2:
        raise InputError("eval takes one or two detector checkpoints")
    sizes = sorted(set(args.sizes))
    # gather every missing artifact before failing
    missing = [str(p) for p in args.detectors if not p.is_file()]
    dets = _load_detectors([p for p in args.detectors if p.is_file()])
    corpus = None
    if args.data.joinpath("manifest.csv").is_file():
        corpus, partition = _load_corpus(args.data)
    else:
        missing.append(str(args.data / "manifest.csv"))
    filters = {}
    for d in sorted(dets):
        for a in corpus.attack_ids if corpus is not None else ():
            for L in sizes:
                if args.identity_filters:
                    filters[(a, L, d)] = init_identity_filter(a, L)
                    continue
                path = args.filters / f"{filter_name(a, L, d)}.json"
                if not path.is_file():
                    missing.append(str(path))
                    continue
                try:
                    filters[(a, L, d)] = load_filter(path)
                except (ValueError, KeyError, json.JSONDecodeError) as e:
                    raise InputError(f"invalid filter file {path}: {e}") from None
    if missing:
        raise InputError(f"missing {len(missing)} input(s):\n  " + "\n  ".join(missing))
    bona, spoofs = corpus.select(partition.part2)
    meta = _metadata(args, detector_sha256={d: dets[d].fingerprint() for d in sorted(dets)}, corpus_seed=int(corpus.seed))
    report = cross_eval(dets, filters, bona, spoofs, sizes=sizes, metadata=meta)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.csv").write_text(report.to_csv())
    (args.out / "report.txt").write_text(report.to_table())
    _write_json(args.out / "report.meta.json", report.metadata)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    det = _load_detector(args.detector)
    corpus, partition = _load_corpus(args.data)
    attacks = [args.attack] if args.attack else list(corpus.attack_ids)
    for a in attacks:
        if a not in corpus.attack_ids:
            raise InputError(f"attack {args.attack!r} not in corpus")
    d = det.architecture_id
    filters = {}
    if args.filters is not None:
        missing = []
        for a in attacks:
            path = args.filters / f"{filter_name(a, args.size, d)}.json"
            if path.is_file():
                filters[a] = load_filter(path)
            else:
                missing.append(str(path))
        if missing:
            raise InputError("missing filter file(s):\n  " + "\n  ".join(missing))
    bona, spoofs = corpus.select(partition.part2)
    groups = [("bona_fide", "", None, bona)]
    for a in attacks:
        groups.append(("spoof", a, None, spoofs[a]))
        if a in filters:
            groups.append(("spoof_malafide", a, args.size, apply_filter(spoofs[a], filters[a])))

    out = args.out
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    rows = []
    for category, attack, size, images in groups:
        for label in LABELS:
            avg = average_heatmaps(gradcam_batch(det, images, label))
            name = f"heatmaps/{d}_{category}{'_' + attack if attack else ''}{f'_L{size}' if size else ''}_{label}.pgm"
            render_heatmap(avg, out / name, shape=corpus.image_shape[:2])
            rows.append((name, category, d, attack, "" if size is None else size, label))
    with open(out / f"gradcam_{d}_manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "category", "detector", "attack", "filter_size", "label"])
        w.writerows(rows)
    _write_json(out / f"gradcam_{d}.meta.json", _metadata(args, detector_sha256=det.fingerprint()))
    print(f"{len(rows)} averaged heatmaps -> {out / 'heatmaps'}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--config", type=Path, help="JSON file of option defaults; flags override it")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (1 = bitwise reproducible path)")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malafide", description="Desk-scale convolutional filter attack on toy deepfake detectors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("--n-bona", type=int, default=200)
    p.add_argument("--attacks", default=",".join(ATTACKS), help="comma-separated attack ids")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--ratio", type=float, default=0.7, help="Part 1 share per stratum")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="train and freeze a detector")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="corpus directory from gen-data")
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-filter", help="optimise one attack filter against a frozen detector")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detector", type=Path, required=True, help="detector checkpoint")
    p.add_argument("--attack", required=True)
    p.add_argument("--size", type=_odd_size, required=True, help=f"odd filter size, e.g. {', '.join(map(str, DEFAULT_SIZES))}")
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--eer-stop-threshold", type=float)
    p.set_defaults(func=cmd_train_filter)

    p = sub.add_parser("eval", help="white-box / black-box EER matrix on Part 2")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detectors", type=Path, nargs="+", required=True, help="one or two checkpoints")
    p.add_argument("--filters", type=Path, default=None, help="directory holding filter files (default: --out)")
    p.add_argument("--sizes", type=_odd_size, nargs="+", default=list(DEFAULT_SIZES))
    p.add_argument("--identity-filters", action="store_true", help="use identity filters instead of files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="averaged Grad-CAM heatmaps over Part 2")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detector", type=Path, required=True)
    p.add_argument("--filters", type=Path, default=None, help="directory with filters for the attacked category")
    p.add_argument("--size", type=_odd_size, default=27, help="filter size for the attacked category")
    p.add_argument("--attack", default=None, help="restrict to one attack")
    p.set_defaults(func=cmd_gradcam)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv``; values from ``--config`` become defaults that explicit flags override."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config is not None and command in subparsers:
        sub = subparsers[command]
        valid = {a.dest for a in sub._actions} - {"help", "config"}
        try:
            cfg = json.loads(known.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read config {known.config}: {e}") from None
        if not isinstance(cfg, dict):
            raise InputError(f"config {known.config} must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - valid)
        if unknown:
            raise InputError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
                value = cfg[action.dest]
                if action.type is not None and value is not None:
                    convert = action.type
                    try:
                        value = [convert(str(v)) for v in value] if isinstance(value, list) else convert(str(value))
                    except (argparse.ArgumentTypeError, ValueError) as e:
                        raise InputError(f"config key {action.dest}: {e}") from None
                if action.choices is not None and value not in action.choices:
                    raise InputError(f"config key {action.dest}: {value!r} not one of {list(action.choices)}")
                cfg[action.dest] = value
        sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        for key in PATH_KEYS:
            v = getattr(args, key, None)
            if isinstance(v, list):
                setattr(args, key, [Path(p).resolve() for p in v])
            elif v is not None:
                setattr(args, key, Path(v).resolve())
        if getattr(args, "filters", "unset") is None and args.command == "eval":
            args.filters = args.out
        if args.threads is not None and args.threads < 1:
            raise InputError("--threads must be >= 1")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except AttackDiverged as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
