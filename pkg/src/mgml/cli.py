"""``mgml`` command-line entry point.

Every subcommand writes its outputs plus one ``manifest.json`` into
``--out``. Exit codes: 0 success, 1 validation or usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import arrays
from .data import (
    AnnotationParseError,
    AnnotationValidationError,
    ClassSplit,
    InsufficientShotsError,
    get_split,
    load_annotations,
    patch_sidecar_path,
    save_annotations,
)
from .evaluation import evaluate, write_detections
from .inference import SplitMismatchError, detect
from .synthworld import PlacementError, WorldError, WorldSpec, build_world, generate_dataset
from .training import (
    ABLATION_COLUMNS,
    COMPONENT_GRID,
    Checkpoint,
    ConfigError,
    TrainConfig,
    adapt_few_shot,
    alpha_grid,
    lambda_grid,
    run_ablation,
    train_base,
)

logger = logging.getLogger("mgml")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (
    ConfigError,
    AnnotationParseError,
    AnnotationValidationError,
    InsufficientShotsError,
    SplitMismatchError,
    WorldError,
    arrays.ArrayFileError,
    FileNotFoundError,
    KeyError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- manifests -----------------------------------------------------------


def content_hash(paths) -> str:
    """Git-style blob hashes of the inputs, folded into one digest."""
    outer = hashlib.sha1()
    for p in sorted(str(x) for x in paths):
        data = Path(p).read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        outer.update(f"{blob}  {Path(p).name}\n".encode())
    return outer.hexdigest()


def write_manifest(out: Path, command: str, config, seed: int, artifacts, inputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": [str(p) for p in artifacts],
        "duration_s": round(time.perf_counter() - started, 3),
        "input_hash": content_hash(inputs),
        "inputs": [str(p) for p in inputs],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- shared helpers ------------------------------------------------------


def _resolve_split(arg: str | None, data_path: Path) -> ClassSplit:
    if arg:
        return get_split(arg)
    guess = data_path.parent / "split.json"
    if guess.exists():
        return get_split(str(guess))
    raise UsageError(f"--split is required (no split.json next to {data_path})")


def _data_inputs(path: Path) -> list[Path]:
    side = patch_sidecar_path(path)
    return [path, side] if side.exists() else [path]


def _train_config(args, stage: str) -> TrainConfig:
    overrides = {
        "rng_seed": args.seed,
        "epochs": args.epochs,
        "K": args.shots,
        "alpha": args.alpha,
        "lambda0": args.lambda0,
        "enable_se": args.enable_se,
        "enable_oc": args.enable_oc,
        "enable_metric": args.enable_metric,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    # the subcommand decides the stage; a config file supplies everything else
    if args.config:
        return TrainConfig.from_file(args.config, stage=stage, **overrides)
    return TrainConfig(stage=stage, **overrides)


def _write_loss_csv(path: Path, log) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(log, start=1):
            w.writerow([i, f"{v:.10f}"])


# --- commands ------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.perf_counter()
    if not 0.0 <= args.confusability < 1.0:
        raise UsageError(f"--confusability must lie in [0, 1), got {args.confusability}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = WorldSpec(
        num_base=args.num_base,
        num_novel=args.num_novel,
        patch_dim=args.patch_dim,
        confusability=args.confusability,
        noise_sigma=args.noise,
        rng_seed=args.seed,
    )
    world = build_world(spec)
    data = generate_dataset(world, world.split, args.scenes_per_class, args.shots, rng_seed=args.seed)
    artifacts = save_annotations(data.train, out / "train.jsonl") + save_annotations(data.val, out / "val.jsonl")
    split_path = out / "split.json"
    split_path.write_text(json.dumps(world.split.to_dict(), indent=2) + "\n", encoding="utf-8")
    artifacts.append(split_path)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    cfg.update(scenes_per_class=args.scenes_per_class, shots=args.shots)
    cfg["pairing"] = {world.split.classes[n]: world.split.classes[b] for n, b in world.pairing.items()}
    write_manifest(out, "synth", cfg, args.seed, artifacts, [], started)
    print(f"wrote {len(data.train.scenes)} train and {len(data.val.scenes)} val scenes to {out}")
    return EXIT_OK


def _train_command(args, stage: str) -> int:
    started = time.perf_counter()
    if stage == "adaptation" and not args.base_ckpt:
        raise UsageError("adapt requires --base-ckpt")
    data_path = Path(args.data)
    split = _resolve_split(args.split, data_path)
    cfg = _train_config(args, stage)
    dataset = load_annotations(data_path, split)
    inputs = _data_inputs(data_path)
    if stage == "base":
        ckpt = train_base(dataset, split, cfg)
    else:
        base = Checkpoint.load(args.base_ckpt)
        inputs.append(Path(args.base_ckpt))
        ckpt = adapt_few_shot(base, dataset, split, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, loss_path = out / "checkpoint.mgck", out / "loss.csv"
    ckpt.save(ckpt_path)
    _write_loss_csv(loss_path, ckpt.loss_log)
    write_manifest(out, args.command, asdict(cfg), cfg.rng_seed, [ckpt_path, loss_path], inputs, started)
    print(f"{stage} training: {cfg.epochs} epochs, final loss {ckpt.loss_log[-1]:.6f}; checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_base_train(args) -> int:
    return _train_command(args, "base")


def cmd_adapt(args) -> int:
    return _train_command(args, "adaptation")


def cmd_eval(args) -> int:
    started = time.perf_counter()
    data_path = Path(args.data)
    ckpt = Checkpoint.load(args.ckpt)
    split = get_split(args.split) if args.split else ckpt.split
    if split != ckpt.split:
        raise SplitMismatchError(f"checkpoint was trained on split {ckpt.split.name}, not {split.name}")
    dataset = load_annotations(data_path, split)
    dets = detect(ckpt, dataset, seed=args.seed)
    report = evaluate(dets, dataset, split, interp=args.interp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det_path = out / "detections.jsonl"
    write_detections(dets, split, det_path)
    artifacts = [det_path] + report.write(out)
    write_manifest(
        out, "eval", {"interp": args.interp, "split": split.name}, args.seed, artifacts,
        _data_inputs(data_path) + [Path(args.ckpt)], started,
    )
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(
        f"mAP_all={fmt(report.mAP_all)} mAP_base={fmt(report.mAP_base)} "
        f"mAP_novel={fmt(report.mAP_novel)} mean_confusion={fmt(report.mean_confusion)}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_report

    started = time.perf_counter()
    ok, table = gradcheck_report(range(args.seed, args.seed + args.seeds))
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table_path = out / "gradcheck.txt"
        table_path.write_text(table + "\n", encoding="utf-8")
        write_manifest(out, "gradcheck", {"seeds": args.seeds}, args.seed, [table_path], [], started)
    return EXIT_OK if ok else EXIT_RUNTIME


GRIDS = {"components": lambda: COMPONENT_GRID, "lambda": lambda_grid, "alpha": alpha_grid}


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    train_path, val_path = Path(args.train), Path(args.val)
    split = _resolve_split(args.split, train_path)
    train = load_annotations(train_path, split)
    val = load_annotations(val_path, split)
    cfg = _train_config(args, "base")
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = run_ablation(train, val, GRIDS[args.grid](), cfg, seeds, adapt_epochs=args.adapt_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.csv"
    with table.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_COLUMNS})
    write_manifest(
        out, "ablate", {"grid": args.grid, "train_config": asdict(cfg), "adapt_epochs": args.adapt_epochs},
        args.seed, [table], _data_inputs(train_path) + _data_inputs(val_path), started,
    )
    for r in rows:
        if r["seed"] == "mean":
            print(f"{r['cell']:<20} mAP_base={r['mAP_base']:.4f} mAP_novel={r['mAP_novel']:.4f}")
    return EXIT_OK


# --- parser --------------------------------------------------------------


def _add_train_flags(p, base_ckpt: bool = False) -> None:
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--split", help="builtin split name or split JSON path (default: split.json beside the data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--shots", type=int, help="K, shots per class")
    p.add_argument("--alpha", type=float, help="orthogonality weight")
    p.add_argument("--lambda0", type=float, help="initial excite scale")
    for name in ("se", "oc", "metric"):
        p.add_argument(f"--enable-{name}", action=argparse.BooleanOptionalAction, default=None)
    if base_ckpt:
        p.add_argument("--base-ckpt", help="checkpoint from base-train")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgml", description="Few-shot detection head: synthesis, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic train/val world")
    p.add_argument("--out", required=True)
    p.add_argument("--num-base", type=int, default=6)
    p.add_argument("--num-novel", type=int, default=3)
    p.add_argument("--patch-dim", type=int, default=8)
    p.add_argument("--confusability", type=float, default=0.7)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--scenes-per-class", type=int, default=40)
    p.add_argument("--shots", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    for name, func, stage_ckpt in (("base-train", cmd_base_train, False), ("adapt", cmd_adapt, True)):
        p = sub.add_parser(name, parents=[common], help=f"{name} stage")
        p.add_argument("--data", required=True, help="training annotations (JSON lines)")
        p.add_argument("--out", required=True)
        _add_train_flags(p, base_ckpt=stage_ckpt)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="detect and score a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--interp", choices=("allpoint", "11point"), default="allpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss term")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", choices=sorted(GRIDS), default="components")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds from --seed")
    p.add_argument("--adapt-epochs", type=int)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mgml {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VALIDATION_ERRORS as exc:
        print(f"mgml {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PlacementError, OSError, RuntimeError, ValueError) as exc:
        print(f"mgml {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
