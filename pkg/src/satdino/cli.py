"""Command-line entry point: ``satdino <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from satdino.exceptions import SatDinoError

logger = logging.getLogger("satdino")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satdino", description="Multi-GSD self-distillation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic multi-GSD dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--per-class", type=int, default=32)
    s.add_argument("--gsd-range", type=_floats, default=(0.307, 1.705))
    s.add_argument("--series-size", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("split", help="assign stratified train/val splits")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--fractions", type=_floats, default=(0.8, 0.2))
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("pretrain", help="run self-distillation pretraining")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    s.add_argument("--epochs", type=int, help="stop after this many more epochs")
    s.add_argument("--force", action="store_true", help="resume despite a config mismatch")

    ev = sub.add_parser("eval", help="evaluate a checkpoint's teacher")
    ev_sub = ev.add_subparsers(dest="protocol", required=True)
    for name in ("knn", "probe", "finetune"):
        e = ev_sub.add_parser(name)
        e.add_argument("--checkpoint", required=True, type=Path)
        e.add_argument("--data", required=True, type=Path)
        e.add_argument("--out", type=Path, help="report directory (default: <run>/reports)")
        e.add_argument("--force", action="store_true")
        if name == "knn":
            e.add_argument("--k", type=int, default=20)
            e.add_argument("--scales", type=_floats, default=(1.0,))
            e.add_argument("--save-features", type=Path, metavar="DIR")
        else:
            e.add_argument("--epochs", type=int, default=25)
            e.add_argument("--lr", type=float, default=1e-3 if name == "probe" else 1e-5)
            e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="pretrain and evaluate every cell of a grid")
    s.add_argument("--grid", required=True, help="grid file or shipped grid name")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--k", type=int, default=20)

    vz = sub.add_parser("viz", help="export attention or PCA images")
    vz_sub = vz.add_subparsers(dest="kind", required=True)
    for name in ("attention", "pca"):
        v = vz_sub.add_parser(name)
        v.add_argument("--checkpoint", required=True, type=Path)
        v.add_argument("--image", required=True, type=Path)
        v.add_argument("--out", required=True, type=Path)
        v.add_argument("--force", action="store_true")
    return p


def _run_root(checkpoint: Path) -> Path:
    if checkpoint.is_dir():
        return checkpoint
    return checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint.parent


def _load_config(path, items):
    from satdino.config import RunConfig, parse_overrides

    overrides = parse_overrides(items)
    if path is not None:
        return RunConfig.from_file(path, overrides)
    return RunConfig().update(overrides).validate()


def cmd_synth(args) -> int:
    from satdino.data import SynthSpec, generate_synthetic

    spec = SynthSpec(n_classes=args.classes, image_size=args.size, gsd_range=args.gsd_range,
                     samples_per_class=args.per_class, seed=args.seed,
                     series_size=args.series_size)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest)} images to {args.out}")
    return 0


def cmd_split(args) -> int:
    from satdino.data import load_dataset, split_dataset

    manifest = split_dataset(load_dataset(args.data), args.fractions, args.seed)
    counts = manifest.split_counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_pretrain(args) -> int:
    from satdino.checkpoint import load_checkpoint
    from satdino.data import load_dataset
    from satdino.train import RunDirectory, pretrain

    config = _load_config(args.config, args.set)
    manifest = load_dataset(args.data)
    samples = manifest.load_samples("train") or manifest.load_samples()
    state = None
    run = RunDirectory(args.out)
    if args.resume:
        state = load_checkpoint(run.checkpoint_path, config, force=args.force)
    state = pretrain(config, samples, run.root, state=state, epochs=args.epochs)
    last = state.history[-1] if state.history else {}
    print(f"epoch {state.epoch} step {state.step} l_dino {last.get('l_dino', float('nan')):.4f}")
    return 0


def _splits(manifest):
    train = manifest.load_samples("train")
    val = manifest.load_samples("val") or manifest.load_samples("test")
    if not train or not val:
        raise SatDinoError("evaluation needs a train split and a val (or test) split")
    return train, val


def cmd_eval(args) -> int:
    from satdino import evaluation as ev
    from satdino.checkpoint import load_checkpoint
    from satdino.data import load_dataset

    state = load_checkpoint(args.checkpoint, force=args.force)
    manifest = load_dataset(args.data)
    train, val = _splits(manifest)
    backbone = state.teacher.backbone
    size = state.config.views.global_out
    xt, yt = [s.image for s in train], [s.label for s in train]
    xv, yv = [s.image for s in val], [s.label for s in val]
    provenance = {"checkpoint": str(args.checkpoint), "data": str(args.data),
                  "config_digest": state.config.digest()}
    if args.protocol == "knn":
        report = ev.multiscale_eval(backbone, xt, yt, xv, yv, args.scales, args.k, size,
                                    state.norm, provenance=provenance)
        if args.save_features:
            ev.save_features(ev.extract_features(backbone, xt, yt, size, 1.0, state.norm),
                             args.save_features / "train.sdfm")
            ev.save_features(ev.extract_features(backbone, xv, yv, size, 1.0, state.norm),
                             args.save_features / "val.sdfm")
    elif args.protocol == "probe":
        report = ev.linear_probe(backbone, xt, yt, xv, yv, args.epochs, args.lr, size,
                                 state.norm, seed=args.seed, provenance=provenance)
    else:
        report = ev.fine_tune(ev.copy_backbone(backbone), xt, yt, xv, yv, args.epochs, args.lr,
                              size, state.norm, seed=args.seed, provenance=provenance)
    out = args.out or _run_root(args.checkpoint) / "reports"
    report.save(out, stem=report.protocol)
    sys.stdout.write(report.to_text())
    return 0


def cmd_sweep(args) -> int:
    from satdino.config import RunConfig, parse_overrides
    from satdino.sweep import read_grid, run_sweep

    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    path = run_sweep(read_grid(args.grid), args.data, args.out, base,
                     parse_overrides(args.set), args.k)
    print(f"summary: {path}")
    return 0


def cmd_viz(args) -> int:
    from satdino import viz
    from satdino.checkpoint import load_checkpoint
    from satdino.data import load_image

    state = load_checkpoint(args.checkpoint, force=args.force)
    image = load_image(args.image)
    backbone = state.teacher.backbone
    size = state.config.views.global_out
    make = viz.attention_image if args.kind == "attention" else viz.pca_image
    overlay = make(backbone, image, size, state.norm)
    viz.write_png(args.out, viz.side_by_side(image, overlay))
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "pretrain": cmd_pretrain,
            "eval": cmd_eval, "sweep": cmd_sweep, "viz": cmd_viz}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SatDinoError, OSError, ValueError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"satdino: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
