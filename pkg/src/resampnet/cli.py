"""``resampnet`` command-line entry point.

Every subcommand reads JSON configuration files plus flag overrides, writes
its artifacts and a ``run.json`` echo of the resolved configuration to the
output directory, logs progress to stderr and leaves stdout empty.

Exit codes: 0 success, 1 internal failure (including failed verification or
gradient checks), 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import CheckpointError, ConfigError, ContractError, GenerationError, ImageFormatError, ResampNetError

log = logging.getLogger("resampnet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input from the user; mapped to exit code 2."""


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"{path}: cannot read: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}:1:1: expected a JSON object")
    return doc


def write_run_json(out_dir: Path, subcommand: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"subcommand": subcommand, "version": __version__, **resolved}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ gen

def cmd_gen(args) -> int:
    from .dataset import DatasetRecipe, generate, generate_synthetic_sources, verify

    raw = read_json(args.recipe)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.count is not None:
        raw["countPerClass"] = args.count
    recipe = DatasetRecipe.from_dict({k: v for k, v in raw.items() if k not in ("sourceDir", "sourceKind")})
    src = Path(args.src)
    if args.synthesize:
        log.info("writing %d synthetic sources to %s", args.synthesize, src)
        generate_synthetic_sources(src, args.synthesize, args.synthetic_size, recipe.seed)
    if not src.is_dir():
        raise UsageError(f"sources not found: {src}")
    out = Path(args.out)
    manifest = generate(recipe, src, out)
    log.info("wrote %d entries to %s", len(manifest.entries), out)
    report = verify(manifest, src)
    (out / "verify.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    write_run_json(out, "gen", {"recipe": recipe.to_dict(), "sourceDir": str(src.resolve()), "outDir": str(out)})
    if not report.passed:
        log.error("verification failed: %s", report.to_dict())
        return EXIT_FAILURE
    log.info("verification passed")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _net_config(args, manifest) -> "NetworkConfig":
    from .network import NetworkConfig

    raw = read_json(args.net_config) if args.net_config else {}
    raw.setdefault("input_size", int(manifest.recipe.get("patchSize", 256)))
    raw.setdefault("num_classes", len(manifest.class_names))
    for flag, key in (("streams", "streams"), ("activation", "activation"), ("noise_layer", "noise_layer"),
                      ("width_divisor", "width_divisor")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    return NetworkConfig.from_dict(raw)


def cmd_train(args) -> int:
    from .dataset import DatasetManifest
    from .network import build_network
    from .trainer import TrainConfig, train

    manifest = _load_manifest(args.manifest)
    net_cfg = _net_config(args, manifest)
    raw = read_json(args.train_config) if args.train_config else {}
    for flag, key in (("epochs", "maxEpochs"), ("seed", "seed"), ("lr", "initialLR"), ("batch_size", "batchSize")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    train_cfg = TrainConfig.from_dict(raw)
    out = Path(args.out)
    write_run_json(out, "train", {"manifest": str(args.manifest), "network": net_cfg.to_dict(),
                                  "train": train_cfg.to_dict(), "outDir": str(out)})
    net = build_network(net_cfg, seed=train_cfg.seed)
    log.info("network with %d parameters", net.parameter_count())
    state = train(net, manifest, train_cfg, out)
    log.info("finished after %d epochs, best val loss %.4f", state.epoch, state.best_val_loss)
    return EXIT_OK


def _load_manifest(path):
    from .dataset import DatasetManifest

    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    read_json(path)  # uniform diagnostics for unreadable or malformed files
    try:
        return DatasetManifest.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: malformed manifest: {exc}") from None


# ----------------------------------------------------------------- eval

def _evaluate(args, subcommand: str) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import evaluate

    net = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    if subcommand == "estimate" and manifest.recipe.get("family") != "multiClass":
        raise UsageError("estimate needs a multiClass manifest; use eval for binary detection")
    if len(manifest.class_names) != net.config.num_classes:
        raise UsageError(
            f"checkpoint has {net.config.num_classes} classes, manifest has {len(manifest.class_names)}"
        )
    report = evaluate(net, manifest, args.split)
    out = Path(args.out)
    write_run_json(out, subcommand, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                                     "split": args.split, "outDir": str(out)})
    (out / "report.json").write_text(report.to_json())
    (out / "confusion.txt").write_text(report.table())
    log.info("%s accuracy %.4f on %d samples", args.split, report.accuracy, report.total)
    return EXIT_OK


def cmd_eval(args) -> int:
    return _evaluate(args, "eval")


def cmd_estimate(args) -> int:
    return _evaluate(args, "estimate")


# -------------------------------------------------------------- heatmap

def cmd_heatmap(args) -> int:
    from .checkpoint import load_checkpoint
    from .imageio import read_image, write_pnm
    from .trainer import heatmap, heatmap_image

    net = load_checkpoint(args.checkpoint)
    try:
        img = read_image(args.image)
    except OSError as exc:
        raise UsageError(f"{args.image}: cannot read: {exc.strerror}") from None
    prob = heatmap(net, img, args.patch, args.stride, args.channel)
    out = Path(args.out)
    write_run_json(out, "heatmap", {"checkpoint": str(args.checkpoint), "image": str(args.image),
                                    "patch": args.patch or net.config.input_size,
                                    "stride": args.stride, "channel": args.channel, "outDir": str(out)})
    write_pnm(out / "heatmap.pgm", heatmap_image(prob))
    (out / "heatmap.json").write_text(json.dumps({"mean": float(prob.mean()), "min": float(prob.min()),
                                                  "max": float(prob.max())}, indent=1) + "\n")
    log.info("heatmap mean %.4f written to %s", prob.mean(), out / "heatmap.pgm")
    return EXIT_OK


# ------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    from .gradcheck import check_layers, check_network

    reports = {f"layer:{k}": v for k, v in check_layers(args.seed).items()}
    reports["network"] = check_network(seed=args.seed)
    doc = {k: r.to_dict() for k, r in reports.items()}
    ok = all(r.passed for r in reports.values())
    for name, r in reports.items():
        log.info("%-28s worst %.3e %s", name, r.worst, "ok" if r.passed else "FAILED")
    if args.out:
        out = Path(args.out)
        write_run_json(out, "gradcheck", {"seed": args.seed, "outDir": str(out)})
        (out / "gradcheck.json").write_text(json.dumps(doc, indent=1) + "\n")
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resampnet", description="Resampling detection in recompressed images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more progress output on stderr")
    p.add_argument("-q", "--quiet", action="store_true", help="only errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset and manifest from a recipe")
    g.add_argument("--recipe", required=True, help="recipe JSON file")
    g.add_argument("--src", required=True, help="directory of source images (PGM/PPM/PNG)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override the recipe seed")
    g.add_argument("--count", type=int, help="override countPerClass")
    g.add_argument("--synthesize", type=int, metavar="N", help="first write N synthetic sources into --src")
    g.add_argument("--synthetic-size", type=int, default=256, help="side length of synthetic sources")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network on a manifest")
    t.add_argument("--manifest", required=True, help="manifest.json or its dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints and history")
    t.add_argument("--net-config", help="network config JSON")
    t.add_argument("--train-config", help="training config JSON")
    t.add_argument("--streams", choices=("dual-interleaved", "dual-no-interleave", "horizontal-only", "vertical-only"))
    t.add_argument("--activation", choices=("tanh", "relu"))
    t.add_argument("--noise-layer", choices=("low", "high", "none"))
    t.add_argument("--width-divisor", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint on a manifest split"),
                             ("estimate", cmd_estimate, "resampling-factor estimation on a multiClass manifest")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--out", required=True)
        e.set_defaults(func=func)

    h = sub.add_parser("heatmap", help="patch-wise resampling probability map of an image")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--image", required=True)
    h.add_argument("--patch", type=int, help="patch size, defaults to the network input size")
    h.add_argument("--stride", type=int, help="patch stride, defaults to half the patch")
    h.add_argument("--channel", default="green", choices=("green", "gray"))
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer and a reduced network")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR if args.quiet else logging.DEBUG if args.verbose > 1 else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("resampnet")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (ConfigError, ContractError, ImageFormatError, CheckpointError, GenerationError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except ResampNetError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    except Exception as exc:  # last-resort handler: report, do not dump a traceback on users
        log.error("internal error: %s: %s", type(exc).__name__, exc, exc_info=args.verbose > 0)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
