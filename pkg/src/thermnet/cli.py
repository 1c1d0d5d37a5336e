"""Command-line entry point: ``thermnet <subcommand> [flags]``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from .errors import ThermnetError
from .model import (
    attach_spatial_transformer,
    build_study1_spec,
    build_study2_spec,
    init_parameters,
    load_model,
    save_model,
)
from .thermal import QuantizationRange, crop_and_quantize, read_dtif, thermal_dynamics

log = logging.getLogger("thermnet")

# desk-scale training defaults; the original regime (lr 0.001, batch 256,
# 350 epochs) is reachable through the flags
DEFAULT_LR = 0.01
DEFAULT_BATCH = 32
DEFAULT_EPOCHS = 30


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _condition(text):
    """TAG[:SCALE[:NOISE_SD]]"""
    parts = text.split(":")
    if not parts[0] or len(parts) > 3:
        raise argparse.ArgumentTypeError(f"expected TAG[:SCALE[:NOISE_SD]], got {text!r}")
    try:
        scale = float(parts[1]) if len(parts) > 1 else 1.0
        noise = float(parts[2]) if len(parts) > 2 else None
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number in condition {text!r}") from None
    return ds_mod.Condition(parts[0], scale, noise)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--crop", type=_positive_int, default=75, help="center crop side N (default 75)")
    quant.add_argument("--lo", type=int, default=0, help="lowest output pixel value (default 0)")
    quant.add_argument("--hi", type=int, default=255, help="highest output pixel value (default 255)")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--arch", choices=("study1", "study2"), default="study2",
                     help="network: study1 (no dropout) or study2 (dropout 0.3); default study2")
    net.add_argument("--st", choices=("on", "off"), default="off", help="prepend a spatial transformer")
    net.add_argument("--epochs", type=_positive_int, default=DEFAULT_EPOCHS)
    net.add_argument("--lr", type=float, default=DEFAULT_LR, help="learning rate")
    net.add_argument("--batch", type=_positive_int, default=DEFAULT_BATCH, help="minibatch size")
    net.add_argument("--momentum", type=float, default=0.9)
    net.add_argument("--side", type=_positive_int, default=60, help="network input side (default 60)")

    parser = _Parser(prog="thermnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic DTIF corpus")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--classes", type=_positive_int, default=len(ds_mod.DEFAULT_FAMILIES),
                   help=f"number of texture families (1-{len(ds_mod.DEFAULT_FAMILIES)})")
    p.add_argument("--frames-per-class", type=_positive_int, default=200)
    p.add_argument("--noise-sd", type=float, default=0.05, help="sensor noise SD in degC")
    p.add_argument("--condition", type=_condition, action="append", dest="conditions",
                   help="capture condition TAG[:SCALE[:NOISE_SD]]; repeat to alternate frames")

    p = sub.add_parser("quantize", parents=[common, quant], help="crop and quantize one DTIF frame")
    p.add_argument("--in", dest="input", required=True, type=Path, help="input .dtif frame")
    p.add_argument("--out", required=True, type=Path, help="output PGM image")

    p = sub.add_parser("stats", parents=[common, quant], help="thermal dynamics of a corpus")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("train", parents=[common, quant, net], help="train a model on a corpus")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output .dtim model")
    p.add_argument("--held-condition", action="append", default=[],
                   help="leave frames with this condition tag out of training")

    p = sub.add_parser("xval", parents=[common, quant, net], help="stratified k-fold cross-validation")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--k", type=int, default=5, help="fold count (>= 2)")
    p.add_argument("--report", type=Path, default=Path("xval_report.json"))
    p.add_argument("--confusion", type=Path, default=Path("confusion.csv"))
    p.add_argument("--jobs", type=_positive_int, default=1, help="folds trained in parallel")

    p = sub.add_parser("eval", parents=[common, quant], help="evaluate a model on a corpus")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--held-condition", action="append", default=[],
                   help="evaluate only frames with this condition tag")
    p.add_argument("--report", type=Path, help="write the JSON report here")
    p.add_argument("--confusion", type=Path, help="write the confusion CSV here")

    p = sub.add_parser("serve", parents=[common], help="run the classification server")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--bind", default="127.0.0.1:5757", help="host:port (default 127.0.0.1:5757)")
    p.add_argument("--threshold", type=float, default=0.5, help="gate on the top softmax score")

    p = sub.add_parser("classify", parents=[common, quant], help="stream a corpus to a server")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--log", type=Path, help="prediction log path (default stdout)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    p.add_argument("--instances", type=_positive_int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-6)
    return parser


def _qrange(args) -> QuantizationRange:
    try:
        return QuantizationRange(args.lo, args.hi)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _spec(args, classes):
    build = build_study1_spec if args.arch == "study1" else build_study2_spec
    spec = build(classes, input_side=args.side)
    return attach_spatial_transformer(spec) if args.st == "on" else spec


def _train_config(args):
    from .training import TrainConfig

    if not args.lr > 0 or not 0 <= args.momentum < 1:
        raise UsageError("need --lr > 0 and 0 <= --momentum < 1")
    return TrainConfig(args.lr, args.batch, args.epochs, args.momentum, args.seed)


def write_pgm(path: Path, pixels: np.ndarray, maxval: int) -> None:
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + pixels.astype(dtype).tobytes())


def cmd_synth(args):
    n = len(ds_mod.DEFAULT_FAMILIES)
    if args.classes > n:
        raise UsageError(f"--classes must be between 1 and {n}")
    conditions = tuple(args.conditions) if args.conditions else (ds_mod.Condition(),)
    cfg = ds_mod.SynthConfig(
        families=ds_mod.DEFAULT_FAMILIES[: args.classes],
        frames_per_class=args.frames_per_class,
        noise_sd=args.noise_sd,
        seed=args.seed,
        conditions=conditions,
    )
    manifest = ds_mod.generate_synthetic(cfg, args.out)
    print(f"wrote {args.classes * args.frames_per_class} frames; manifest {manifest}")


def cmd_quantize(args):
    if args.lo < 0 or args.hi > 65535:
        raise UsageError("PGM output needs 0 <= --lo and --hi <= 65535")
    frame = read_dtif(args.input)
    image = crop_and_quantize(frame, args.crop, _qrange(args))
    write_pgm(args.out, image.pixels, args.hi)
    if image.dynamics == 0:
        print("warning: dynamics=0 (flat frame); image is constant", file=sys.stderr)
    print(f"{args.out}: {image.n}x{image.n} dynamics={image.dynamics:.6g}")


def cmd_stats(args):
    data = ds_mod.load_corpus(args.corpus, args.crop, _qrange(args))
    rows = [("all", thermal_dynamics(data.samples))]
    for ci, name in enumerate(data.vocabulary):
        rows.append((name, thermal_dynamics([s for s, y in zip(data.samples, data.labels) if y == ci])))
    lines = ["class\tcount\tmin_degC\tmax_degC\tmean_degC\tsd_degC\n"]
    for name, st in rows:
        lines.append(f"{name}\t{st.count}\t{st.minimum:.6f}\t{st.maximum:.6f}\t{st.mean:.6f}\t{st.sd:.6f}\n")
    text = "".join(lines)
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_train(args):
    from .training import train

    config = _train_config(args)
    data = ds_mod.load_corpus(args.corpus, args.crop, _qrange(args))
    if args.held_condition:
        data, _ = ds_mod.split_by_condition(data, args.held_condition)
    spec = _spec(args, len(data.vocabulary))
    model = init_parameters(spec, args.seed, data.vocabulary)
    model, losses = train(model, data, config)
    save_model(model, args.out)
    print(f"trained {len(data)} samples for {config.epochs} epochs; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; model {args.out}")


def cmd_xval(args):
    from .training import cross_validate

    if args.k < 2:
        raise UsageError("--k must be >= 2")
    config = _train_config(args)
    data = ds_mod.load_corpus(args.corpus, args.crop, _qrange(args))
    spec = _spec(args, len(data.vocabulary))
    report = cross_validate(spec, data, args.k, config, seed=args.seed, jobs=args.jobs)
    args.report.write_text(report.to_json(), encoding="utf-8")
    args.confusion.write_text(report.confusion_csv(), encoding="utf-8")
    print(f"{args.k}-fold: mean class accuracy {report.mean_class_accuracy:.4f}, "
          f"fold accuracy {report.fold_mean:.4f} (SD {report.fold_sd:.4f}); report {args.report}")


def cmd_eval(args):
    from .training import cross_condition_eval, evaluate

    model = load_model(args.model)
    data = ds_mod.load_corpus(args.corpus, args.crop, _qrange(args))
    if tuple(data.vocabulary) != tuple(model.class_labels):
        raise ThermnetError("corpus classes do not match the model's labels")
    if args.held_condition:
        _, held = ds_mod.split_by_condition(data, args.held_condition)
        report = cross_condition_eval(model, held)
    else:
        report = evaluate(model, data)
    if args.report:
        args.report.write_text(report.to_json(), encoding="utf-8")
    if args.confusion:
        args.confusion.write_text(report.confusion_csv(), encoding="utf-8")
    print(f"samples {report.total}: mean class accuracy {report.mean_class_accuracy:.4f}, "
          f"overall {report.overall_accuracy:.4f}")
    if report.unseen_conditions:
        print(f"conditions unseen in training: {', '.join(report.unseen_conditions)}")


def cmd_serve(args):
    from .netserve import serve

    if not 0 <= args.threshold <= 1:
        raise UsageError("--threshold must lie in [0, 1]")
    serve(args.model, args.bind, args.threshold)


def cmd_classify(args):
    from .netserve import client_stream

    records = client_stream(args.corpus, args.server, args.crop, _qrange(args), log_path=args.log)
    if args.log is None:
        sys.stdout.write("".join(r.log_line() for r in records))


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    results = run_suite(args.instances, args.seed, args.tolerance)
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise ThermnetError("gradient check failed")


COMMANDS = {
    "synth": cmd_synth,
    "quantize": cmd_quantize,
    "stats": cmd_stats,
    "train": cmd_train,
    "xval": cmd_xval,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "classify": cmd_classify,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"thermnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ThermnetError, OSError, ValueError) as exc:
        print(f"thermnet {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
