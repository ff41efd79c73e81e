"""Command line entry point: generate-data, tile, train, evaluate, report.

Config keys double as flags for ``train``: ``--loss.lambda 0.5`` (or
``--set loss.lambda=0.5``) overrides the file value, and every override is
echoed in the run report.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import SynthParams, load_raster, synth_segmentation_set, tile_to_manifest
from .errors import ArgumentError, SegVoteError
from .experiment import evaluate_checkpoint, read_checkpoint, run_experiment
from .report import emit_report, load_reports

log = logging.getLogger("segvote")


def _dotted_overrides(extra):
    """Turn leftover ``--a.b value`` / ``--a.b=value`` tokens into ``a.b=value`` overrides."""
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ArgumentError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            out.append(key)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ArgumentError(f"flag {tok} needs a value")
            out.append(f"{key}={extra[i + 1]}")
            i += 2
    return out


def cmd_generate_data(args):
    params = SynthParams(**{f.name: getattr(args, f.name) for f in dataclasses.fields(SynthParams)})
    manifest = synth_segmentation_set(params, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train-labelled", "train-unlabelled", "val", "test")}
    print(f"wrote {Path(args.out) / 'manifest.json'}: {counts}")


def cmd_tile(args):
    if len(args.image) != len(args.label):
        raise ArgumentError("give one --label per --image")
    pairs = [load_raster(i, l) for i, l in zip(args.image, args.label)]
    manifest = tile_to_manifest(pairs, args.out, args.tile, args.stride, args.labelled_fraction,
                                args.seed, args.split, args.classes)
    print(f"wrote {len(manifest.records)} patches to {Path(args.out) / 'manifest.json'}")


def cmd_train(args, extra):
    overrides = list(args.set or []) + _dotted_overrides(extra)
    for flag, key in (("method", "method"), ("seed", "seed"), ("epochs", "schedule.epochs"),
                      ("output_dir", "output_dir")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = load_config(args.config, overrides)
    for o in cfg.overrides:
        log.info("override %s", o)
    report = run_experiment(cfg, resume=args.resume, stop_after=args.stop_after)
    print(emit_report(report.to_dict(), "table"), end="")
    print(f"report: {Path(cfg.output_dir) / 'report.json'}")


def cmd_evaluate(args):
    metrics = evaluate_checkpoint(args.checkpoint, args.manifest, args.split)
    run = {"method": read_checkpoint(args.checkpoint)["method"], "test": metrics.to_dict()}
    print(emit_report(run, args.format, args.out), end="")


def cmd_report(args):
    runs = load_reports(args.reports)
    print(emit_report(runs, args.format, args.out), end="")


def build_parser():
    ap = argparse.ArgumentParser(prog="segvote", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic segmentation dataset and its manifest")
    g.add_argument("--out", required=True)
    for f in dataclasses.fields(SynthParams):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=f.default)

    t = sub.add_parser("tile", help="tile .npy rasters into patches and write a manifest")
    t.add_argument("--image", action="append", required=True, help="[C, H, W] .npy raster (repeatable)")
    t.add_argument("--label", action="append", required=True, help="[H, W] .npy label map (repeatable)")
    t.add_argument("--out", required=True)
    t.add_argument("--tile", type=int, default=512)
    t.add_argument("--stride", type=int, default=None, help="defaults to the tile size")
    t.add_argument("--labelled-fraction", type=float, default=0.25)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split", default=None, help="tag every patch with this split instead of splitting")
    t.add_argument("--classes", type=int, default=None)

    r = sub.add_parser("train", help="train one configured method; extra --section.key value flags override the config")
    r.add_argument("config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--method")
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--resume", default=None, help="checkpoint written by the same configuration")
    r.add_argument("--stop-after", type=int, default=None, help="end the session after this many epochs")

    e = sub.add_parser("evaluate", help="score a checkpoint on one manifest split")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--split", default="test")
    e.add_argument("--format", choices=("table", "machine"), default="table")
    e.add_argument("--out", default=None)

    p = sub.add_parser("report", help="render machine reports (report.json) as a metric table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--format", choices=("table", "machine"), default="table")
    p.add_argument("--out", default=None)
    return ap


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            cmd_train(args, extra)
        else:
            if extra:
                ap.error(f"unrecognized arguments: {' '.join(extra)}")
            {"generate-data": cmd_generate_data, "tile": cmd_tile,
             "evaluate": cmd_evaluate, "report": cmd_report}[args.command](args)
    except SegVoteError as e:
        print(f"segvote: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
