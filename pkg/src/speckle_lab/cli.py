"""``speckle-lab`` command line.

Exit codes: 0 success, 2 invalid input or configuration, 3 file I/O
failure, 4 numerical failure.  Every command writes ``run.json`` into its
output directory with the resolved configuration and seed.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, formats
from .contour import COLORMAPS, render_contour
from .deform import (DeformationSweep, SpeckleSweep, load_manifest, load_pair,
                     make_dataset, make_sequence)
from .dic import DicConfig, DicPredictor, run_dic
from .fields import DisplacementField, Roi
from .models import CnnPredictor, ModelCheckpoint, ModelConfig, build_model
from .pipeline import (TrainConfig, TruthEcho, benchmark, dataset_mae, evaluate, fine_tune,
                       format_benchmark, infer_sequence, load_pair_data, split_dataset, train)
from .speckle import SpeckleParams, render_reference

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = {"speckle", "speckle_sweep", "deformation_sweep", "dic", "model", "train"}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = formats.read_json(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INVALID, f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise CliError(EXIT_INVALID, f"config {path}: top level must be an object")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise CliError(EXIT_INVALID, f"config {path}: unknown section(s) {', '.join(sorted(unknown))}")
    return cfg


def write_run(out: Path, args, resolved: dict):
    record = {"command": args.command, "version": __version__, "seed": args.seed,
              "threads": args.threads, "deterministic": args.deterministic,
              "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
              "resolved": resolved}
    formats.write_json(out / "run.json", json.loads(json.dumps(record, default=str)))


def _merge(base: dict, section: dict | None, overrides: dict) -> dict:
    out = dict(base)
    out.update(section or {})
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _speckle(args, cfg) -> SpeckleParams:
    return SpeckleParams.from_dict(_merge(SpeckleParams().to_dict(), cfg.get("speckle"), {
        "disk_density": args.density, "radius_min": args.radius_min,
        "radius_max": args.radius_max, "blur_sigma": args.blur, "seed": args.seed}))


def _train_cfg(args, cfg, head) -> TrainConfig:
    return TrainConfig.from_dict(_merge({"head": head}, cfg.get("train"), {
        "epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
        "seed": args.seed, "lr_drop_epoch": getattr(args, "lr_drop_epoch", None),
        "warmup_epochs": getattr(args, "warmup_epochs", None)}))


def _predictor(args, cfg, kind="displacement"):
    if getattr(args, "checkpoint", None):
        return CnnPredictor(ModelCheckpoint.load(args.checkpoint).to_model())
    return DicPredictor(DicConfig.from_dict(cfg.get("dic", {})), kind)


def _frames(pattern) -> list:
    paths = sorted(glob.glob(os.path.join(pattern, "*.pgm"))) if os.path.isdir(pattern) else \
        sorted(glob.glob(pattern))
    if not paths:
        raise CliError(EXIT_IO, f"no PGM frames match {pattern}")
    return [formats.read_pgm(p) for p in paths]


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg, out):
    p = _speckle(args, cfg)
    img = render_reference(p, args.height or args.size, args.width or args.size)
    formats.write_pgm(out / "speckle.pgm", img)
    return {"speckle": p.to_dict(), "height": img.height, "width": img.width}


def cmd_dataset(args, cfg, out):
    ss = SpeckleSweep.from_dict(cfg.get("speckle_sweep", {}))
    dsw = cfg.get("deformation_sweep", {})
    over = {}
    if args.kinds:
        over["kinds"] = args.kinds
    if args.amplitude is not None:
        over["amplitude_max"] = args.amplitude
    ds = DeformationSweep.from_dict({**dsw, **over})
    make_dataset(args.n, ss, ds, out, size=args.size, seed=args.seed)
    return {"speckle_sweep": ss.to_dict(), "deformation_sweep": ds.to_dict(), "n": args.n,
            "size": args.size}


def cmd_dic(args, cfg, out):
    dcfg = DicConfig.from_dict(_merge(DicConfig().to_dict(), cfg.get("dic"), {
        "subset_size": args.subset, "step": args.step, "search_radius": args.search}))
    res = run_dic(formats.read_pgm(args.ref), formats.read_pgm(args.deformed), dcfg)
    formats.write_json(out / "dic.json", res.to_dict())
    if res.displacement is not None:
        formats.write_field(out / "displacement.f32", res.displacement)
        formats.write_field(out / "strain.f32", res.strain)
    return {"dic": dcfg.to_dict()}


def _write_training(out, ckpt, log, args):
    ckpt.save(out / "checkpoint.ckpt")
    formats.write_json(out / "runlog.json", log.to_dict(timing=not args.deterministic))
    (out / "curves.csv").write_text(log.to_csv())
    if args.deterministic:
        formats.write_json(out / "timing.json", {"wall_time": [r.wall_time for r in log.records]})


def _splits(args, kind, tcfg):
    data = load_pair_data(args.data, kind)
    tr, va, te = split_dataset(len(data), tcfg.split, tcfg.seed)
    return data.subset(tr), data.subset(va), data.subset(te)


def _progress(args):
    if args.quiet:
        return None
    return lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.5f} val {r.val_mae:.5f} "
                           f"lr {r.lr:.3g}", file=sys.stderr)


def cmd_train(args, cfg, out):
    mcfg = ModelConfig.from_dict(_merge(ModelConfig().to_dict(), cfg.get("model"), {
        "head": args.head, "width_scale": args.width_scale, "seed": args.seed}))
    tcfg = _train_cfg(args, cfg, mcfg.head)
    tr, va, te = _splits(args, mcfg.head, tcfg)
    ckpt, log = train(build_model(mcfg), tr, va, tcfg, log=_progress(args))
    if len(te):
        log.test_mae = dataset_mae(ckpt.to_model(), te)
    _write_training(out, ckpt, log, args)
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict()}


def cmd_finetune(args, cfg, out):
    src = ModelCheckpoint.load(args.checkpoint)
    tcfg = _train_cfg(args, cfg, src.config.head)
    tr, va, te = _splits(args, src.config.head, tcfg)
    ckpt, log = fine_tune(src, tr, va, tcfg, lr_multiplier=args.lr_multiplier,
                          log=_progress(args))
    _write_training(out, ckpt, log, args)
    return {"source": str(args.checkpoint), "train": tcfg.to_dict(),
            "lr_multiplier": args.lr_multiplier}


def _samples(manifest_path):
    manifest, root = load_manifest(manifest_path)
    return [load_pair(root, e) for e in manifest["samples"]]


def cmd_eval(args, cfg, out):
    samples = _samples(args.data)
    if args.echo:
        pred = TruthEcho(samples, args.kind)
    else:
        pred = _predictor(args, cfg, args.kind)
    oracle = DicPredictor(DicConfig.from_dict(cfg.get("dic", {})), pred.kind) \
        if args.with_oracle else None
    report = evaluate(pred, samples, oracle)
    if args.deterministic:
        for part in ("model", "oracle"):
            if part in report:
                formats.write_json(out / f"timing_{part}.json",
                                   {"seconds_per_frame": report[part].pop("seconds_per_frame")})
    formats.write_json(out / "metrics.json", report)
    print(f"{report['model']['kind']} MAE {report['model']['mae']:.6g}")
    return {"kind": pred.kind}


def cmd_infer(args, cfg, out):
    frames = _frames(args.frames)
    roi = Roi.from_box(*args.roi) if args.roi else Roi.from_box(0, 0, frames[0].width,
                                                                frames[0].height)
    strain_model = None
    if args.strain_checkpoint:
        strain_model = CnnPredictor(ModelCheckpoint.load(args.strain_checkpoint).to_model())
    res = infer_sequence(_predictor(args, cfg), frames, roi, strain_model)
    for k, d in enumerate(res.displacements, start=1):
        formats.write_field(out / f"frame_{k:05d}_disp.f32", d)
    for k, s in enumerate(res.strains, start=1):
        formats.write_field(out / f"frame_{k:05d}_strain.f32", s)
    formats.write_json(out / "rois.json", [r.corners.tolist() for r in res.rois])
    return {"frames": len(frames), "roi": roi.corners.tolist()}


def cmd_render(args, cfg, out):
    fld = formats.read_field(args.field)
    names = fld.channel_names
    channel = args.channel or names[0]
    if channel not in names:
        raise CliError(EXIT_INVALID, f"field has channels {names}, not {channel!r}")
    render_contour(getattr(fld, channel), args.colormap, out / f"{channel}.ppm")
    return {"field": str(args.field), "channel": channel, "colormap": args.colormap}


def cmd_bench(args, cfg, out):
    if args.checkpoint:
        model = ModelCheckpoint.load(args.checkpoint).to_model()
    else:
        model = build_model(ModelConfig.from_dict(_merge(
            ModelConfig(width_scale=0.125).to_dict(), cfg.get("model"), {"seed": args.seed})))
    ref = render_reference(_speckle(args, cfg), args.size, args.size)
    shape = (args.size, args.size)
    fields = [DisplacementField(np.full(shape, 0.01 * k), np.full(shape, -0.005 * k))
              for k in range(1, args.frames)]
    frames = make_sequence(ref, fields)
    dcfg = DicConfig.from_dict(cfg.get("dic", {}))
    report = benchmark(CnnPredictor(model), dcfg, frames, steps=args.steps, repeats=args.repeats)
    print(format_benchmark(report))
    formats.write_json(out / "bench.json", report)
    return {"dic": dcfg.to_dict(), "steps": args.steps, "frames": args.frames}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("SPECKLE_LAB_THREADS", "0")) or None,
                        help="BLAS threads (default: $SPECKLE_LAB_THREADS or library default)")
    common.add_argument("--deterministic", action="store_true",
                        help="single thread; wall-clock timings go to separate files")
    common.add_argument("--config", help="JSON file overriding module defaults")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="speckle-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def speckle_opts(sp):
        sp.add_argument("--density", type=float)
        sp.add_argument("--radius-min", type=float)
        sp.add_argument("--radius-max", type=float)
        sp.add_argument("--blur", type=float)

    sp = sub.add_parser("synth", parents=[common], help="render one speckle image")
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    speckle_opts(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("dataset", parents=[common], help="generate a synthetic dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--kinds", nargs="+")
    sp.add_argument("--amplitude", type=float)
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("dic", parents=[common], help="classical subset DIC on a pair")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--def", dest="deformed", required=True)
    sp.add_argument("--subset", type=int)
    sp.add_argument("--step", type=int)
    sp.add_argument("--search", type=int)
    sp.set_defaults(func=cmd_dic)

    def train_opts(sp):
        sp.add_argument("--data", required=True, help="dataset directory or manifest.json")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lr-drop-epoch", type=int)
        sp.add_argument("--warmup-epochs", type=int)

    sp = sub.add_parser("train", parents=[common], help="train a network from scratch")
    train_opts(sp)
    sp.add_argument("--head", choices=["displacement", "strain"])
    sp.add_argument("--width-scale", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", parents=[common], help="fine-tune every layer of a checkpoint")
    train_opts(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--lr-multiplier", type=float, default=0.1)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", parents=[common], help="evaluate against ground truth")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", help="network checkpoint (default: classical DIC)")
    sp.add_argument("--echo", action="store_true", help="echo ground truth (sanity stub)")
    sp.add_argument("--kind", choices=["displacement", "strain"], default="displacement")
    sp.add_argument("--with-oracle", action="store_true", help="also report classical DIC")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", parents=[common], help="cumulative fields over a frame sequence")
    sp.add_argument("--frames", required=True, help="directory of PGM frames or a glob")
    sp.add_argument("--checkpoint", help="displacement network (default: classical DIC)")
    sp.add_argument("--strain-checkpoint")
    sp.add_argument("--roi", type=int, nargs=4, metavar=("X0", "Y0", "W", "H"))
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("render", parents=[common], help="contour image of a field channel")
    sp.add_argument("--field", required=True, help="field .f32 file")
    sp.add_argument("--channel")
    sp.add_argument("--colormap", choices=sorted(COLORMAPS), default="jet")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("bench", parents=[common], help="oracle vs network wall time per frame")
    sp.add_argument("--checkpoint")
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--steps", type=int, nargs="+", default=[4, 7, 14])
    sp.add_argument("--repeats", type=int, default=3)
    speckle_opts(sp)
    sp.set_defaults(func=cmd_bench)
    for name in ("dataset", "dic", "train", "finetune", "eval", "infer", "render"):
        sub.choices[name].set_defaults(density=None, radius_min=None, radius_max=None, blur=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic and args.threads is None:
        args.threads = 1
    try:
        cfg = load_config(args.config)
        out = formats.ensure_dir(args.out)
        with threadpool_limits(limits=args.threads):
            resolved = args.func(args, cfg, out)
        write_run(out, args, resolved)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
