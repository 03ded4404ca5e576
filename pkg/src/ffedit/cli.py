"""Command-line entry points.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ConfigError, JobSettings, load_settings

log = logging.getLogger("ffedit")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _settings(args) -> JobSettings:
    if getattr(args, "config", None):
        return load_settings(args.config, seed=args.seed)
    from .config import settings_from_dict

    return settings_from_dict({}, seed=args.seed)


def _model(args):
    from .train import WEIGHTS_DIR, load_desk_model

    return load_desk_model(args.weights or WEIGHTS_DIR)


def cmd_gen_synth(args):
    from .synthetic import ShapeSpec, SynthConfig, gen_synthetic, random_config, write_synthetic

    if args.random:
        cfg = random_config(np.random.default_rng(args.seed), frames=args.frames, size=args.size)
    else:
        shape = ShapeSpec(args.shape, args.shape_size, _floats(args.color), _floats(args.start),
                          _floats(args.velocity))
        cfg = SynthConfig(args.frames, args.size, args.size, _floats(args.background), [shape])
    write_synthetic(gen_synthetic(cfg), args.out)
    print(f"wrote {args.frames} frames to {args.out}")


def cmd_train_base(args):
    from .train import WEIGHTS_DIR, BaseTrainConfig, train_base

    cfg = BaseTrainConfig(steps=args.steps, codec_steps=args.codec_steps, seed=args.seed)
    codec, _ = train_base(cfg, args.out or args.weights or WEIGHTS_DIR)
    print(f"codec stats {codec.stats}")


def _load_job(args, settings, edited=None):
    from .media_io import load_frame_dir
    from .pipeline import EditJob

    source = load_frame_dir(args.source)
    if edited is None:
        edited = source[0]
    return EditJob(source, edited, settings, out_dir=args.out)


def cmd_train_motion(args):
    from .pipeline import Manifest, coarse_motion_extraction

    settings = _settings(args)
    codec, model = _model(args)
    job = _load_job(args, settings)
    sets, _ = coarse_motion_extraction(job, model, codec, Manifest(job))
    for i, ads in enumerate(sets, start=1):
        print(f"clip {i}: final loss {ads.history[-1] if ads.history else float('nan'):.6f}")


def cmd_edit(args):
    from .media_io import to_unit
    from .pipeline import run_job
    from PIL import Image

    settings = load_settings(args.config, seed=args.seed)
    codec, model = _model(args)
    edited = to_unit(np.asarray(Image.open(args.edited).convert("RGB")))
    job = _load_job(args, settings, edited)
    video, _ = run_job(job, model, codec)
    print(f"wrote {len(video)} edited frames to {Path(args.out) / 'output'}")


def cmd_invert(args):
    from .edm import build_schedule, invert, make_conditioning
    from .media_io import load_frame_dir, segment_clips
    from .sarp import detect_smooth, perturb

    settings = _settings(args)
    codec, model = _model(args)
    frames = load_frame_dir(args.source)
    clip = segment_clips(len(frames), settings.clip_length).split(frames)[0]
    sarp = settings.sarp
    z0 = codec.encode(perturb(clip, detect_smooth(clip, sarp.gradient_threshold), sarp))
    cond = make_conditioning(model, codec, clip.frames[0], settings.sigma_cond, seed=settings.seed)
    schedule = build_schedule(settings.edit.steps)
    z_T, trace = invert(model, z0, cond, schedule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "z_T.npy", z_T.z.numpy())
    trace.write(out / "trace_inversion.bin")
    print(f"inverted clip 1 to sigma {z_T.sigma}; trace {trace.payload_bytes()} payload bytes")


def cmd_sarp_report(args):
    from .edm import build_schedule
    from .media_io import load_frame_dir, segment_clips
    from .sarp import MODES, format_report, sarp_report

    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode(s) {bad}; choose from {MODES}")
    settings = _settings(args)
    codec, model = _model(args)
    frames = load_frame_dir(args.source)
    clip = segment_clips(len(frames), settings.clip_length).split(frames)[0]
    report = sarp_report(clip, build_schedule(settings.edit.steps), model, codec, settings.sarp, modes)
    meta = {"source": args.source, "seed": settings.seed, "alpha": settings.sarp.alpha,
            "steps": settings.edit.steps}
    sys.stdout.write(format_report(report, meta))


def cmd_metrics(args):
    from .media_io import load_frame_dir
    from .synthetic import load_ground_truth

    frames = load_frame_dir(args.frames)
    values = {"temporal_consistency": M.temporal_consistency(frames, seed=args.seed)}
    if args.ground_truth:
        gt = load_ground_truth(args.ground_truth)
        n = min(len(frames), len(gt["track"]))
        values["trajectory_error"] = M.trajectory_error(frames[:n], gt["track"][:n], gt["background"])
    sys.stdout.write(M.format_metrics(values))


def build_parser() -> Parser:
    p = Parser(prog="ffedit", description="First-frame-guided video editing (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--seed", type=int, default=0, help="root seed (u64)")
        sp.add_argument("--weights", help="directory holding codec.bin and denoiser.bin")
        return sp

    g = common(sub.add_parser("gen-synth", help="render a synthetic moving-shape video"))
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=14)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--shape", default="square")
    g.add_argument("--shape-size", type=float, default=8.0)
    g.add_argument("--color", default="-0.8,-0.2,0.6")
    g.add_argument("--start", default="8,16")
    g.add_argument("--velocity", default="1,0")
    g.add_argument("--background", default="1,1,1")
    g.add_argument("--random", action="store_true", help="draw a random scene from --seed")
    g.set_defaults(func=cmd_gen_synth)

    t = common(sub.add_parser("train-base", help="pre-train codec and base denoiser"))
    t.add_argument("--out")
    t.add_argument("--steps", type=int, default=6000)
    t.add_argument("--codec-steps", type=int, default=6000)
    t.set_defaults(func=cmd_train_base)

    m = common(sub.add_parser("train-motion", help="train per-clip motion adapters"))
    m.add_argument("--source", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_train_motion)

    e = common(sub.add_parser("edit", help="run the full two-stage edit"), config_required=True)
    e.add_argument("--source", required=True)
    e.add_argument("--edited", required=True, help="edited first frame image")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edit)

    i = common(sub.add_parser("invert", help="invert clip 1 and store z_T plus its trace"))
    i.add_argument("--source", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_invert)

    s = common(sub.add_parser("sarp-report", help="normality of inverted latents per mode"))
    s.add_argument("--source", required=True)
    s.add_argument("--mode", default="off,smooth")
    s.set_defaults(func=cmd_sarp_report)

    q = common(sub.add_parser("metrics", help="temporal consistency and trajectory error"))
    q.add_argument("--frames", required=True)
    q.add_argument("--ground-truth", help="synthetic directory with ground_truth.npz")
    q.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"ffedit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
