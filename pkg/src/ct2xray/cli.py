"""Command-line entry point: dataset / train / synth / eval / render.

All artifacts land under --out together with a resolved-config snapshot;
logs go to stderr, machine-readable outputs to files. Exit codes: 0 success,
2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .configs import load_config, write_resolved
from .dataset import DatasetConfig, DatasetManifest, build_dataset
from .encoders import DOMAIN_DRR, DOMAIN_XRAY
from .errors import ConfigError, ContractViolation, FormatError, TrainingAbort
from .geometry import ProjectionConfig, max_intensity_projection, pose_from_angles, render_drr
from .volumes import load_image, load_volume, save_image, write_pgm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _log(msg):
    print(msg, file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ct2xray",
        description="multi-view X-ray synthesis from CT volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-key config override")

    p = sub.add_parser("dataset", help="build phantoms, DRR sweep, and style domain")
    common(p)

    p = sub.add_parser("train", help="train from a dataset manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="dataset directory or manifest.json")
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("synth", help="multi-view synthesis from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--volume", required=True, help="volume file (.f32)")
    p.add_argument("--angles", default="-90,-60,-30,0,30,60,90",
                   help="comma-separated horizontal angles in degrees")
    p.add_argument("--style-image", help="style reference image (.f32)")
    p.add_argument("--domain", choices=[DOMAIN_DRR, DOMAIN_XRAY], default=DOMAIN_DRR)

    p = sub.add_parser("eval", help="metrics over the validation split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("render", help="standalone DRR / MIP export")
    common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--vert-angle", type=float, default=0.0)
    p.add_argument("--mip", action="store_true", help="also export the MIP")
    return parser


def cmd_dataset(args):
    cfg = load_config(DatasetConfig, args.config, args.overrides, args.seed)
    manifest = build_dataset(cfg, args.out)
    write_resolved(cfg, args.out, extra={"command": "dataset"})
    _log(f"dataset written to {manifest.root} "
         f"({len(manifest.train)} train / {len(manifest.val)} val volumes, "
         f"{len(manifest.style_images)} style images)")
    return EXIT_OK


def cmd_train(args):
    from .training import TrainConfig, Trainer

    manifest = DatasetManifest.load(args.manifest)
    if args.resume:
        trainer = Trainer.resume(args.resume, manifest, args.out)
        if args.config or args.overrides or args.seed is not None:
            raise ConfigError("--resume restores the stored config; "
                              "config flags are not allowed")
    else:
        cfg = load_config(TrainConfig, args.config, args.overrides, args.seed)
        trainer = Trainer(cfg, manifest, args.out)
    final = trainer.run()
    _log(f"training finished at step {trainer.step}; final checkpoint {final}")
    return EXIT_OK


def cmd_synth(args):
    from .training import load_model

    manifest = DatasetManifest.load(args.manifest)
    model, cfg, state = load_model(args.ckpt)
    volume = load_volume(args.volume)
    angles = [float(a) for a in str(args.angles).split(",") if a.strip()]
    if args.style_image:
        style = load_image(args.style_image)
    elif args.domain == DOMAIN_XRAY:
        raise ConfigError("X-ray domain synthesis needs --style-image")
    else:
        style = None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for angle in angles:
        pose = pose_from_angles(angle, manifest.vert_deg, manifest.projection)
        ref = style
        if ref is None:  # reconstruction path: DRR style from the GT render
            ref = render_drr(volume, pose, manifest.projection)
        img = model.synthesize(volume, pose, ref, args.domain, manifest.mu_max)
        stem = f"synth_{args.domain}_{int(round(angle)):+04d}"
        save_image(img, out / stem)
        write_pgm(img, out / f"{stem}.pgm")
        (out / f"{stem}_pose.json").write_text(json.dumps(pose.to_json(), indent=1))
        index.append({"horiz_deg": angle, "image": f"{stem}.f32"})
    (out / "synth_index.json").write_text(json.dumps(index, indent=1))
    write_resolved({"command": "synth", "ckpt": str(args.ckpt),
                    "volume": str(args.volume), "angles": angles,
                    "domain": args.domain,
                    "style_image": args.style_image or ""}, out)
    _log(f"wrote {len(angles)} views to {out}")
    return EXIT_OK


def cmd_eval(args):
    from .metrics import evaluate_split, multiview_report

    manifest = DatasetManifest.load(args.manifest)
    report = evaluate_split(args.ckpt, manifest, args.out)
    entry = (manifest.val or manifest.train)[0]
    vol = manifest.load_volume(entry)
    angles = sorted(set(list(manifest.sweep_deg) + [-90.0, 90.0]))
    multiview_report(args.ckpt, vol, angles, manifest, args.out)
    write_resolved({"command": "eval", "ckpt": str(args.ckpt),
                    "manifest": str(args.manifest)}, args.out)
    _log(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_render(args):
    cfg = load_config(ProjectionConfig, args.config, args.overrides)
    volume = load_volume(args.volume)
    pose = pose_from_angles(args.angle, args.vert_angle, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    drr = render_drr(volume, pose, cfg)
    save_image(drr, out / "drr")
    write_pgm(drr, out / "drr.pgm")
    (out / "pose.json").write_text(json.dumps(pose.to_json(), indent=1))
    if args.mip:
        from .geometry import rotate_volume
        mip = max_intensity_projection(rotate_volume(volume, pose))
        peak = float(mip.max()) or 1.0
        save_image(mip, out / "mip")
        write_pgm(mip / peak, out / "mip.pgm")
    write_resolved(cfg, out, extra={"command": "render", "angle": args.angle,
                                    "vert_angle": args.vert_angle,
                                    "volume": str(args.volume)})
    _log(f"rendered {args.volume} at {args.angle} deg into {out}")
    return EXIT_OK


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "render": cmd_render,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (TrainingAbort, ContractViolation) as exc:
        _log(f"runtime abort: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
