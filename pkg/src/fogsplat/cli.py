"""Command-line interface: synth, train, render, eval, toy."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .io import DataError
from .losses import LOSS_TERMS, LossWeights
from .optim import NumericalAbort, TrainConfig, evaluate, train
from .raster import CorruptStateError, render
from .scene import InvalidParameterError
from .synth import sample_scene_params, synthesize_fog

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fogsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _rgb(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,G,B floats, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {len(vals)}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fogsplat", description="Gaussian splatting with a learned scattering medium.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="add homogeneous fog to clear images using depth maps")
    s.add_argument("--clear", required=True, type=Path, help="directory of clear PNGs")
    s.add_argument("--depth", required=True, type=Path, help="directory of depth PFMs (same stems)")
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--beta", type=float, help="scattering coefficient (default: sampled)")
    s.add_argument("--A", type=_rgb, dest="airlight", help="atmospheric light R,G,B (default: sampled)")
    s.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("train", help="optimize a scene from foggy views")
    t.add_argument("--scene", required=True, type=Path)
    t.add_argument("--iters", required=True, type=int)
    t.add_argument("--preset", choices=("synthetic", "real"), default="synthetic")
    t.add_argument("--no-sigmoid", action="store_true", help="plain exponential transmission")
    t.add_argument("--disable-loss", action="append", default=[], choices=[k for k in LOSS_TERMS if k != "rec"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--no-fog", action="store_true", help="fog-unaware baseline (no medium model)")
    t.add_argument("--no-densify", action="store_true")
    t.add_argument("--literal-dcp", action="store_true",
                   help="evaluate the DCP smoothness quadratic on the prior map, as printed")
    t.add_argument("--prior-airlight", choices=("learned", "estimate"), default="learned")
    t.add_argument("--beta-l2", type=float, default=0.0, help="L2 penalty on the scattering weight")
    t.add_argument("--lambda-smooth", type=float, default=None)
    t.add_argument("--checkpoint-every", type=int, default=0)

    r = sub.add_parser("render", help="render one camera of a checkpoint")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--camera", required=True, type=int)
    r.add_argument("--mode", choices=("foggy", "clear", "transmission", "depth"), default="clear")
    r.add_argument("--out", required=True, type=Path, help=".png, or .pfm for raw single-channel maps")

    e = sub.add_parser("eval", help="PSNR/SSIM of clear renders against ground truth")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--scene", required=True, type=Path)
    e.add_argument("--gt", required=True, type=Path, help="directory of clear PNGs named by camera")
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--crop", type=int, default=0, help="ignore N border pixels")

    y = sub.add_parser("toy", help="write the procedural toy dataset")
    y.add_argument("--out", required=True, type=Path)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--views", type=int, default=12)
    y.add_argument("--size", type=int, default=128)
    return p


def cmd_synth(args) -> int:
    if not args.clear.is_dir():
        raise DataError(f"{args.clear}: directory not found")
    beta, A = sample_scene_params(args.seed)
    if args.beta is not None:
        beta = args.beta
    if args.airlight is not None:
        A = np.asarray(args.airlight, dtype=float)
    if beta < 0:
        raise UsageError(f"--beta must be >= 0, got {beta}")
    clear_paths = sorted(args.clear.glob("*.png"))
    if not clear_paths:
        raise DataError(f"{args.clear}: no PNG images")
    (args.out / "images").mkdir(parents=True, exist_ok=True)
    (args.out / "transmission").mkdir(exist_ok=True)
    for cp in clear_paths:
        dp = args.depth / f"{cp.stem}.pfm"
        if not dp.exists():
            raise DataError(f"{dp}: no depth map for {cp.name}")
        clear = io.read_image(cp)
        depth = io.read_pfm(dp)
        if depth.shape != clear.shape[:2]:
            raise DataError(f"{dp}: depth is {depth.shape[1]}x{depth.shape[0]}, "
                            f"{cp} is {clear.shape[1]}x{clear.shape[0]}")
        hazy, t = synthesize_fog(clear, depth, beta, A)
        io.write_image(args.out / "images" / cp.name, hazy)
        io.write_pfm(args.out / "transmission" / f"{cp.stem}.pfm", t)
    manifest = {"seed": args.seed, "beta": float(beta), "A": [float(v) for v in A],
                "images": [p.name for p in clear_paths]}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {len(clear_paths)} hazy images to {args.out} (beta={beta:.4f}, A={np.round(A, 4).tolist()})")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.iters <= 0:
        raise UsageError("--iters must be positive")
    bundle = io.load_scene(args.scene)
    enabled = {k: k not in args.disable_loss for k in LOSS_TERMS}
    lw = LossWeights(enabled=enabled)
    if args.lambda_smooth is not None:
        lw.lambda_smooth = args.lambda_smooth
    config = TrainConfig.from_preset(
        args.preset, iterations=args.iters, seed=args.seed, use_sigmoid=not args.no_sigmoid,
        use_fog=not args.no_fog, densify=not args.no_densify, literal_dcp=args.literal_dcp,
        prior_airlight=args.prior_airlight, beta_l2=args.beta_l2,
        checkpoint_every=args.checkpoint_every, losses=lw)
    cloud, fog, state = train(bundle, config, args.out, progress_every=100 if args.verbose else 0)
    summary = {"iterations": state.iteration, "num_gaussians": len(cloud)}
    if fog is not None:
        summary.update(beta=fog.beta, A=fog.airlight.tolist())
    if any(c is not None for c in bundle.clear_images):
        res = evaluate(cloud, fog, bundle.cameras, bundle.clear_images)
        (args.out / "metrics.tsv").write_text(res.to_tsv())
        summary.update(psnr=res.mean_psnr, ssim=res.mean_ssim)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _to_png(img, mode):
    if mode == "depth":
        lo, hi = float(img.min()), float(img.max())
        return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return img


def cmd_render(args) -> int:
    ck = io.load_checkpoint(args.ckpt)
    if not ck.cameras:
        raise DataError(f"{args.ckpt}: checkpoint stores no cameras")
    if not 0 <= args.camera < len(ck.cameras):
        raise UsageError(f"--camera must be in [0, {len(ck.cameras) - 1}], got {args.camera}")
    if ck.fog is None and args.mode in ("foggy", "transmission"):
        raise UsageError(f"checkpoint has no fog model; mode {args.mode!r} is unavailable")
    bg = ck.config.get("background")
    out = render(ck.cloud, ck.cameras[args.camera], ck.fog, args.mode, background=bg)
    img = out.image()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.out.suffix.lower() == ".pfm":
        if img.ndim != 2:
            raise UsageError("PFM output holds single-channel maps (transmission, depth)")
        io.write_pfm(args.out, img)
    else:
        img = _to_png(img, args.mode)
        io.write_image(args.out, np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.crop < 0:
        raise UsageError("--crop must be >= 0")
    ck = io.load_checkpoint(args.ckpt)
    bundle = io.load_scene(args.scene, gt_dir=args.gt)
    missing = [c.name for c, g in zip(bundle.cameras, bundle.clear_images) if g is None]
    if missing:
        raise DataError(f"{args.gt}: no ground-truth image for camera(s) {', '.join(missing)}")
    res = evaluate(ck.cloud, ck.fog, bundle.cameras, bundle.clear_images, crop=args.crop,
                   background=ck.config.get("background"))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(res.to_tsv())
    print(f"mean PSNR {res.mean_psnr:.4f} dB, mean SSIM {res.mean_ssim:.4f} over {len(res.names)} views")
    return EXIT_OK


def cmd_toy(args) -> int:
    from .toy import make_toy_scene, write_toy_scene
    scene = make_toy_scene(args.seed, n_views=args.views, size=args.size)
    write_toy_scene(args.out, scene)
    print(f"wrote toy scene ({len(scene.cloud)} Gaussians, {len(scene.cameras)} views) to {args.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "toy": cmd_toy}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidParameterError) as exc:
        print(f"fogsplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fogsplat {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, CorruptStateError) as exc:
        print(f"fogsplat {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
