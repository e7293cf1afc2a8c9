"""Command-line surface: synth, render, unwrap, fit, relight, gradcheck, diff.

Exit codes: 0 success, 1 argument/config parse error, 2 I/O error
(missing or malformed files), 3 numeric failure (divergence, NaN, failed
gradient checks).  Every command is deterministic for a fixed --seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import gradcheck, imgio, metrics
from .fitting import (FitConfig, FitResult, detail_fit, coarse_fit, load_params,
                      relight, save_fit_result, save_params)
from .imgio import FileFormatError
from .losses import LossWeights
from .morphable import ModelFormatError, load_model
from .render import Camera, unwrap_texture
from .synthetic import (expand_light, load_landmarks, make_scene, sha256_file,
                        write_bundle)
from .tensor import Tensor

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

_LAMBDA_NAMES = ("id1", "id2", "ar1", "ar2", "ar3", "ar4", "dp1", "dp2")


class CliParseError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise CliParseError(message)


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="deterministic run seed")
    p.add_argument("--uv-size", type=int, default=256, help="uv map resolution")
    p.add_argument("--image-size", type=int, default=224, help="square frame size in pixels")
    p.add_argument("--focal", type=float, default=1015.0, help="pinhole focal length in pixels")
    p.add_argument("--threads", type=int, default=os.cpu_count(),
                   help="cap on internal data parallelism (execution may use fewer)")
    p.add_argument("--config", default=None,
                   help="key=value config file; explicit flags override it")


def _add_lambdas(p: argparse.ArgumentParser) -> None:
    defaults = LossWeights()
    for name in _LAMBDA_NAMES:
        p.add_argument(f"--lambda-{name}", type=float,
                       default=getattr(defaults, f"lambda_{name}"),
                       help=f"loss weight lambda_{name}")


def build_parser() -> _Parser:
    parser = _Parser(prog="facefit",
                     description="Single-image face albedo and illumination recovery toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ground-truth scene bundle")
    _add_shared(p)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--vertices", type=int, default=800, help="synthetic head vertex count")
    p.add_argument("--lighting", choices=("frontal", "side"), default="frontal",
                   help="ground-truth lighting style")

    p = sub.add_parser("render", help="render a model with given params and maps")
    _add_shared(p)
    p.add_argument("--model", required=True, help="FMM1 model file")
    p.add_argument("--params", required=True, help="params.txt file")
    p.add_argument("--albedo", required=True, help="albedo map (.pfm)")
    p.add_argument("--light", default=None,
                   help="light map (.shm1); defaults to theta_light from the params file")
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("unwrap", help="unwrap an image onto the uv grid")
    _add_shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", help="recover albedo and illumination from one image")
    _add_shared(p)
    _add_lambdas(p)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--model", required=True, help="FMM1 model file")
    p.add_argument("--out", required=True, help="output result directory")
    p.add_argument("--landmarks", default=None, help="optional landmark file (id x y lines)")
    p.add_argument("--mask", default=None, help="optional parsing mask (PNG or PFM)")
    p.add_argument("--steps-coarse", type=int, default=400)
    p.add_argument("--steps-detail", type=int, default=300)
    p.add_argument("--lr-coarse", type=float, default=1e-4)
    p.add_argument("--lr-detail", type=float, default=1e-2)
    p.add_argument("--lr-decay", type=float, default=0.98)
    p.add_argument("--l1-anneal", type=float, default=1.0,
                   help="fraction of detail steps after which lambda_ar3 drops to 0")
    p.add_argument("--gt-albedo", default=None, help="ground-truth albedo map for metrics.csv")
    p.add_argument("--gt-light", default=None, help="ground-truth light map for metrics.csv")

    p = sub.add_parser("relight", help="render a fitted result under new lighting")
    _add_shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--result", required=True, help="fit result directory")
    p.add_argument("--light", required=True,
                   help=".shm1 light map or a text file with 27 coefficients")
    p.add_argument("--pose", default=None,
                   help="override pose: six floats 'rx ry rz tx ty tz'")
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("gradcheck", help="run the finite-difference suite over every op")
    _add_shared(p)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOL)

    p = sub.add_parser("diff", help="print L1/PSNR/SSIM between two images")
    _add_shared(p)
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--mask", default=None, help="optional mask image (PNG or PFM)")

    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    """Load --config key=value defaults; explicit flags still win."""
    path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
    if path is None:
        return argv
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliParseError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    # Inject config values as flags before the explicit ones.
    injected = []
    for key, val in values.items():
        injected.extend([f"--{key.replace('_', '-')}", val])
    sub_idx = 1  # argv[0] is the subcommand
    return argv[:sub_idx] + injected + argv[sub_idx:]


def _load_image_any(path) -> np.ndarray:
    if str(path).endswith(".pfm"):
        return imgio.load_pfm(path)
    return imgio.load_png(path)


def _load_mask(path, size: int) -> np.ndarray:
    mask = _load_image_any(path)
    if mask.shape[0] == 3:
        mask = mask.mean(axis=0, keepdims=True)
    if mask.shape != (1, size, size):
        raise ValueError(f"mask resolution {mask.shape} does not match frame {size}")
    return (mask > 0.5).astype(np.float64)


def _camera(args) -> Camera:
    return Camera.default(args.image_size, args.focal)


def _weights_from_args(args) -> LossWeights:
    return LossWeights(**{f"lambda_{n}": getattr(args, f"lambda_{n}") for n in _LAMBDA_NAMES})


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    bundle = make_scene(args.seed, uv_size=args.uv_size, image_size=args.image_size,
                        focal=args.focal, n_vertices=args.vertices,
                        one_sided_light=(args.lighting == "side"))
    names = write_bundle(bundle, args.out)
    print(f"wrote {len(names)} files to {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import render as render_op

    model = load_model(args.model)
    params = load_params(args.params)
    albedo = imgio.load_pfm(args.albedo)
    light = imgio.load_light_map(args.light) if args.light else params.theta_light
    cam = _camera(args)
    out = render_op(model, params, cam, Tensor(albedo), Tensor(light))
    imgio.save_png(args.out, np.clip(out.image.data, 0.0, 1.0))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_unwrap(args) -> int:
    model = load_model(args.model)
    params = load_params(args.params)
    image = imgio.load_png(args.image)
    cam = _camera(args)
    texture, visibility = unwrap_texture(image, model, params, cam,
                                         args.uv_size, args.uv_size)
    os.makedirs(args.out, exist_ok=True)
    imgio.save_pfm(os.path.join(args.out, "texture.pfm"), texture)
    imgio.save_pfm(os.path.join(args.out, "visibility.pfm"), visibility)
    print(f"wrote texture.pfm and visibility.pfm to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    model = load_model(args.model)
    image = imgio.load_png(args.image)
    cam = _camera(args)
    config = FitConfig(uv_size=args.uv_size, steps_coarse=args.steps_coarse,
                       steps_detail=args.steps_detail, lr_coarse=args.lr_coarse,
                       lr_detail=args.lr_detail, lr_decay=args.lr_decay,
                       weights=_weights_from_args(args),
                       l1_anneal_fraction=args.l1_anneal, seed=args.seed)
    landmarks = load_landmarks(args.landmarks) if args.landmarks else None
    m_parsing = _load_mask(args.mask, args.image_size) if args.mask else None

    params, _, _, _ = coarse_fit(image, landmarks, model, cam, config,
                                 m_parsing=m_parsing)
    result = detail_fit(image, params, model, cam, config, m_parsing=m_parsing)
    save_fit_result(result, args.out, model=model, cam=cam, image=image)
    _write_fit_metrics(args, result)
    _write_manifest(args.out)
    print(f"wrote fit result to {args.out}")
    return EXIT_OK


def _write_fit_metrics(args, result: FitResult) -> None:
    """metrics.csv: final loss values plus ground-truth comparisons if given."""
    rows: list[tuple[str, float]] = []
    if result.history:
        rows.append(("final_total_loss", result.history[-1].total))
        rows.append(("final_img_loss", result.history[-1].img))
    for key, value in sorted(result.diagnostics.items()):
        rows.append((key, value))
    vis = result.visibility * result.m_uv
    if args.gt_albedo:
        gt = imgio.load_pfm(args.gt_albedo)
        rows.append(("albedo_l1", metrics.l1_metric(result.a_detail, gt, vis)))
        rows.append(("albedo_psnr", metrics.psnr(result.a_detail, gt, vis)))
        rows.append(("albedo_ssim", metrics.ssim(result.a_detail, gt, vis)))
    if args.gt_light:
        gt_light = imgio.load_light_map(args.gt_light)
        m = np.broadcast_to(vis, result.l_detail.shape)
        diff = np.linalg.norm((result.l_detail - gt_light) * m)
        ref = np.linalg.norm(gt_light * m)
        rows.append(("light_rel_l2", float(diff / max(ref, 1e-12))))
    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write(",".join(name for name, _ in rows) + "\n")
        f.write(",".join(repr(v) for _, v in rows) + "\n")


def _write_manifest(out_dir) -> None:
    names = sorted(n for n in os.listdir(out_dir) if n != "manifest.txt")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for name in names:
            f.write(f"{sha256_file(os.path.join(out_dir, name))}  {name}\n")


def _load_result_dir(path, uv_size: int) -> FitResult:
    params = load_params(os.path.join(path, "params.txt"))
    a_detail = imgio.load_pfm(os.path.join(path, "albedo.pfm"))
    l_detail = imgio.load_light_map(os.path.join(path, "light.shm1"))
    m_uv = imgio.load_pfm(os.path.join(path, "mask.pfm"))
    texture = imgio.load_pfm(os.path.join(path, "texture.pfm"))
    visibility = imgio.load_pfm(os.path.join(path, "visibility.pfm"))
    a_prior = imgio.load_pfm(os.path.join(path, "prior.pfm"))
    return FitResult(params=params, a_prior=a_prior, a_detail=a_detail,
                     l_detail=l_detail, texture=texture, m_uv=m_uv,
                     visibility=visibility, history=[], diagnostics={})


def cmd_relight(args) -> int:
    model = load_model(args.model)
    result = _load_result_dir(args.result, args.uv_size)
    if args.light.endswith(".shm1"):
        light = imgio.load_light_map(args.light)
    else:
        with open(args.light) as f:
            light = np.array([float(v) for v in f.read().split()])
        if light.size != 27:
            raise ValueError(f"expected 27 light coefficients, got {light.size}")
    pose = None
    if args.pose is not None:
        pose = np.array([float(v) for v in args.pose.split()])
        if pose.size != 6:
            raise CliParseError("--pose needs six floats")
    cam = _camera(args)
    out = relight(model, result, light, cam, pose=pose)
    imgio.save_png(args.out, np.clip(out.image.data, 0.0, 1.0))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst, ok = gradcheck.run_suite(seeds=args.seeds, tol=args.tolerance)
    for name in sorted(worst):
        status = "PASS" if worst[name] < args.tolerance else "FAIL"
        print(f"{status} {name}: max rel err {worst[name]:.3e}")
    print(f"{'PASS' if ok else 'FAIL'}: {len(worst)} checks, {args.seeds} seeds, "
          f"tolerance {args.tolerance:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_diff(args) -> int:
    a = _load_image_any(args.image_a)
    b = _load_image_any(args.image_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if args.mask:
        mask = _load_mask(args.mask, a.shape[-1])
    else:
        mask = np.ones((1,) + a.shape[1:])
    report = metrics.metric_report(a, b, mask)
    for key, value in report.as_dict().items():
        print(f"{key}={value}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "unwrap": cmd_unwrap,
    "fit": cmd_fit,
    "relight": cmd_relight,
    "gradcheck": cmd_gradcheck,
    "diff": cmd_diff,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except CliParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return _COMMANDS[args.command](args)
    except CliParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            ModelFormatError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ZeroDivisionError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
