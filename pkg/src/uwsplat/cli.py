"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backscatter import estimate_backscatter
from .backward import finite_diff_check
from .dataset import (SyntheticSceneSpec, canonical_spec, generate_synthetic,
                      load_dataset, read_image, read_keyvalues, read_pfm,
                      write_keyvalues, write_pfm, write_png)
from .errors import DataError, NumericError
from .fixtures import gradient_check_scene, random_cloud, front_camera
from .medium import invert_medium
from .optim import OptimConfig
from .pipeline import evaluate, render_novel, train
from .scene import Camera, MediumParams, TrainState, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flags(p: argparse.ArgumentParser):
    for f in dataclasses.fields(OptimConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, type=type(f.default), default=None,
                       help=f"override {f.name} (default {f.default})")


def _build_config(args) -> OptimConfig:
    cfg = OptimConfig()
    if getattr(args, "config", None):
        with open(args.config, "rb") as f:
            data = tomllib.load(f)
        valid = {f.name for f in dataclasses.fields(OptimConfig)}
        for key, value in data.items():
            if key not in valid:
                raise DataError(f"unknown config key {key!r}")
            setattr(cfg, key, type(getattr(cfg, key))(value))
    for f in dataclasses.fields(OptimConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    cfg.validate()
    return cfg


def _load_state(path: str) -> TrainState:
    with open(path, "rb") as f:
        return load_checkpoint(f.read())


def _load_pose_file(path: str, like: Camera) -> List[Camera]:
    with open(path) as f:
        data = json.load(f)
    poses = data["poses"] if isinstance(data, dict) else data
    cams = []
    for p in poses:
        R = np.array(p["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.array(p["translation"], dtype=np.float64)
        cams.append(Camera(width=like.width, height=like.height, fx=like.fx,
                           fy=like.fy, cx=like.cx, cy=like.cy, R=R, t=t,
                           near=like.near, far=like.far))
    if not cams:
        raise DataError(f"{path}: no poses")
    return cams


def cmd_generate(args) -> int:
    spec = canonical_spec() if args.preset == "canonical" else SyntheticSceneSpec()
    spec.seed = args.seed if args.seed is not None else spec.seed
    if args.gaussians:
        spec.num_gaussians = args.gaussians
    if args.poses:
        spec.num_poses = args.poses
    if args.size:
        spec.width = spec.height = args.size
    generate_synthetic(spec, args.out)
    print(f"wrote synthetic dataset to {args.out} "
          f"({spec.num_poses} poses, {spec.width}x{spec.height})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    dataset = load_dataset(args.data)
    result = train(dataset, cfg, seed=args.seed, out_dir=args.out,
                   num_init_points=args.init_points)
    last = result.log_rows[-1] if result.log_rows else {}
    print(f"finished {cfg.iterations} iterations, "
          f"{len(result.state.cloud)} gaussians, "
          f"final loss {last.get('total', float('nan')):.5f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    state = _load_state(args.checkpoint)
    dataset = load_dataset(args.data) if args.data else None
    if args.path:
        like = dataset.cameras[0] if dataset else _default_camera(args)
        cams = _load_pose_file(args.path, like)
    elif dataset:
        cams = dataset.cameras
    else:
        raise DataError("render needs --path or --data")
    modes = ("clean", "underwater") if args.mode == "both" else (args.mode,)
    written = render_novel(state, cams, args.out, modes=modes, workers=args.workers)
    print(f"rendered {len(written)} poses to {args.out}")
    return EXIT_OK


def _default_camera(args) -> Camera:
    return front_camera(width=args.width, height=args.height, focal=args.focal)


def cmd_eval(args) -> int:
    state = _load_state(args.checkpoint)
    dataset = load_dataset(args.data)
    metrics = evaluate(state, dataset, workers=args.workers)
    print(f"{'view':>6}{'psnr':>10}{'ssim':>10}")
    for row in metrics["per_view"]:
        print(f"{row['view']:>6}{row['psnr']:>10.3f}{row['ssim']:>10.4f}")
    print(f"{'mean':>6}{metrics['mean_psnr']:>10.3f}{metrics['mean_ssim']:>10.4f}")
    if args.out:
        lines = ["view,psnr,ssim"]
        lines += [f"{r['view']},{r['psnr']!r},{r['ssim']!r}" for r in metrics["per_view"]]
        lines.append(f"mean,{metrics['mean_psnr']!r},{metrics['mean_ssim']!r}")
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_estimate_bs(args) -> int:
    image = read_image(args.image)
    depth = read_pfm(args.depth)
    est = estimate_backscatter(image, depth, p_dark=args.p_dark,
                               intervals_num=args.intervals,
                               resized_height=args.resized_height)
    values = {}
    for k, ch in enumerate("rgb"):
        values[f"water_color_{ch}"] = repr(float(est.water_color_est[k]))
        values[f"backscatter_{ch}"] = repr(float(est.backscatter_est[k]))
        values[f"residual_{ch}"] = repr(float(est.residual[k]))
    values["degenerate"] = int(est.degenerate)
    if args.out:
        write_keyvalues(args.out, values)
    for k, v in values.items():
        print(f"{k} = {v}")
    return EXIT_OK


def _medium_from_file(path: str) -> MediumParams:
    if path.endswith(".bin"):
        return _load_state(path).medium
    raw = read_keyvalues(path)
    def triplet(prefix, default=0.0):
        return [float(raw.get(f"{prefix}_{ch}", default)) for ch in "rgb"]
    return MediumParams(triplet("attenuation"), triplet("water_color"),
                        triplet("backscatter"))


def cmd_restore(args) -> int:
    image = read_image(args.image)
    depth = read_pfm(args.depth)
    medium = _medium_from_file(args.params)
    restored, saturated = invert_medium(image, depth, medium)
    root, ext = os.path.splitext(args.out)
    if ext.lower() == ".png":
        write_png(args.out, restored)
    else:
        write_pfm(args.out if ext.lower() == ".pfm" else root + ".pfm", restored)
    print(f"restored image written to {args.out} "
          f"({saturated.mean() * 100:.2f}% pixels clamped)")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    cloud, cam, medium, gt = gradient_check_scene(n=args.gaussians, size=args.size,
                                                  seed=args.seed)
    if args.clean:
        medium = None
    report = finite_diff_check(cloud, cam, medium, gt, tol=args.tol)
    print(report.table())
    return EXIT_OK if not report.flagged else EXIT_NUMERIC


def cmd_bench(args) -> int:
    from .rasterizer import render, render_naive

    rng = np.random.default_rng(args.seed)
    cloud = random_cloud(args.gaussians, rng, spread=5.0)
    cam = front_camera(width=args.size, height=args.size, focal=args.size * 1.2)

    t0 = time.perf_counter()
    for _ in range(args.repeats):
        out_tiled = render(cloud, cam, retain=False, workers=args.workers)
    tiled = (time.perf_counter() - t0) / args.repeats
    t0 = time.perf_counter()
    for _ in range(args.repeats):
        out_naive = render_naive(cloud, cam)
    naive = (time.perf_counter() - t0) / args.repeats
    diff = float(np.abs(out_tiled.color - out_naive.color).max())
    print(f"tiled:  {tiled * 1e3:9.2f} ms/frame")
    print(f"naive:  {naive * 1e3:9.2f} ms/frame")
    print(f"speedup: {naive / tiled:.2f}x  (max |difference| {diff:.2e})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwsplat",
                                description="Underwater Gaussian-splatting engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic underwater dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=["canonical", "default"], default="canonical")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--gaussians", type=int, default=None)
    g.add_argument("--poses", type=int, default=None)
    g.add_argument("--size", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="optimize a scene against a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="TOML file with optimizer settings")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-points", type=int, default=1000)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render novel views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--path", help="JSON pose file")
    r.add_argument("--data", help="dataset directory (for intrinsics/poses)")
    r.add_argument("--mode", choices=["clean", "underwater", "both"], default="both")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--width", type=int, default=64)
    r.add_argument("--height", type=int, default=64)
    r.add_argument("--focal", type=float, default=70.0)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="CSV output path")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("estimate-bs", help="dark-pixel water-parameter estimate")
    b.add_argument("--image", required=True)
    b.add_argument("--depth", required=True)
    b.add_argument("--out")
    b.add_argument("--p-dark", type=float, default=0.01)
    b.add_argument("--intervals", type=int, default=25)
    b.add_argument("--resized-height", type=int, default=300)
    b.set_defaults(func=cmd_estimate_bs)

    s = sub.add_parser("restore", help="invert the water model on an image")
    s.add_argument("--image", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--params", required=True,
                   help="checkpoint .bin or key=value estimate file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_restore)

    c = sub.add_parser("check-grad", help="finite-difference gradient verification")
    c.add_argument("--scene", choices=["canonical"], default="canonical")
    c.add_argument("--gaussians", type=int, default=50)
    c.add_argument("--size", type=int, default=32)
    c.add_argument("--seed", type=int, default=11)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--clean", action="store_true", help="check without a medium")
    c.set_defaults(func=cmd_check_grad)

    n = sub.add_parser("bench", help="tiled vs naive rendering speed")
    n.add_argument("--gaussians", type=int, default=500)
    n.add_argument("--size", type=int, default=256)
    n.add_argument("--repeats", type=int, default=3)
    n.add_argument("--seed", type=int, default=3)
    n.add_argument("--workers", type=int, default=1)
    n.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
