"""Deterministic test scenes shared by the test suite and the CLI."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .scene import Camera, GaussianCloud, MediumParams, rgb_to_feature


def random_cloud(n: int, rng: np.random.Generator, *,
                 depth_range: Tuple[float, float] = (4.0, 20.0),
                 spread: float = 4.0,
                 scale_range: Tuple[float, float] = (0.15, 0.6),
                 opacity_range: Tuple[float, float] = (-1.0, 1.5),
                 color_range: Tuple[float, float] = (0.1, 0.9)) -> GaussianCloud:
    """Random Gaussians in front of a camera at the origin looking down +z."""
    pos = np.stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*depth_range, n),
    ], axis=1)
    log_scales = np.log(rng.uniform(*scale_range, (n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    colors = rng.uniform(*color_range, (n, 3))
    return GaussianCloud(
        positions=pos, log_scales=log_scales, rotations=q,
        sh_coeffs=rgb_to_feature(colors)[:, None, :],
        opacity_logits=rng.uniform(*opacity_range, n),
    )


def front_camera(width: int = 64, height: int = 64, focal: float = 60.0,
                 near: float = 0.1, far: float = 60.0) -> Camera:
    return Camera(width=width, height=height, fx=focal, fy=focal,
                  cx=width / 2, cy=height / 2, R=np.eye(3), t=np.zeros(3),
                  near=near, far=far)


def gradient_check_scene(n: int = 50, size: int = 32, seed: int = 11):
    """The canonical scene for gradient verification.

    Returns (cloud, camera, medium, gt): a random cloud, a moderate medium
    with slightly-off guidance anchors, and a ground-truth image rendered
    from a jittered copy of the scene so residuals are generic (no pixel
    sits on an l1 kink, no alpha near its clamp).
    """
    from .rasterizer import render

    rng = np.random.default_rng(seed)
    cloud = random_cloud(n, rng, spread=2.6, depth_range=(5.0, 18.0),
                         scale_range=(0.25, 0.8), opacity_range=(-1.0, 1.2))
    cam = front_camera(width=size, height=size, focal=size * 1.6)
    medium = MediumParams(
        attenuation=(0.5, 0.4, 0.3),
        water_color=(0.25, 0.35, 0.45),
        backscatter=(0.9, 1.1, 1.3),
        water_color_guide=(0.3, 0.3, 0.4),
        backscatter_guide=(1.0, 1.0, 1.0),
    )

    jostle = cloud.copy()
    jostle.positions = (jostle.positions
                        + rng.normal(0, 0.25, jostle.positions.shape)).astype(np.float32)
    jostle.sh_coeffs = (jostle.sh_coeffs
                        + rng.normal(0, 0.35, jostle.sh_coeffs.shape)).astype(np.float32)
    gt_medium = MediumParams((0.55, 0.38, 0.33), (0.22, 0.37, 0.47), (0.85, 1.05, 1.25))
    gt = render(jostle, cam, medium=gt_medium, mode="underwater", retain=False).color
    gt = np.clip(gt + rng.uniform(0.005, 0.02, gt.shape), 0.0, 1.0)
    return cloud, cam, medium, gt
