"""Dataset formats, image I/O, and the synthetic underwater dataset generator.

Images are linear radiometric values: PFM (float32) is the lossless path
used for training and tests, 8-bit PNG previews are written alongside and
declared linear (no gamma is ever applied). Depth maps are stored as
single-channel PFM in the remapped [0, 1) range. A dataset directory holds
``manifest.txt`` (INI-style key/value), per-frame images/depths, and for
synthetic data a ``truth.txt`` with the generating parameters.
"""

from __future__ import annotations

import configparser
import io
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import DataError
from .medium import apply_medium, logistic_remap
from .rasterizer import render
from .scene import Camera, GaussianCloud, MediumParams, rgb_to_feature

MANIFEST_NAME = "manifest.txt"
TRUTH_NAME = "truth.txt"


# ---------------------------------------------------------------------------
# Raster file I/O
# ---------------------------------------------------------------------------

def write_pfm(path: str, data: np.ndarray) -> None:
    """Write a float32 PFM ('PF' color / 'Pf' gray), little-endian, bottom-up rows."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    elif data.ndim == 2:
        header = b"Pf"
    else:
        raise DataError(f"unsupported PFM shape {data.shape}")
    h, w = data.shape[:2]
    payload = np.flipud(data).astype("<f4").tobytes()
    with _atomic_write(path) as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(payload)


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)

    def line():
        out = b""
        while True:
            c = buf.read(1)
            if not c:
                raise DataError(f"{path}: truncated PFM header")
            if c == b"\n":
                return out.decode("ascii")
            out += c

    magic = line()
    if magic not in ("PF", "Pf"):
        raise DataError(f"{path}: not a PFM file")
    try:
        w, h = (int(v) for v in line().split())
        scale = float(line())
    except ValueError as e:
        raise DataError(f"{path}: malformed PFM header") from e
    channels = 3 if magic == "PF" else 1
    count = w * h * channels
    raw = buf.read(4 * count)
    if len(raw) != 4 * count:
        raise DataError(f"{path}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels).astype(np.float64)
    img = np.flipud(img)
    return img[:, :, 0] if channels == 1 else img.copy()


def write_png(path: str, img: np.ndarray) -> None:
    """8-bit PNG of a linear [0, 1] image (values are stored as-is, no gamma)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    with _atomic_write(path) as f:
        Image.fromarray(data, mode="RGB").save(f, format="PNG")


def read_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_image(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        img = read_pfm(path)
        if img.ndim != 3:
            raise DataError(f"{path}: expected a color image")
        return img
    if ext == ".png":
        return read_png(path)
    raise DataError(f"{path}: unsupported image format {ext!r}")


class _atomic_write:
    """Write to a temp file and rename into place on success."""

    def __init__(self, path: str):
        self.path = path
        self.tmp = f"{path}.tmp-{os.getpid()}"

    def __enter__(self):
        self.f = open(self.tmp, "wb")
        return self.f

    def __exit__(self, exc_type, exc, tb):
        self.f.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def write_keyvalues(path: str, values: dict) -> None:
    with _atomic_write(path) as f:
        for k, v in values.items():
            f.write(f"{k} = {v}\n".encode())


def read_keyvalues(path: str) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed line {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    image_path: str
    camera: Camera
    depth_path: Optional[str] = None


@dataclass
class DatasetManifest:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float
    far: float
    frames: List[Frame] = field(default_factory=list)
    colorspace: str = "linear"
    depth_space: str = "remapped"

    def save(self, directory: str) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["dataset"] = {
            "width": str(self.width), "height": str(self.height),
            "fx": repr(self.fx), "fy": repr(self.fy),
            "cx": repr(self.cx), "cy": repr(self.cy),
            "near": repr(self.near), "far": repr(self.far),
            "colorspace": self.colorspace, "depth_space": self.depth_space,
        }
        for i, fr in enumerate(self.frames):
            sec = {
                "image": fr.image_path,
                "rotation": " ".join(repr(float(v)) for v in fr.camera.R.ravel()),
                "translation": " ".join(repr(float(v)) for v in fr.camera.t),
            }
            if fr.depth_path:
                sec["depth"] = fr.depth_path
            cp[f"frame {i}"] = sec
        buf = io.StringIO()
        cp.write(buf)
        with _atomic_write(os.path.join(directory, MANIFEST_NAME)) as f:
            f.write(buf.getvalue().encode())

    @staticmethod
    def load(directory: str) -> "DatasetManifest":
        path = os.path.join(directory, MANIFEST_NAME)
        if not os.path.exists(path):
            raise DataError(f"no {MANIFEST_NAME} in {directory}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(path)
        if "dataset" not in cp:
            raise DataError(f"{path}: missing [dataset] section")
        d = cp["dataset"]
        try:
            m = DatasetManifest(
                width=int(d["width"]), height=int(d["height"]),
                fx=float(d["fx"]), fy=float(d["fy"]),
                cx=float(d["cx"]), cy=float(d["cy"]),
                near=float(d["near"]), far=float(d["far"]),
                colorspace=d.get("colorspace", "linear"),
                depth_space=d.get("depth_space", "remapped"),
            )
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}: bad dataset section: {e}") from e
        if m.colorspace != "linear":
            raise DataError(f"{path}: colorspace must be linear, got {m.colorspace!r}")
        i = 0
        while f"frame {i}" in cp:
            sec = cp[f"frame {i}"]
            try:
                R = np.array([float(v) for v in sec["rotation"].split()]).reshape(3, 3)
                t = np.array([float(v) for v in sec["translation"].split()])
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}: bad frame {i}: {e}") from e
            cam = Camera(width=m.width, height=m.height, fx=m.fx, fy=m.fy,
                         cx=m.cx, cy=m.cy, R=R, t=t, near=m.near, far=m.far)
            img = sec["image"]
            dep = sec.get("depth")
            if not os.path.exists(os.path.join(directory, img)):
                raise DataError(f"{path}: referenced image missing: {img}")
            if dep and not os.path.exists(os.path.join(directory, dep)):
                raise DataError(f"{path}: referenced depth missing: {dep}")
            m.frames.append(Frame(image_path=img, camera=cam, depth_path=dep))
            i += 1
        if not m.frames:
            raise DataError(f"{path}: no frames")
        return m


@dataclass
class LoadedDataset:
    manifest: DatasetManifest
    images: List[np.ndarray]
    depths: List[Optional[np.ndarray]]

    @property
    def cameras(self) -> List[Camera]:
        return [fr.camera for fr in self.manifest.frames]


def load_dataset(directory: str) -> LoadedDataset:
    m = DatasetManifest.load(directory)
    images, depths = [], []
    for fr in m.frames:
        img = read_image(os.path.join(directory, fr.image_path))
        if img.shape[:2] != (m.height, m.width):
            raise DataError(f"{fr.image_path}: resolution {img.shape[:2]} does not "
                            f"match intrinsics {(m.height, m.width)}")
        images.append(img)
        depths.append(read_pfm(os.path.join(directory, fr.depth_path))
                      if fr.depth_path else None)
    return LoadedDataset(manifest=m, images=images, depths=depths)


# ---------------------------------------------------------------------------
# Synthetic scene generation
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """Reproducible description of a generated underwater dataset.

    The layout is a tilted textured back wall plus scattered color blobs,
    both salted with near-black patches so that dark-pixel selection has
    genuine shadow signal at several depths.
    """

    seed: int = 7
    num_gaussians: int = 300
    num_poses: int = 24
    width: int = 64
    height: int = 64
    attenuation: Tuple[float, float, float] = (0.6, 0.45, 0.3)
    water_color: Tuple[float, float, float] = (0.2, 0.35, 0.5)
    backscatter: Tuple[float, float, float] = (0.8, 1.0, 1.2)
    arc_radius: float = 10.0
    arc_height: float = 3.0
    arc_degrees: float = 70.0
    focal: float = 70.0
    near: float = 0.1
    far: float = 60.0
    shadow_fraction: float = 0.25

    # Recovery tolerances recorded into truth.txt for the acceptance checks.
    psnr_min: float = 25.0
    fit_water_tol: float = 0.05
    fit_backscatter_tol: float = 0.15
    train_water_tol: float = 0.07
    train_backscatter_tol: float = 0.3


def canonical_spec() -> SyntheticSceneSpec:
    """The fixture every quantitative recovery check runs against."""
    return SyntheticSceneSpec()


def build_scene(spec: SyntheticSceneSpec) -> GaussianCloud:
    """Ground-truth cloud: tilted wall grid + scattered blobs, some near-black."""
    rng = np.random.default_rng(spec.seed)

    def block_shadow_mask(side_x, side_y, block=3):
        # Contiguous shadow patches: isolated dark splats pick up too much
        # bleed from bright grid neighbors to approximate pure backscatter.
        cx = -(-side_x // block)
        cy = -(-side_y // block)
        coarse = rng.random((cy, cx)) < spec.shadow_fraction
        mask = np.kron(coarse, np.ones((block, block), dtype=bool))
        return mask[:side_y, :side_x].ravel()

    def grid_layer(side_x, side_y, extent_x, extent_y, z_of, scale_xy, scale_z):
        gx, gy = np.meshgrid(np.linspace(-extent_x, extent_x, side_x),
                             np.linspace(-extent_y, extent_y, side_y))
        k = gx.size
        pos = np.stack([gx.ravel(), gy.ravel(),
                        z_of(gx.ravel()) + rng.normal(0, 0.05, k)], axis=1)
        scales = np.full((k, 3), np.log(scale_xy))
        scales[:, 2] = np.log(scale_z)
        quats = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (k, 1))
        colors = rng.uniform(0.15, 0.8, (k, 3))
        shadow = block_shadow_mask(side_x, side_y)
        colors[shadow] = rng.uniform(0.001, 0.01, (int(shadow.sum()), 3))
        return pos, scales, quats, colors, np.full(k, 6.0)

    # Distant backdrop so every ray ends on geometry (deep-water band),
    # a tilted table in the mid band, and blobs stretching toward the
    # cameras; block shadows at all three depth bands anchor the saturating
    # backscatter curve from its steep start to its plateau.
    backdrop = grid_layer(10, 10, 26.0, 20.0, lambda x: np.full_like(x, 28.0), 3.4, 0.3)
    table_side = max(4, int(np.sqrt((spec.num_gaussians - 100) * 0.85)))
    table = grid_layer(table_side, table_side, 6.0, 5.0,
                       lambda x: 7.0 + 0.35 * x, 0.55, 0.1)

    # Few, small blobs: broad semi-transparent tails would veil the shadow
    # patches behind them and contaminate the dark-pixel samples.
    blob_n = max(spec.num_gaussians - 100 - table_side ** 2, 8)
    blob_pos = rng.uniform([-4.0, -3.0, -6.0], [4.0, 3.0, 3.5], (blob_n, 3))
    blob_scale = rng.uniform(np.log(0.2), np.log(0.5), (blob_n, 3))
    q = rng.normal(size=(blob_n, 4))
    blob_rot = q / np.linalg.norm(q, axis=1, keepdims=True)
    blob_color = rng.uniform(0.1, 0.8, (blob_n, 3))
    blob_op = rng.uniform(2.0, 6.0, blob_n)
    # Dark blobs are opaque and a bit larger, so their centers are truly dark.
    dark = rng.random(blob_n) < 2 * spec.shadow_fraction
    blob_color[dark] = rng.uniform(0.001, 0.008, (int(dark.sum()), 3))
    blob_scale[dark] = rng.uniform(np.log(0.4), np.log(0.65), (int(dark.sum()), 3))
    blob_op[dark] = 6.0
    blobs = (blob_pos, blob_scale, blob_rot, blob_color, blob_op)

    layers = [backdrop, table, blobs]
    return GaussianCloud(
        positions=np.concatenate([l[0] for l in layers]),
        log_scales=np.concatenate([l[1] for l in layers]),
        rotations=np.concatenate([l[2] for l in layers]),
        sh_coeffs=rgb_to_feature(np.concatenate([l[3] for l in layers]))[:, None, :],
        opacity_logits=np.concatenate([l[4] for l in layers]),
    )


def arc_cameras(spec: SyntheticSceneSpec) -> List[Camera]:
    half = np.radians(spec.arc_degrees) / 2.0
    angles = np.linspace(-half, half, spec.num_poses)
    cams = []
    for a in angles:
        eye = np.array([spec.arc_radius * np.sin(a), spec.arc_height,
                        -spec.arc_radius * np.cos(a)])
        cams.append(Camera.look_at(
            eye, target=(0.0, 0.0, 0.0), width=spec.width, height=spec.height,
            fx=spec.focal, fy=spec.focal, near=spec.near, far=spec.far))
    return cams


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: str) -> str:
    """Render and write a complete synthetic dataset; returns ``out_dir``.

    Clean frames come from the renderer itself, depth is the renderer's
    per-pixel depth (remapped), and the observed images apply the true
    medium to the clean frames. Same spec => byte-identical output.
    """
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depths"), exist_ok=True)
    cloud = build_scene(spec)
    cams = arc_cameras(spec)
    medium = MediumParams(spec.attenuation, spec.water_color, spec.backscatter)

    manifest = DatasetManifest(
        width=spec.width, height=spec.height, fx=spec.focal, fy=spec.focal,
        cx=spec.width / 2, cy=spec.height / 2, near=spec.near, far=spec.far)
    for i, cam in enumerate(cams):
        out = render(cloud, cam, mode="clean", retain=False)
        z = logistic_remap(out.depth)
        observed = apply_medium(np.clip(out.color, 0.0, 1.0), z, medium)
        img_rel = f"images/view_{i:03d}.pfm"
        dep_rel = f"depths/view_{i:03d}.pfm"
        write_pfm(os.path.join(out_dir, img_rel), observed)
        write_pfm(os.path.join(out_dir, dep_rel), z)
        write_png(os.path.join(out_dir, f"images/view_{i:03d}.png"), observed)
        manifest.frames.append(Frame(image_path=img_rel, camera=cam, depth_path=dep_rel))
    manifest.save(out_dir)

    truth = {
        "seed": spec.seed, "num_gaussians": len(cloud), "num_poses": spec.num_poses,
        "attenuation_r": spec.attenuation[0], "attenuation_g": spec.attenuation[1],
        "attenuation_b": spec.attenuation[2],
        "water_color_r": spec.water_color[0], "water_color_g": spec.water_color[1],
        "water_color_b": spec.water_color[2],
        "backscatter_r": spec.backscatter[0], "backscatter_g": spec.backscatter[1],
        "backscatter_b": spec.backscatter[2],
        "psnr_min": spec.psnr_min,
        "fit_water_tol": spec.fit_water_tol,
        "fit_backscatter_tol": spec.fit_backscatter_tol,
        "train_water_tol": spec.train_water_tol,
        "train_backscatter_tol": spec.train_backscatter_tol,
    }
    write_keyvalues(os.path.join(out_dir, TRUTH_NAME), truth)
    return out_dir


def load_truth(directory: str) -> dict:
    raw = read_keyvalues(os.path.join(directory, TRUTH_NAME))
    return {k: float(v) for k, v in raw.items()}
