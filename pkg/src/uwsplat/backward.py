"""Analytic gradients of the training objective, plus a finite-difference harness.

The backward pass mirrors the forward compositing exactly. For contributor i
of a pixel (front-to-back order, transmittance T_i, opacity contribution
alpha_i, attenuation factor A = exp(-attenuation * z)):

    dL/dc_i     = alpha_i T_i A dL/dC
    dL/dalpha_i = [c_i T_i - sum_{j>i} c_j alpha_j T_j / (1 - alpha_i)] A dL/dC

alpha gradients chain through the screen-space Gaussian into the opacity
logit, the 2D mean and covariance, and from there through the projection
into position, log-scale and rotation. The per-pixel depth z is treated as a
constant: no gradient flows through the depth-extraction formula, so the
finite-difference harness evaluates the loss with the depth map frozen at
its base value. Contributions suppressed by the 1/255 floor, the 0.99 clamp
or early termination propagate zero gradient, matching the (sub)derivative
of the forward rules.

Medium-parameter gradients (per channel, summed over pixels; S is the clean
composite, z the remapped depth):

    dL/d_attenuation = -sum z S exp(-attenuation z) dL/dC
    dL/d_water_color =  sum (1 - exp(-backscatter z)) dL/dC + l1-subgradient
    dL/d_backscatter =  sum water_color z exp(-backscatter z) dL/dC + l1-subgradient

where the l1 subgradients anchor to the guidance estimates, scaled by the
guidance weight, and are added once per image-loss evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import NumericError
from .losses import total_loss
from .medium import logistic_remap
from .projection import ALPHA_FLOOR, TILE_SIZE, ProjectedCloud
from .rasterizer import (ALPHA_CLAMP, T_EARLY_STOP, RenderOutput, apply_water,
                         render)
from .scene import SH_C0, Camera, GaussianCloud, MediumParams


class GradientBuffer:
    """Gradients co-indexed with a cloud generation, plus medium gradients."""

    def __init__(self, n: int):
        self.n = n
        self.d_positions = np.zeros((n, 3))
        self.d_log_scales = np.zeros((n, 3))
        self.d_rotations = np.zeros((n, 4))
        self.d_sh_coeffs = np.zeros((n, 1, 3))
        self.d_opacity_logits = np.zeros(n)
        self.d_attenuation = np.zeros(3)
        self.d_water_color = np.zeros(3)
        self.d_backscatter = np.zeros(3)
        # Densification statistics: screen-space mean gradient norms (NDC
        # scale, i.e. pixel gradients times half the image size) and which
        # Gaussians were observed by this render.
        self.mean2d_grad_norm = np.zeros(n)
        self.observed = np.zeros(n, dtype=bool)
        self.generation = -1

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, a))) for a in (
            "d_positions", "d_log_scales", "d_rotations", "d_sh_coeffs",
            "d_opacity_logits", "d_attenuation", "d_water_color", "d_backscatter"))


def backward_pixel(contributors, pixel, dL_dC: np.ndarray, att: np.ndarray):
    """Reference per-pixel backward; mirrors ``composite_pixel``.

    ``contributors`` is a depth-sorted list of (Projected2D, opacity_logit,
    rgb). Returns a list of per-contributor gradient dicts with keys
    d_color, d_logit, d_mean2d, d_conic; entries suppressed by the floor,
    clamp or early stop carry zeros.
    """
    from scipy.special import expit

    from .rasterizer import alpha_at

    dL_dC = np.asarray(dL_dC, dtype=np.float64)
    att = np.asarray(att, dtype=np.float64)
    # Forward replay to collect alpha and T per contributor.
    states = []
    T = 1.0
    for p, logit, rgb in contributors:
        live = T >= T_EARLY_STOP
        a = alpha_at(p, logit, pixel) if live else 0.0
        states.append((p, logit, np.asarray(rgb, dtype=np.float64), a, T, live))
        if live and a > 0.0:
            T *= 1.0 - a

    G = dL_dC * att
    grads = []
    suffix = np.zeros(3)  # sum over later contributors of c_j alpha_j T_j
    for p, logit, rgb, a, T_i, live in reversed(states):
        out = {"d_color": np.zeros(3), "d_logit": 0.0,
               "d_mean2d": np.zeros(2), "d_conic": np.zeros(3)}
        if live and a > 0.0:
            out["d_color"] = a * T_i * G
            d_alpha = float(G @ (rgb * T_i - suffix / (1.0 - a)))
            s = float(expit(logit))
            d = np.asarray(pixel, dtype=np.float64) - p.mean2d
            inv = np.linalg.inv(p.cov2d)
            power = -0.5 * d @ inv @ d
            a_raw = s * np.exp(power)
            if ALPHA_FLOOR <= a_raw < ALPHA_CLAMP:
                d_power = d_alpha * a_raw
                out["d_logit"] = d_alpha * a_raw * (1.0 - s)
                out["d_mean2d"] = d_power * np.array([
                    inv[0, 0] * d[0] + inv[0, 1] * d[1],
                    inv[0, 1] * d[0] + inv[1, 1] * d[1]])
                out["d_conic"] = d_power * np.array(
                    [-0.5 * d[0] * d[0], -d[0] * d[1], -0.5 * d[1] * d[1]])
            suffix = suffix + rgb * a * T_i
        grads.append(out)
    grads.reverse()
    return grads


def _backward_block(px, py, mean2d, conic, colors, opac, G):
    """Vectorized per-block gradients for one contributor list.

    Returns per-contributor (d_color (M,3), d_logit (M,), d_mean2d (M,2),
    d_conic (M,3)). ``G`` is the effective clean-color gradient (P, 3).
    """
    M = mean2d.shape[0]
    P = px.shape[0]
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    ca, cb, cc = conic[:, 0][None, :], conic[:, 1][None, :], conic[:, 2][None, :]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    alpha_raw = opac[None, :] * np.exp(power)
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
    alpha[alpha_raw < ALPHA_FLOOR] = 0.0
    one_minus = 1.0 - alpha
    T = np.cumprod(one_minus, axis=1)
    T = np.concatenate([np.ones((P, 1)), T[:, :-1]], axis=1)
    live = T >= T_EARLY_STOP
    w = alpha * T
    w *= live

    d_color = w.T @ G
    U = G @ colors.T               # (P, M)
    wU = w * U
    suffix = np.flip(np.cumsum(np.flip(wU, axis=1), axis=1), axis=1) - wU
    d_alpha = U * T - suffix / one_minus
    mask = live & (alpha_raw >= ALPHA_FLOOR) & (alpha_raw < ALPHA_CLAMP)
    d_power = d_alpha * alpha_raw
    d_power *= mask

    d_logit = (1.0 - opac) * d_power.sum(axis=0)
    dmx = ((ca * dx + cb * dy) * d_power).sum(axis=0)
    dmy = ((cb * dx + cc * dy) * d_power).sum(axis=0)
    d_conic = np.stack([
        (-0.5 * dx * dx * d_power).sum(axis=0),
        (-dx * dy * d_power).sum(axis=0),
        (-0.5 * dy * dy * d_power).sum(axis=0),
    ], axis=1)
    return d_color, d_logit, np.stack([dmx, dmy], axis=1), d_conic


def _quat_backward(qunit: np.ndarray, qnorm: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain a rotation-matrix gradient to the raw (pre-normalization) quaternion."""
    w, x, y, z = qunit[:, 0], qunit[:, 1], qunit[:, 2], qunit[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    # Project onto the unit sphere's tangent space and undo the normalization.
    dot = np.sum(dqn * qunit, axis=1, keepdims=True)
    return (dqn - qunit * dot) / qnorm[:, None]


def _project_backward(proj: ProjectedCloud, cam: Camera, d_mean2d, d_conic,
                      d_color, d_logit, buf: GradientBuffer):
    """Chain screen-space gradients into the world-space cloud parameters."""
    K = len(proj)
    if K == 0:
        return
    src = proj.source_index

    # conic -> packed cov2d: for Y = X^{-1}, dL/dX = -Y (dL/dY) Y.
    ca, cb, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    Y = np.empty((K, 2, 2))
    Y[:, 0, 0], Y[:, 0, 1], Y[:, 1, 0], Y[:, 1, 1] = ca, cb, cb, cc
    Gy = np.empty((K, 2, 2))
    Gy[:, 0, 0] = d_conic[:, 0]
    Gy[:, 0, 1] = Gy[:, 1, 0] = 0.5 * d_conic[:, 1]
    Gy[:, 1, 1] = d_conic[:, 2]
    dX = -Y @ Gy @ Y
    G2 = np.empty((K, 2, 2))
    G2[:, 0, 0] = dX[:, 0, 0]
    G2[:, 0, 1] = G2[:, 1, 0] = 0.5 * (2.0 * dX[:, 0, 1])
    G2[:, 1, 1] = dX[:, 1, 1]

    # cov2d = T3 cov3d T3^T (+ dilation), T3 = J @ R_view.
    inv_z = 1.0 / proj.depth
    inv_z2 = inv_z * inv_z
    J = np.zeros((K, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * proj.tx_clamped * inv_z2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * proj.ty_clamped * inv_z2
    T3 = J @ cam.R
    dSigma = np.transpose(T3, (0, 2, 1)) @ G2 @ T3
    dT3 = 2.0 * (G2 @ T3 @ proj.cov3d)
    dJ = dT3 @ cam.R.T

    # cov3d = M M^T with M = R_quat * scale (columns scaled).
    dM = 2.0 * (dSigma @ (proj.rotmat * proj.scale[:, None, :]))
    ds = np.einsum("nrk,nrk->nk", proj.rotmat, dM)
    d_log_scale = ds * proj.scale
    dRq = dM * proj.scale[:, None, :]
    d_quat = _quat_backward(proj.quat_unit, proj.quat_norm, dRq)

    # J and the projected mean both depend on the view-space point.
    tx, ty, tz = proj.t_view[:, 0], proj.t_view[:, 1], proj.t_view[:, 2]
    d_tx_used = dJ[:, 0, 2] * (-cam.fx * inv_z2)
    d_ty_used = dJ[:, 1, 2] * (-cam.fy * inv_z2)
    inv_z3 = inv_z2 * inv_z
    d_tz = (dJ[:, 0, 0] * (-cam.fx * inv_z2)
            + dJ[:, 0, 2] * (2.0 * cam.fx * proj.tx_clamped * inv_z3)
            + dJ[:, 1, 1] * (-cam.fy * inv_z2)
            + dJ[:, 1, 2] * (2.0 * cam.fy * proj.ty_clamped * inv_z3))
    # Through the frustum clamp: tx_used = tz * clip(tx / tz).
    limx = 1.3 * cam.tan_fovx
    limy = 1.3 * cam.tan_fovy
    d_tx = np.where(proj.x_clamp_mask, 0.0, d_tx_used)
    d_ty = np.where(proj.y_clamp_mask, 0.0, d_ty_used)
    d_tz = d_tz + np.where(proj.x_clamp_mask, d_tx_used * proj.x_clamp_sign * limx, 0.0)
    d_tz = d_tz + np.where(proj.y_clamp_mask, d_ty_used * proj.y_clamp_sign * limy, 0.0)
    # Mean uses the unclamped point.
    d_tx = d_tx + d_mean2d[:, 0] * cam.fx * inv_z
    d_ty = d_ty + d_mean2d[:, 1] * cam.fy * inv_z
    d_tz = d_tz - d_mean2d[:, 0] * cam.fx * tx * inv_z2 \
                - d_mean2d[:, 1] * cam.fy * ty * inv_z2
    d_t = np.stack([d_tx, d_ty, d_tz], axis=1)
    d_pos = d_t @ cam.R

    np.add.at(buf.d_positions, src, d_pos)
    np.add.at(buf.d_log_scales, src, d_log_scale)
    np.add.at(buf.d_rotations, src, d_quat)
    np.add.at(buf.d_opacity_logits, src, d_logit)
    d_feat = SH_C0 * d_color * (~proj.color_clamped)
    np.add.at(buf.d_sh_coeffs, src, d_feat[:, None, :])
    ndc = d_mean2d * np.array([cam.width, cam.height]) * 0.5
    np.add.at(buf.mean2d_grad_norm, src, np.linalg.norm(ndc, axis=1))
    buf.observed[src] = True


def backward_medium(out: RenderOutput, dL_dC: np.ndarray, medium: MediumParams,
                    lambda_guide: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the loss w.r.t. the three medium parameter triplets."""
    z = logistic_remap(out.depth)[..., None]
    att = np.exp(-medium.attenuation.astype(np.float64) * z)
    bsc_exp = np.exp(-medium.backscatter.astype(np.float64) * z)
    d_att = np.sum(dL_dC * out.color_clean * (-z) * att, axis=(0, 1))
    d_water = np.sum(dL_dC * (1.0 - bsc_exp), axis=(0, 1))
    d_bsc = np.sum(dL_dC * medium.water_color.astype(np.float64) * z * bsc_exp, axis=(0, 1))
    if medium.has_guidance and lambda_guide != 0.0:
        d_water = d_water + lambda_guide * np.sign(
            medium.water_color.astype(np.float64) - medium.water_color_guide.astype(np.float64))
        d_bsc = d_bsc + lambda_guide * np.sign(
            medium.backscatter.astype(np.float64) - medium.backscatter_guide.astype(np.float64))
    return d_att, d_water, d_bsc


def backward_render(out: RenderOutput, dL_dC: np.ndarray, cloud: GaussianCloud,
                    medium: Optional[MediumParams] = None,
                    lambda_guide: float = 0.0, workers: int = 1) -> GradientBuffer:
    """Accumulate all parameter gradients for one rendered view.

    ``dL_dC`` is the pixel gradient of the loss w.r.t. the rendered color
    (underwater color when ``out`` is an underwater render). Tiles are
    processed independently and merged in a fixed order, so the result is
    deterministic for any worker count.
    """
    if out.proj is None or out.bins is None:
        raise ValueError("render output was produced without retained buffers")
    proj, bins, cam = out.proj, out.bins, out.camera
    buf = GradientBuffer(len(cloud))
    buf.generation = cloud.generation

    if out.mode == "underwater":
        if medium is None:
            raise ValueError("underwater backward requires medium parameters")
        z = logistic_remap(out.depth)[..., None]
        G_image = dL_dC * np.exp(-medium.attenuation.astype(np.float64) * z)
        d_att, d_water, d_bsc = backward_medium(out, dL_dC, medium, lambda_guide)
        buf.d_attenuation = d_att
        buf.d_water_color = d_water
        buf.d_backscatter = d_bsc
    else:
        G_image = np.asarray(dL_dC, dtype=np.float64)

    H, W = cam.height, cam.width
    n_tiles = bins.grid_x * bins.grid_y

    def run_tile(tid):
        ty, tx = divmod(tid, bins.grid_x)
        rows = bins.tile_entries(tx, ty)
        if rows.size == 0:
            return None
        x0, x1 = tx * TILE_SIZE, min((tx + 1) * TILE_SIZE, W)
        y0, y1 = ty * TILE_SIZE, min((ty + 1) * TILE_SIZE, H)
        from .rasterizer import _pixel_centers
        px, py = _pixel_centers(x0, x1, y0, y1)
        G = G_image[y0:y1, x0:x1].reshape(-1, 3)
        return rows, _backward_block(px, py, proj.mean2d[rows], proj.conic[rows],
                                     proj.color[rows], proj.opacity[rows], G)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, range(n_tiles)))
    else:
        results = [run_tile(tid) for tid in range(n_tiles)]

    K = len(proj)
    d_color = np.zeros((K, 3))
    d_logit = np.zeros(K)
    d_mean2d = np.zeros((K, 2))
    d_conic = np.zeros((K, 3))
    for res in results:  # fixed tile order keeps accumulation deterministic
        if res is None:
            continue
        rows, (dc, dl, dm, dk) = res
        np.add.at(d_color, rows, dc)
        np.add.at(d_logit, rows, dl)
        np.add.at(d_mean2d, rows, dm)
        np.add.at(d_conic, rows, dk)

    _project_backward(proj, cam, d_mean2d, d_conic, d_color, d_logit, buf)
    return buf


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------

# Central-difference step sizes. The forward pass has hard gates by design
# (the 1/255 alpha floor, the 0.99 clamp, l1 kinks); steps must be small
# enough that a perturbation almost never crosses one, or the difference
# quotient measures the gate jump instead of the derivative.
_EPS_DEFAULTS = {
    "positions": 1e-5,
    "log_scales": 1e-5,
    "rotations": 1e-5,
    "sh_coeffs": 1e-5,
    "opacity_logits": 1e-5,
    "attenuation": 1e-5,
    "water_color": 1e-5,
    "backscatter": 1e-5,
}


@dataclass
class GradCheckRow:
    param: str
    index: tuple
    analytic: float
    fd: float
    rel_err: float


@dataclass
class GradCheckReport:
    rows: List[GradCheckRow] = field(default_factory=list)
    tol: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.rows), default=0.0)

    @property
    def flagged(self) -> List[GradCheckRow]:
        return [r for r in self.rows if r.rel_err >= self.tol]

    def group_max(self) -> dict:
        out = {}
        for r in self.rows:
            out[r.param] = max(out.get(r.param, 0.0), r.rel_err)
        return out

    def table(self) -> str:
        lines = [f"{'param':<16}{'max rel err':>14}{'entries':>9}{'flagged':>9}"]
        counts, flags = {}, {}
        for r in self.rows:
            counts[r.param] = counts.get(r.param, 0) + 1
            flags[r.param] = flags.get(r.param, 0) + (r.rel_err >= self.tol)
        for param, mx in self.group_max().items():
            lines.append(f"{param:<16}{mx:>14.3e}{counts[param]:>9}{flags[param]:>9}")
        lines.append(f"overall max rel err {self.max_rel_err:.3e} "
                     f"({'PASS' if not self.flagged else 'FAIL'} at tol {self.tol:g})")
        return "\n".join(lines)


def frozen_depth_loss(cloud: GaussianCloud, cam: Camera,
                      medium: Optional[MediumParams], gt: np.ndarray,
                      depth_frozen: np.ndarray, lambda_ssim: float,
                      lambda_guide: float) -> float:
    """Objective with the depth map pinned, matching the analytic gradients."""
    out = render(cloud, cam, mode="clean", retain=False)
    if medium is not None:
        img = apply_water(out.color, depth_frozen, medium)
    else:
        img = out.color
    breakdown, _ = total_loss(img, gt, medium, lambda_ssim, lambda_guide)
    if not np.isfinite(breakdown.total):
        raise NumericError("non-finite loss in finite-difference evaluation")
    return breakdown.total


def finite_diff_check(cloud: GaussianCloud, cam: Camera,
                      medium: Optional[MediumParams], gt: np.ndarray,
                      lambda_ssim: float = 0.3, lambda_guide: float = 0.1,
                      eps: Optional[dict] = None, tol: float = 1e-3,
                      analytic: Optional[GradientBuffer] = None) -> GradCheckReport:
    """Compare every analytic gradient against central finite differences.

    Central differences are taken on the float32 parameters using the
    actually-representable perturbation, with the loss evaluated in float64
    and the depth map frozen at the base render's value. Intended for small
    scenes (around a hundred Gaussians).
    """
    eps_map = dict(_EPS_DEFAULTS)
    if eps:
        eps_map.update(eps)

    mode = "clean" if medium is None else "underwater"
    out = render(cloud, cam, medium=medium, mode=mode)
    depth_frozen = out.depth.copy()
    if analytic is None:
        _, dL_dC = total_loss(out.color, gt, medium, lambda_ssim, lambda_guide)
        analytic = backward_render(out, dL_dC, cloud, medium, lambda_guide)

    def eval_loss(c, m):
        return frozen_depth_loss(c, cam, m, gt, depth_frozen, lambda_ssim, lambda_guide)

    report = GradCheckReport(tol=tol)

    def check_entry(param, idx, analytic_val, get_set_array, owner_clone):
        arr = get_set_array(owner_clone)
        base = arr[idx]
        e = eps_map[param]
        arr[idx] = np.float32(base + e)
        hi = np.float64(arr[idx])
        l_plus = eval_loss(*owner_clone)
        arr[idx] = np.float32(base - e)
        lo = np.float64(arr[idx])
        l_minus = eval_loss(*owner_clone)
        arr[idx] = base
        fd = (l_plus - l_minus) / (hi - lo)
        rel = abs(analytic_val - fd) / max(abs(fd), 1e-6)
        report.rows.append(GradCheckRow(param, idx, float(analytic_val), float(fd), float(rel)))

    cloud2 = cloud.copy()
    medium2 = medium.copy() if medium is not None else None
    owner = (cloud2, medium2)

    cloud_params = {
        "positions": (lambda o: o[0].positions, analytic.d_positions),
        "log_scales": (lambda o: o[0].log_scales, analytic.d_log_scales),
        "rotations": (lambda o: o[0].rotations, analytic.d_rotations),
        "sh_coeffs": (lambda o: o[0].sh_coeffs, analytic.d_sh_coeffs),
        "opacity_logits": (lambda o: o[0].opacity_logits, analytic.d_opacity_logits),
    }
    for param, (getter, grads) in cloud_params.items():
        arr = getter(owner)
        for idx in np.ndindex(arr.shape):
            check_entry(param, idx, grads[idx], getter, owner)

    if medium2 is not None:
        medium_params = {
            "attenuation": (lambda o: o[1].attenuation, analytic.d_attenuation),
            "water_color": (lambda o: o[1].water_color, analytic.d_water_color),
            "backscatter": (lambda o: o[1].backscatter, analytic.d_backscatter),
        }
        for param, (getter, grads) in medium_params.items():
            arr = getter(owner)
            for idx in np.ndindex(arr.shape):
                check_entry(param, idx, grads[idx], getter, owner)

    return report
