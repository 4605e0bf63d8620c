"""Adam updates, learning-rate schedule, densification and pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Tuple

import numpy as np
from scipy.special import expit

from .scene import (CLOUD_FIELDS, MEDIUM_FIELDS, AdamSlot, GaussianCloud,
                    TrainState)


@dataclass
class OptimConfig:
    """Training hyperparameters; defaults match the reference splatting setup."""

    iterations: int = 30000
    position_lr_init: float = 0.00016
    position_lr_final: float = 0.0000016
    position_lr_delay_mult: float = 0.01
    position_lr_max_steps: int = 30000
    feature_lr: float = 0.0025
    attenuation_lr: float = 0.0025       # direct-absorption parameters
    backscatter_lr: float = 0.0025       # water color + backscatter pair
    opacity_lr: float = 0.05
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    lambda_ssim: float = 0.3
    lambda_guide: float = 0.1
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    densify_from: int = 1500
    densify_until: int = 15000
    densify_grad_threshold: float = 0.0002
    min_opacity: float = 0.1
    refit_period: int = 500
    percent_dense: float = 0.01          # size gate: clone below, split above
    split_scale_factor: float = 1.6
    opacity_reset_value: float = 0.01
    checkpoint_interval: int = 1000
    workers: int = 1

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not (self.densify_from <= self.densify_until <= max(self.iterations, self.densify_until)):
            raise ValueError("require densify_from <= densify_until")


def position_lr(iteration: int, cfg: OptimConfig, spatial_scale: float = 1.0) -> float:
    """Log-linear decay from init to final, scaled by a sine delay ramp.

    The ramp runs over the full schedule: ramp(0) = delay_mult, ramp(max) = 1.
    ``spatial_scale`` multiplies the schedule so step sizes track the scene
    extent, as in the reference implementation.
    """
    t = min(max(iteration / cfg.position_lr_max_steps, 0.0), 1.0)
    ramp = cfg.position_lr_delay_mult + (1.0 - cfg.position_lr_delay_mult) * math.sin(0.5 * math.pi * t)
    log_lerp = math.exp(math.log(cfg.position_lr_init) * (1 - t)
                        + math.log(cfg.position_lr_final) * t)
    return ramp * log_lerp * spatial_scale


def adam_step(params: np.ndarray, grads: np.ndarray, slot: AdamSlot, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> None:
    """One bias-corrected Adam update, in place on float32 parameters."""
    slot.step += 1
    g = np.asarray(grads, dtype=np.float64).reshape(params.shape)
    m = slot.m.astype(np.float64)
    v = slot.v.astype(np.float64)
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** slot.step)
    v_hat = v / (1 - beta2 ** slot.step)
    update = params.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    params[...] = update.astype(np.float32)
    slot.m = m.astype(np.float32)
    slot.v = v.astype(np.float32)


_LR_FIELDS = {
    "positions": None,  # scheduled separately
    "log_scales": "scaling_lr",
    "rotations": "rotation_lr",
    "sh_coeffs": "feature_lr",
    "opacity_logits": "opacity_lr",
    "attenuation": "attenuation_lr",
    "water_color": "backscatter_lr",
    "backscatter": "backscatter_lr",
}


def apply_gradients(state: TrainState, buf, cfg: OptimConfig,
                    spatial_scale: float = 1.0) -> None:
    """Adam-update every learnable tensor, then re-project constraints."""
    grads = {
        "positions": buf.d_positions,
        "log_scales": buf.d_log_scales,
        "rotations": buf.d_rotations,
        "sh_coeffs": buf.d_sh_coeffs,
        "opacity_logits": buf.d_opacity_logits,
        "attenuation": buf.d_attenuation,
        "water_color": buf.d_water_color,
        "backscatter": buf.d_backscatter,
    }
    cloud, medium = state.cloud, state.medium
    for name in CLOUD_FIELDS:
        lr = position_lr(state.iteration, cfg, spatial_scale) if name == "positions" \
            else getattr(cfg, _LR_FIELDS[name])
        adam_step(getattr(cloud, name), grads[name], state.adam[name], lr)
    for name in MEDIUM_FIELDS:
        adam_step(getattr(medium, name), grads[name], state.adam[name],
                  getattr(cfg, _LR_FIELDS[name]))
    cloud.normalize_rotations()
    medium.clamp_()


def _extend_slot(slot: AdamSlot, keep: np.ndarray, n_new: int) -> AdamSlot:
    out = AdamSlot((0,))
    out.step = slot.step
    pad_shape = (n_new,) + slot.m.shape[1:]
    out.m = np.concatenate([slot.m[keep], np.zeros(pad_shape, dtype=np.float32)])
    out.v = np.concatenate([slot.v[keep], np.zeros(pad_shape, dtype=np.float32)])
    return out


def densify_and_prune(state: TrainState, cfg: OptimConfig, scene_extent: float,
                      rng: np.random.Generator) -> Tuple[int, int, int]:
    """Clone/split high-gradient Gaussians, prune transparent ones.

    High mean screen-space gradient selects candidates; those smaller than
    percent_dense * scene_extent are cloned in place, larger ones are
    replaced by two samples drawn from their own distribution at reduced
    scale. Gaussians whose opacity is below min_opacity are removed, unless
    that would empty the cloud. Returns (clones, splits, pruned).
    """
    cloud = state.cloud
    n = len(cloud)
    denom = np.maximum(state.obs_count.astype(np.float64), 1.0)
    mean_grad = state.grad_accum.astype(np.float64) / denom
    candidate = (mean_grad > cfg.densify_grad_threshold) & (state.obs_count > 0)

    max_scale = np.exp(cloud.log_scales.astype(np.float64)).max(axis=1)
    small = max_scale <= cfg.percent_dense * scene_extent
    clone_mask = candidate & small
    split_mask = candidate & ~small

    opacity = expit(cloud.opacity_logits.astype(np.float64))
    prune_mask = opacity < cfg.min_opacity
    clone_mask &= ~prune_mask
    split_mask &= ~prune_mask
    keep = ~(prune_mask | split_mask)
    if not np.any(keep) and not np.any(split_mask):
        return 0, 0, 0  # refuse to empty the cloud

    parts = {name: [getattr(cloud, name)[keep]] for name in CLOUD_FIELDS}
    n_clone = int(np.count_nonzero(clone_mask))
    if n_clone:
        for name in CLOUD_FIELDS:
            parts[name].append(getattr(cloud, name)[clone_mask])

    n_split = int(np.count_nonzero(split_mask))
    if n_split:
        idx = np.nonzero(split_mask)[0]
        from .scene import quat_to_rotmat
        R = quat_to_rotmat(cloud.rotations[idx].astype(np.float64))
        s = np.exp(cloud.log_scales[idx].astype(np.float64))
        samples = rng.standard_normal((2, n_split, 3))
        for half in range(2):
            offs = np.einsum("nij,nj->ni", R, samples[half] * s)
            parts["positions"].append(
                (cloud.positions[idx].astype(np.float64) + offs).astype(np.float32))
            parts["log_scales"].append(
                (cloud.log_scales[idx].astype(np.float64)
                 - np.log(cfg.split_scale_factor)).astype(np.float32))
            parts["rotations"].append(cloud.rotations[idx])
            parts["sh_coeffs"].append(cloud.sh_coeffs[idx])
            parts["opacity_logits"].append(cloud.opacity_logits[idx])

    for name in CLOUD_FIELDS:
        setattr(cloud, name, np.concatenate(parts[name]).astype(np.float32))
    cloud.generation += 1

    # Surviving rows keep their moments; clones and split children start fresh.
    n_added = n_clone + 2 * n_split
    for name in CLOUD_FIELDS:
        slot = state.adam[name]
        pad = (n_added,) + slot.m.shape[1:]
        slot.m = np.concatenate([slot.m[keep], np.zeros(pad, dtype=np.float32)])
        slot.v = np.concatenate([slot.v[keep], np.zeros(pad, dtype=np.float32)])

    state.reset_densify_stats()
    return n_clone, n_split, int(np.count_nonzero(prune_mask))


def reset_opacities(state: TrainState, cfg: OptimConfig) -> None:
    """Set every opacity logit to logit(reset value) and clear its moments."""
    target = math.log(cfg.opacity_reset_value / (1 - cfg.opacity_reset_value))
    state.cloud.opacity_logits[...] = np.float32(target)
    slot = state.adam["opacity_logits"]
    slot.m[...] = 0.0
    slot.v[...] = 0.0
