"""Scattering-medium image formation: forward application and inversion.

The observed image decomposes into a direct signal J * exp(-attenuation * z)
and a backscatter signal water_color * (1 - exp(-backscatter * z)), all per
RGB channel. Depth z is expected in the remapped [0, 1) range produced by
:func:`logistic_remap`; the fitted coefficients absorb the remap scale.
Images must be linear (no gamma) for the model to hold.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .errors import DataError
from .scene import MediumParams

# Cap on the restoration gain exp(attenuation * z); keeps inversion from
# amplifying noise without bound at large depths.
MAX_RESTORE_GAIN = 1e3

LOGISTIC_RATE = 0.1


def logistic_remap(depth_raw: np.ndarray) -> np.ndarray:
    """Map raw non-negative depth into [0, 1): 2 / (1 + exp(-0.1 z)) - 1."""
    z = np.asarray(depth_raw, dtype=np.float64)
    return 2.0 / (1.0 + np.exp(-LOGISTIC_RATE * z)) - 1.0


def _check_pair(image: np.ndarray, depth: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) image, got {image.shape}")
    if depth.shape != image.shape[:2]:
        raise DataError(f"depth shape {depth.shape} does not match image {image.shape[:2]}")


def apply_medium(clean: np.ndarray, depth: np.ndarray, m: MediumParams) -> np.ndarray:
    """Forward model: attenuate a clean image and add backscatter.

    ``depth`` must already be remapped. Output is clamped to [0, 1].
    """
    clean = np.asarray(clean, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    _check_pair(clean, depth)
    z = depth[..., None]
    att = np.exp(-m.attenuation.astype(np.float64) * z)
    bsc = m.water_color.astype(np.float64) * (1.0 - np.exp(-m.backscatter.astype(np.float64) * z))
    return np.clip(clean * att + bsc, 0.0, 1.0)


def invert_medium(observed: np.ndarray, depth: np.ndarray,
                  m: MediumParams) -> Tuple[np.ndarray, np.ndarray]:
    """Restore the clean image from an observation and its depth map.

    Subtracts the backscatter signal and removes attenuation; the gain is
    capped at MAX_RESTORE_GAIN. Returns (restored, saturated) where
    ``saturated`` flags pixels that clamped (either negative after
    backscatter removal or above 1 after the gain).
    """
    observed = np.asarray(observed, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    _check_pair(observed, depth)
    z = depth[..., None]
    bsc = m.water_color.astype(np.float64) * (1.0 - np.exp(-m.backscatter.astype(np.float64) * z))
    gain = np.minimum(np.exp(m.attenuation.astype(np.float64) * z), MAX_RESTORE_GAIN)
    direct = observed - bsc
    restored = direct * gain
    saturated = (direct < 0.0) | (restored > 1.0)
    return np.clip(restored, 0.0, 1.0), saturated
