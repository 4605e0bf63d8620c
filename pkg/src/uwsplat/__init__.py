"""Differentiable Gaussian-splatting engine for scattering (underwater) media."""

from .backscatter import (BackscatterEstimate, DarkPixelSet, cluster_range,
                          estimate_backscatter, fit_saturating_exponential,
                          select_dark_pixels)
from .backward import (GradientBuffer, backward_medium, backward_pixel,
                       backward_render, finite_diff_check)
from .errors import CheckpointError, DataError, NumericError
from .losses import (LossBreakdown, d_ssim_loss, guidance_loss, l1_loss, psnr,
                     ssim_value, total_loss)
from .medium import apply_medium, invert_medium, logistic_remap
from .optim import OptimConfig, adam_step, densify_and_prune, position_lr
from .pipeline import evaluate, render_novel, split_dataset, train
from .projection import Projected2D, project_cloud, project_gaussian, tile_span
from .rasterizer import (RenderOutput, TileBins, alpha_at, bin_and_sort,
                         composite_pixel, render, render_naive)
from .scene import (Camera, Gaussian, GaussianCloud, MediumParams, TrainState,
                    covariance, load_checkpoint, opacity, save_checkpoint)

__version__ = "0.1.0"
