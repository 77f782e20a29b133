"""Preprocessing: illumination estimation, light-up, and the SNR prior map.

All functions operate on torch tensors shaped (B, C, H, W) with values that
are float32/float64; images live in [0, 1] at the I/O boundary, intermediate
products may exceed 1 before clamping.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601

LIGHT_UP_CLAMP = 4.0
DEFAULT_SNR_KERNEL = 5
DEFAULT_SNR_EPS = 1e-4
DEFAULT_SNR_TAU = 0.5


def rgb_to_gray(x: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a (B, 3, H, W) tensor -> (B, 1, H, W)."""
    if x.shape[1] != 3:
        raise ValueError("expected 3 channels")
    r, g, b = GRAY_WEIGHTS
    return r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3]


def illumination_prior(img: torch.Tensor) -> torch.Tensor:
    """Per-pixel channel-wise maximum, (B, 3, H, W) -> (B, 1, H, W)."""
    return img.amax(dim=1, keepdim=True)


class IlluminationEstimator(nn.Module):
    """Tiny convolutional estimator of a 3-channel illumination map.

    1x1 conv -> depthwise 5x5 conv -> 1x1 conv, taking the image concatenated
    with its illumination prior (4 channels in). The final conv is initialized
    to the constant map 1 so an untrained model starts as the identity.
    """

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.expand = nn.Conv2d(4, hidden, kernel_size=1)
        self.depthwise = nn.Conv2d(hidden, hidden, kernel_size=5, padding=2,
                                   groups=hidden)
        self.project = nn.Conv2d(hidden, 3, kernel_size=1)
        nn.init.zeros_(self.project.weight)
        nn.init.ones_(self.project.bias)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        prior = illumination_prior(img)
        x = torch.cat([img, prior], dim=1)
        return self.project(self.depthwise(self.expand(x)))

    def macs(self, h: int, w: int) -> int:
        hidden = self.expand.out_channels
        return h * w * (4 * hidden + hidden * 25 + hidden * 3)


def light_up(img: torch.Tensor, estimator: IlluminationEstimator):
    """Estimate illumination L and return (I_lu, L) with I_lu = I * L.

    I_lu is clamped to [0, 4] to bound downstream features. A non-finite L is
    rejected; during training that signals divergence.
    """
    lum = estimator(img)
    if not torch.isfinite(lum).all():
        raise ValueError("illumination map contains non-finite values")
    i_lu = torch.clamp(img * lum, 0.0, LIGHT_UP_CLAMP)
    return i_lu, lum


def mean_filter(x: torch.Tensor, kernel: int) -> torch.Tensor:
    """Box mean with replicate padding; kernel must be odd and >= 3."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 3")
    pad = kernel // 2
    padded = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    return F.avg_pool2d(padded, kernel_size=kernel, stride=1)


class SnrMap(NamedTuple):
    data: torch.Tensor  # normalized to [0, 1], shape (B, 1, H, W)
    raw: torch.Tensor   # non-negative, before per-image max normalization


def compute_snr_map(i_lu: torch.Tensor, kernel: int = DEFAULT_SNR_KERNEL,
                    eps: float = DEFAULT_SNR_EPS) -> SnrMap:
    """Signal-to-noise prior of a light-up image.

    Grayscale the image, mean-filter it as a cheap denoised counterpart, and
    take raw = denoised / max(|gray - denoised|, eps). The returned map is the
    raw one divided by its per-image maximum (an all-zero raw map stays zero).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    gray = rgb_to_gray(i_lu) if i_lu.shape[1] == 3 else i_lu
    denoised = mean_filter(gray, kernel)
    raw = denoised / torch.clamp_min(torch.abs(gray - denoised), eps)
    peak = raw.amax(dim=(-2, -1), keepdim=True)
    norm = raw / torch.clamp_min(peak, 1e-12)
    return SnrMap(norm, raw)


def threshold_snr(m: torch.Tensor, tau: float = DEFAULT_SNR_TAU,
                  mode: str = "soft") -> torch.Tensor:
    """Threshold a normalized SNR map.

    soft mode keeps values below tau and saturates the rest to 1; binary mode
    maps to {0, 1}. Binary thresholding is idempotent.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    if mode == "soft":
        return torch.where(m >= tau, torch.ones_like(m), m)
    if mode == "binary":
        return (m >= tau).to(m.dtype)
    raise ValueError(f"unknown threshold mode {mode!r}")
