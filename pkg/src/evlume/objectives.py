"""Training losses and evaluation metrics.

Losses are torch functions (differentiable, dtype-preserving); metrics are
numpy functions operating on (H, W, 3) images in [0, 1], computed in float64.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy.signal import convolve2d

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

PSNR_CAP_DB = 100.0
_PSNR_CAP_MSE = 1e-10
_STAR_MIN_MEAN = 1e-6

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossConfig:
    """Weights and constants of the training objective."""

    lambda_perceptual: float = 0.5
    eps_charbonnier: float = 1e-4
    lambda_temp: float = 1.0
    phi_channels: tuple = (8, 16, 32)
    phi_seed: int = 0

    def __post_init__(self):
        if min(self.lambda_perceptual, self.eps_charbonnier, self.lambda_temp) < 0:
            raise ValueError("loss constants must be non-negative")
        self.phi_channels = tuple(int(c) for c in self.phi_channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["phi_channels"] = list(self.phi_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


class PerceptualStack(nn.Module):
    """Frozen random conv stack standing in for a pretrained feature extractor.

    Three stride-2 conv3x3 + relu stages with a fixed init seed; any module
    mapping (B, 3, H, W) to a feature tensor can be plugged in its place.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        layers = []
        c_in = 3
        for c_out in channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c_out
        self.stages = nn.Sequential(*layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


_PHI_CACHE: dict = {}


def build_phi(cfg: LossConfig) -> PerceptualStack:
    key = (cfg.phi_channels, cfg.phi_seed)
    if key not in _PHI_CACHE:
        _PHI_CACHE[key] = PerceptualStack(cfg.phi_channels, cfg.phi_seed)
    return _PHI_CACHE[key]


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


def reconstruction_loss(en: torch.Tensor, gt: torch.Tensor, cfg: LossConfig,
                        phi: nn.Module | None = None) -> torch.Tensor:
    """Per-pixel Charbonnier mean plus a weighted perceptual L1 term."""
    if en.shape != gt.shape:
        raise ValueError("enhanced/GT shapes differ")
    diff = en - gt
    charb = torch.sqrt(diff * diff + cfg.eps_charbonnier ** 2).mean()
    if cfg.lambda_perceptual == 0:
        return charb
    if phi is None:
        phi = build_phi(cfg)
    phi = phi.to(dtype=en.dtype)
    feat_en = phi(_as_batched(en))
    feat_gt = phi(_as_batched(gt))
    return charb + cfg.lambda_perceptual * (feat_en - feat_gt).abs().mean()


def temporal_loss(en_t: torch.Tensor, en_prev: torch.Tensor,
                  gt_t: torch.Tensor, gt_prev: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between enhanced and GT frame-to-frame changes."""
    if not (en_t.shape == en_prev.shape == gt_t.shape == gt_prev.shape):
        raise ValueError("temporal loss inputs must share one shape")
    return ((en_t - en_prev) - (gt_t - gt_prev)).abs().mean()


def total_loss(rec, temp, cfg: LossConfig):
    """rec + lambda_temp * temp; pass temp=0 for frames without a predecessor."""
    return rec + cfg.lambda_temp * temp


# ----------------------------------------------------------------------
# metrics (numpy, float64)
# ----------------------------------------------------------------------
def _as_image(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    return arr


def gray(img) -> np.ndarray:
    """BT.601 luma of an (H, W, 3) image."""
    return _as_image(img) @ GRAY_WEIGHTS


def psnr(en, gt) -> float:
    """Peak signal-to-noise ratio in dB against a unit dynamic range.

    Inputs are clamped to [0, 1]; values above 100 dB (MSE below 1e-10) are
    capped at 100.
    """
    en = np.clip(_as_image(en), 0.0, 1.0)
    gt = np.clip(_as_image(gt), 0.0, 1.0)
    if en.shape != gt.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((en - gt) ** 2))
    if mse < _PSNR_CAP_MSE:
        return PSNR_CAP_DB
    return 10.0 * np.log10(1.0 / mse)


def brightness_ratio(en, gt) -> float:
    """Mean gray of GT over mean gray of the enhanced image."""
    return float(np.mean(gray(gt)) / np.mean(gray(en)))


def psnr_star(en, gt) -> float:
    """Brightness-corrected PSNR: rescale by the GT/enhanced mean-gray ratio.

    A near-black enhanced image (mean gray <= 1e-6) falls back to plain PSNR;
    use :func:`psnr_star_flagged` to observe the fallback.
    """
    return psnr_star_flagged(en, gt)[0]


def psnr_star_flagged(en, gt) -> tuple[float, bool]:
    en = _as_image(en)
    mean_en = float(np.mean(gray(en)))
    if mean_en <= _STAR_MIN_MEAN:
        return psnr(en, gt), True
    scaled = np.clip(en * brightness_ratio(en, gt), 0.0, 1.0)
    return psnr(scaled, gt), False


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(en, gt, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM on grayscale with a Gaussian window (K1=0.01, K2=0.03, L=1)."""
    x = gray(np.clip(_as_image(en), 0.0, 1.0))
    y = gray(np.clip(_as_image(gt), 0.0, 1.0))
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    if min(x.shape) < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    win = _gaussian_window(window, sigma)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    exx = convolve2d(x * x, win, mode="valid")
    eyy = convolve2d(y * y, win, mode="valid")
    exy = convolve2d(x * y, win, mode="valid")
    var_x = exx - mu_x * mu_x
    var_y = eyy - mu_y * mu_y
    cov = exy - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class FrameMetrics:
    frame_idx: int
    psnr: float
    psnr_star: float
    ssim: float
    psnr_star_fallback: bool = False


@dataclass
class MetricReport:
    """Per-frame metrics plus sequence means, serializable as CSV and JSON."""

    frames: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_sequences(cls, enhanced, reference, metadata=None) -> "MetricReport":
        rows = []
        for idx, (en, gt) in enumerate(zip(enhanced, reference)):
            star, fallback = psnr_star_flagged(en, gt)
            rows.append(FrameMetrics(idx, psnr(en, gt), star, ssim(en, gt), fallback))
        meta = {"outputs_clamped": True}
        meta.update(metadata or {})
        return cls(rows, meta)

    def mean(self, name: str) -> float:
        if not self.frames:
            raise ValueError("empty report")
        return float(np.mean([getattr(f, name) for f in self.frames]))

    def summary(self) -> dict:
        return {
            "frames": len(self.frames),
            "psnr": self.mean("psnr"),
            "psnr_star": self.mean("psnr_star"),
            "ssim": self.mean("ssim"),
            "psnr_star_fallback_frames": [f.frame_idx for f in self.frames
                                          if f.psnr_star_fallback],
            "metadata": self.metadata,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_idx", "psnr", "psnr_star", "ssim"])
            for f in self.frames:
                writer.writerow([f.frame_idx, f"{f.psnr:.6f}",
                                 f"{f.psnr_star:.6f}", f"{f.ssim:.6f}"])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
