"""Shallow feature extraction, 3-scale pyramids, and SNR-masked selection.

Scale indexing follows the pyramid convention used across the model: scale 2
is full resolution with C channels, scale 1 is H/2 x W/2 with 2C, scale 0 is
H/4 x W/4 with 4C.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2
ECA_KERNEL = 3


def _conv_macs(h: int, w: int, c_in: int, c_out: int, k: int, groups: int = 1) -> int:
    return h * w * c_out * (c_in // groups) * k * k


class ChannelGate(nn.Module):
    """Efficient channel attention: pooled descriptor -> 1-D conv -> sigmoid gate.

    The descriptor is replicate-padded so identical channels always receive
    identical gates, edge channels included.
    """

    def __init__(self, kernel: int = ECA_KERNEL):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, kernel_size=kernel, bias=False)
        self.pad = kernel // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        desc = x.mean(dim=(-2, -1)).unsqueeze(1)       # (B, 1, C)
        desc = F.pad(desc, (self.pad, self.pad), mode="replicate")
        gate = torch.sigmoid(self.conv(desc).squeeze(1))
        return x * gate[:, :, None, None]

    def macs(self, channels: int) -> int:
        return channels * self.conv.kernel_size[0]


class ResidualBlock(nn.Module):
    """conv3x3 -> leaky relu -> conv3x3 -> channel gate, plus identity skip."""

    def __init__(self, channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.gate = ChannelGate()
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(x)
        h = F.leaky_relu(h, self.slope)
        h = self.conv2(h)
        return x + self.gate(h)

    def macs(self, h: int, w: int) -> int:
        c = self.conv1.in_channels
        return 2 * _conv_macs(h, w, c, c, 3) + self.gate.macs(c)


class RegionalSelect(nn.Module):
    """Two residual blocks followed by an SNR-mask multiply.

    With ``invert_mask`` the complement 1 - m is used, so the same module
    serves both the image path (keep high-SNR regions) and the event path
    (keep low-SNR, edge-rich regions).
    """

    def __init__(self, channels: int, invert_mask: bool = False,
                 slope: float = LEAKY_SLOPE):
        super().__init__()
        self.blocks = nn.Sequential(ResidualBlock(channels, slope),
                                    ResidualBlock(channels, slope))
        self.invert_mask = invert_mask

    def forward(self, feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if feat.shape[-2:] != mask.shape[-2:]:
            raise ValueError("feature/mask spatial sizes differ")
        sel = self.blocks(feat)
        m = 1.0 - mask if self.invert_mask else mask
        return m * sel

    def macs(self, h: int, w: int) -> int:
        return sum(b.macs(h, w) for b in self.blocks)


class ShallowExtractor(nn.Module):
    """Independent conv3x3 stems for the light-up image and the voxel grid."""

    def __init__(self, bins: int, channels: int):
        super().__init__()
        self.conv_img = nn.Conv2d(3, channels, 3, padding=1)
        self.conv_ev = nn.Conv2d(bins, channels, 3, padding=1)

    def forward(self, i_lu: torch.Tensor, grid: torch.Tensor):
        if i_lu.shape[-2:] != grid.shape[-2:]:
            raise ValueError("image and voxel grid spatial sizes differ")
        return self.conv_img(i_lu), self.conv_ev(grid)

    def macs(self, h: int, w: int) -> int:
        c = self.conv_img.out_channels
        bins = self.conv_ev.in_channels
        return _conv_macs(h, w, 3, c, 3) + _conv_macs(h, w, bins, c, 3)


def _pad_even(x: torch.Tensor) -> torch.Tensor:
    """Replicate-pad right/bottom so both spatial sizes are even."""
    pad_w = x.shape[-1] % 2
    pad_h = x.shape[-2] % 2
    if pad_w or pad_h:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return x


class FeaturePyramid(nn.Module):
    """Two stride-2 conv4x4 halvings doubling the channel count each time."""

    def __init__(self, channels: int):
        super().__init__()
        self.down1 = nn.Conv2d(channels, 2 * channels, 4, stride=2, padding=1)
        self.down0 = nn.Conv2d(2 * channels, 4 * channels, 4, stride=2, padding=1)

    def forward(self, f2: torch.Tensor):
        """Full-resolution features -> (scale0, scale1, scale2)."""
        f1 = self.down1(_pad_even(f2))
        f0 = self.down0(_pad_even(f1))
        return f0, f1, f2

    def macs(self, h: int, w: int) -> int:
        c = self.down1.in_channels
        return (_conv_macs(h // 2, w // 2, c, 2 * c, 4)
                + _conv_macs(h // 4, w // 4, 2 * c, 4 * c, 4))


def pool_snr_pyramid(m: torch.Tensor):
    """Average-pool an SNR map twice with kernel 2 -> (scale0, scale1, scale2)."""
    m1 = F.avg_pool2d(_pad_even(m), kernel_size=2)
    m0 = F.avg_pool2d(_pad_even(m1), kernel_size=2)
    return m0, m1, m
