"""The holistic-regional fusion network and its checkpoint container.

The model is a 3-scale UNet-shaped encoder/decoder over concatenated image and
event features. Channel-attention transformer blocks provide long-range
channel mixing, gated fusion blocks merge the SNR-selected regional features
into the decoder, and a convolutional GRU at the bottleneck carries state
across video frames. The output is a residual on top of the light-up image.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import (IlluminationEstimator, compute_snr_map, light_up,
                         threshold_snr)
from .selection import (FeaturePyramid, RegionalSelect, ShallowExtractor,
                        _conv_macs, pool_snr_pyramid)

LN_EPS = 1e-6


class ChannelLayerNorm(nn.Module):
    """Layer norm across the channel dimension of (B, C, H, W) tensors."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xn = (x - mu) / torch.sqrt(var + LN_EPS)
        return xn * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class ChannelAttention(nn.Module):
    """Transposed self-attention: C x C similarity over flattened spatial tokens.

    Queries and keys are L2-normalized along the spatial axis; a learned
    per-head temperature scales the similarity before the softmax.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError("head count must divide channel count")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, kernel_size=1)
        self.project = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=1)
        q = q.reshape(b, self.heads, c // self.heads, h * w)
        k = k.reshape(b, self.heads, c // self.heads, h * w)
        v = v.reshape(b, self.heads, c // self.heads, h * w)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        attn = attn.softmax(dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        return self.project(out)

    def macs(self, h: int, w: int) -> int:
        c = self.project.in_channels
        qkv = _conv_macs(h, w, c, 3 * c, 1)
        matmuls = 2 * c * c * h * w // self.heads
        proj = _conv_macs(h, w, c, c, 1)
        return qkv + matmuls + proj


class GatedFeedForward(nn.Module):
    """1x1 expand x2 -> depthwise 3x3 -> gelu gate -> 1x1 contract."""

    def __init__(self, channels: int):
        super().__init__()
        self.expand = nn.Conv2d(channels, 2 * channels, kernel_size=1)
        self.depthwise = nn.Conv2d(2 * channels, 2 * channels, kernel_size=3,
                                   padding=1, groups=2 * channels)
        self.contract = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, b = self.depthwise(self.expand(x)).chunk(2, dim=1)
        return self.contract(F.gelu(a) * b)

    def macs(self, h: int, w: int) -> int:
        c = self.expand.in_channels
        return (_conv_macs(h, w, c, 2 * c, 1)
                + _conv_macs(h, w, 2 * c, 2 * c, 3, groups=2 * c)
                + _conv_macs(h, w, c, c, 1))


class TransformerBlock(nn.Module):
    """Channel attention with residual, then layer-normed gated FFN with residual."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attention = ChannelAttention(channels, heads)
        self.norm = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mid = self.attention(x) + x
        return self.ffn(self.norm(mid)) + mid

    def macs(self, h: int, w: int) -> int:
        return self.attention.macs(h, w) + self.ffn.macs(h, w)


class GatedFusion(nn.Module):
    """Sigmoid spatial gate over concatenated regional and holistic features.

    out = F3(sigmoid(F1(cat)) * F2(cat) + cat), with F1 producing a 1-channel
    attention map broadcast across channels, F2 channel-preserving, and F3
    projecting to the scale's output width. Inputs are concatenated in the
    order (image-selected, event-selected, holistic).
    """

    def __init__(self, cat_channels: int, out_channels: int):
        super().__init__()
        self.f1 = nn.Conv2d(cat_channels, 1, 3, padding=1)
        self.f2 = nn.Conv2d(cat_channels, cat_channels, 3, padding=1)
        self.f3 = nn.Conv2d(cat_channels, out_channels, 3, padding=1)

    def forward(self, f_img: torch.Tensor, f_ev: torch.Tensor,
                f_ho: torch.Tensor) -> torch.Tensor:
        if not (f_img.shape[-2:] == f_ev.shape[-2:] == f_ho.shape[-2:]):
            raise ValueError("fusion inputs must share spatial size")
        cat = torch.cat([f_img, f_ev, f_ho], dim=1)
        gate = torch.sigmoid(self.f1(cat))
        return self.f3(gate * self.f2(cat) + cat)

    def macs(self, h: int, w: int) -> int:
        c = self.f2.in_channels
        return (_conv_macs(h, w, c, 1, 3) + _conv_macs(h, w, c, c, 3)
                + _conv_macs(h, w, c, self.f3.out_channels, 3))


class ConvGRU(nn.Module):
    """Convolutional gated recurrent unit with 3x3 gates.

    z = sigmoid(Wz * [x, s]), r = sigmoid(Wr * [x, s]),
    h = tanh(Wh * [x, r (.) s]), s' = (1 - z) (.) s + z (.) h.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv_z = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv_r = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv_h = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, state: Optional[torch.Tensor] = None) -> torch.Tensor:
        if state is None:
            state = torch.zeros_like(x)
        if state.shape != x.shape:
            raise ValueError(f"state shape {tuple(state.shape)} does not match "
                             f"input shape {tuple(x.shape)}")
        xs = torch.cat([x, state], dim=1)
        z = torch.sigmoid(self.conv_z(xs))
        r = torch.sigmoid(self.conv_r(xs))
        h = torch.tanh(self.conv_h(torch.cat([x, r * state], dim=1)))
        return (1.0 - z) * state + z * h

    def macs(self, h: int, w: int) -> int:
        c = self.conv_z.out_channels
        return 3 * _conv_macs(h, w, 2 * c, c, 3)


@dataclass
class GruState:
    """Recurrent latent state at the bottleneck scale plus its frame index."""

    hidden: torch.Tensor
    frame_index: int = 0

    def detached(self) -> "GruState":
        return GruState(self.hidden.detach(), self.frame_index)


@dataclass
class ModelConfig:
    """Architecture and preprocessing hyperparameters; JSON round-trippable."""

    base_channels: int = 32
    voxel_bins: int = 32
    illum_hidden: int = 16
    attention_heads: tuple = (4, 2, 1)  # indexed by scale 0, 1, 2
    leaky_slope: float = 0.2
    snr_kernel: int = 5
    snr_eps: float = 1e-4
    snr_tau: float = 0.5
    snr_threshold_mode: str = "soft"
    voxel_norm: str = "none"  # "none" feeds raw polarity sums, "unit" rescales by max |value|
    use_events: bool = True
    use_selection: bool = True
    use_irfs: bool = True
    use_erfs: bool = True
    ones_mask: bool = False
    use_gru: bool = True
    zero_init_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.voxel_bins < 2:
            raise ValueError("voxel_bins must be >= 2")
        if self.snr_threshold_mode not in ("soft", "binary"):
            raise ValueError("snr_threshold_mode must be 'soft' or 'binary'")
        if self.voxel_norm not in ("none", "unit"):
            raise ValueError("voxel_norm must be 'none' or 'unit'")
        self.attention_heads = tuple(int(h) for h in self.attention_heads)
        if len(self.attention_heads) != 3:
            raise ValueError("attention_heads must list one head count per scale")
        if not self.use_selection:
            self.use_irfs = False
            self.use_erfs = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attention_heads"] = list(self.attention_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class EnhanceNet(nn.Module):
    """Full enhancement model: preprocessing, selection, fusion, recurrence.

    forward(img, grid, state) -> (enhanced, new_state, aux) where aux carries
    the light-up image and the normalized SNR map. The enhanced output is
    clamped to [0, 1] in eval mode only; spatial sizes must be divisible by 4.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        heads = cfg.attention_heads

        self.illum = IlluminationEstimator(cfg.illum_hidden)
        self.shallow = ShallowExtractor(cfg.voxel_bins, c)
        self.pyramid_img = FeaturePyramid(c)
        self.pyramid_ev = FeaturePyramid(c)

        widths = (4 * c, 2 * c, c)  # per scale 0, 1, 2
        if cfg.use_irfs:
            self.select_img = nn.ModuleList(
                [RegionalSelect(widths[i], slope=cfg.leaky_slope) for i in range(3)])
        if cfg.use_erfs:
            self.select_ev = nn.ModuleList(
                [RegionalSelect(widths[i], invert_mask=True, slope=cfg.leaky_slope)
                 for i in range(3)])

        self.enc_block2 = TransformerBlock(2 * c, heads[2])
        self.enc_down2 = nn.Conv2d(2 * c, 2 * c, 4, stride=2, padding=1)
        self.enc_block1 = TransformerBlock(2 * c, heads[1])
        self.enc_down1 = nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1)

        self.fuse0 = GatedFusion(3 * widths[0], widths[0])
        if cfg.use_gru:
            self.gru = ConvGRU(widths[0])

        self.dec_block0 = TransformerBlock(4 * c, heads[0])
        self.up1 = nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2)
        self.fuse1 = GatedFusion(3 * widths[1], widths[1])
        self.dec_block1 = TransformerBlock(2 * c, heads[1])
        self.up2 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.fuse2 = GatedFusion(3 * widths[2], widths[2])

        self.head = nn.Conv2d(c, 3, 3, padding=1)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    @staticmethod
    def _check(stage: str, *tensors: torch.Tensor) -> None:
        for t in tensors:
            if not torch.isfinite(t).all():
                raise RuntimeError(f"non-finite activations at stage '{stage}'")

    def forward(self, img: torch.Tensor, grid: torch.Tensor,
                state: Optional[GruState] = None):
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError("img must be (B, 3, H, W)")
        if grid.ndim != 4 or grid.shape[1] != self.cfg.voxel_bins:
            raise ValueError(f"grid must be (B, {self.cfg.voxel_bins}, H, W)")
        if img.shape[-2:] != grid.shape[-2:] or img.shape[0] != grid.shape[0]:
            raise ValueError("img and grid batch/spatial sizes differ")
        h, w = img.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError("spatial sizes must be divisible by 4")

        if not self.cfg.use_events:
            grid = torch.zeros_like(grid)
        elif self.cfg.voxel_norm == "unit":
            peak = grid.abs().amax(dim=(1, 2, 3), keepdim=True)
            grid = grid / torch.clamp_min(peak, 1e-6)

        i_lu, _ = light_up(img, self.illum)
        self._check("light_up", i_lu)

        snr = compute_snr_map(i_lu, self.cfg.snr_kernel, self.cfg.snr_eps)
        self._check("snr_map", snr.data)
        m_pyr = pool_snr_pyramid(snr.data)
        masks = [threshold_snr(m, self.cfg.snr_tau, self.cfg.snr_threshold_mode)
                 for m in m_pyr]

        f_img, f_ev = self.shallow(i_lu, grid)
        self._check("shallow", f_img, f_ev)
        img_pyr = self.pyramid_img(f_img)
        ev_pyr = self.pyramid_ev(f_ev)
        self._check("pyramid", *img_pyr, *ev_pyr)

        sel_img, sel_ev = [], []
        for i in range(3):
            if self.cfg.use_irfs:
                # an all-ones mask ablates the SNR guidance but keeps the blocks
                m = torch.ones_like(masks[i]) if self.cfg.ones_mask else masks[i]
                sel_img.append(self.select_img[i](img_pyr[i], m))
            else:
                sel_img.append(img_pyr[i])
            if self.cfg.use_erfs:
                # zeros invert to an effective all-ones mask inside the block
                m = torch.zeros_like(masks[i]) if self.cfg.ones_mask else masks[i]
                sel_ev.append(self.select_ev[i](ev_pyr[i], m))
            else:
                sel_ev.append(ev_pyr[i])
        self._check("selection", *sel_img, *sel_ev)

        x = torch.cat([f_img, f_ev], dim=1)
        x = self.enc_down2(self.enc_block2(x))
        x = self.enc_down1(self.enc_block1(x))
        self._check("encoder", x)

        x = self.fuse0(sel_img[0], sel_ev[0], x)
        self._check("bottleneck_fusion", x)

        new_state: Optional[GruState] = None
        if self.cfg.use_gru:
            prev = state.hidden if state is not None else None
            x = self.gru(x, prev)
            self._check("gru", x)
            idx = state.frame_index + 1 if state is not None else 1
            new_state = GruState(x, idx)

        x = self.up1(self.dec_block0(x))
        x = self.fuse1(sel_img[1], sel_ev[1], x)
        self._check("decoder_1", x)
        x = self.up2(self.dec_block1(x))
        x = self.fuse2(sel_img[2], sel_ev[2], x)
        self._check("decoder_2", x)

        out = self.head(x) + i_lu
        self._check("head", out)
        if not self.training:
            out = torch.clamp(out, 0.0, 1.0)
        return out, new_state, {"i_lu": i_lu, "m_snr": snr.data}

    def count_macs(self, h: int = 256, w: int = 256) -> int:
        """Analytic multiply-accumulate count for one frame at h x w.

        Covers learned conv/deconv layers and the attention matmuls; bias
        adds, norms, softmax, and elementwise ops are excluded.
        """
        if h % 4 or w % 4:
            raise ValueError("spatial sizes must be divisible by 4")
        c = self.cfg.base_channels
        sizes = ((h // 4, w // 4), (h // 2, w // 2), (h, w))  # per scale
        total = self.illum.macs(h, w) + self.shallow.macs(h, w)
        total += self.pyramid_img.macs(h, w) + self.pyramid_ev.macs(h, w)
        for i in range(3):
            hi, wi = sizes[i]
            if self.cfg.use_irfs:
                total += self.select_img[i].macs(hi, wi)
            if self.cfg.use_erfs:
                total += self.select_ev[i].macs(hi, wi)
        total += self.enc_block2.macs(h, w)
        total += _conv_macs(h // 2, w // 2, 2 * c, 2 * c, 4)
        total += self.enc_block1.macs(h // 2, w // 2)
        total += _conv_macs(h // 4, w // 4, 2 * c, 4 * c, 4)
        total += self.fuse0.macs(h // 4, w // 4)
        if self.cfg.use_gru:
            total += self.gru.macs(h // 4, w // 4)
        total += self.dec_block0.macs(h // 4, w // 4)
        total += (h // 2) * (w // 2) * 2 * c * 4 * c  # deconv2x2: one tap per output
        total += self.fuse1.macs(h // 2, w // 2)
        total += self.dec_block1.macs(h // 2, w // 2)
        total += h * w * c * 2 * c
        total += self.fuse2.macs(h, w)
        total += _conv_macs(h, w, c, 3, 3)
        return total


def build_model(cfg: ModelConfig) -> EnhanceNet:
    """Construct a model with deterministic, seed-controlled initialization."""
    torch.manual_seed(cfg.seed)
    return EnhanceNet(cfg)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_params_flops(cfg: ModelConfig, h: int = 256, w: int = 256):
    """(exact parameter count, analytic MAC estimate) for a config at h x w."""
    model = build_model(cfg)
    return count_params(model), model.count_macs(h, w)


# ----------------------------------------------------------------------
# checkpoint container: magic, version, canonical JSON, named f32 arrays
# ----------------------------------------------------------------------
CKPT_MAGIC = b"EVCK"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, arrays: dict, meta: Optional[dict] = None) -> None:
    """Write named float32 arrays plus config/meta JSON to ``path``."""
    blob = canonical_json({"config": cfg.to_dict(), "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint -> (ModelConfig, arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        magic, version, json_len = struct.unpack("<4sHI", fh.read(10))
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blob = json.loads(fh.read(json_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4", count=n)
            arrays[name] = data.reshape(shape).copy()
    cfg = ModelConfig.from_dict(blob["config"])
    return cfg, arrays, blob.get("meta", {})


def model_arrays(model: EnhanceNet) -> dict:
    return {name: tensor.detach().cpu().numpy()
            for name, tensor in model.state_dict().items()}


def load_model(path) -> tuple:
    """Rebuild a model from a checkpoint, validating shape-by-name exactly."""
    cfg, arrays, meta = load_checkpoint(path)
    model = build_model(cfg)
    expected = model.state_dict()
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"checkpoint parameter names mismatch: missing={missing} "
                         f"extra={extra}")
    state = {}
    for name, tensor in expected.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ValueError(f"shape mismatch for '{name}': checkpoint "
                             f"{tuple(arr.shape)} vs model {tuple(tensor.shape)}")
        state[name] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(state)
    return model, meta
