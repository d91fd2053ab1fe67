"""Infrared-guided RGB enhancement with a wavelet U-Net.

The encoder is parameter-free: every level is a Haar transform whose LL band
feeds the next level and whose detail bands are kept for the decoder. The
bottleneck mixes both modalities with frequency-aware attention, and the
decoder rebuilds the RGB image from its own low bands while borrowing the
infrared detail bands at every level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import torch
import torch.nn as nn

from wmnet.validation import ValidationError, check_feature_map, check_same_spatial
from wmnet.wavelet import dwt2, from_low_high, idwt2


@dataclass(frozen=True)
class WUNetConfig:
    levels: int = 2
    channels: int = 3
    attention_dim: int = 32

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError("WU-Net needs at least one decomposition level")
        if self.channels < 1 or self.attention_dim < 1:
            raise ValidationError("channels and attention_dim must be positive")


class EncoderLevel(NamedTuple):
    low: torch.Tensor  # (B, C, H/2^k, W/2^k)
    high: torch.Tensor  # (B, 3C, H/2^k, W/2^k)
    size: Tuple[int, int]  # size of the map this level decomposed


def encode(image: torch.Tensor, levels: int) -> List[EncoderLevel]:
    """Multi-level Haar pyramid; entry ``k - 1`` holds level ``k``."""
    if levels < 1:
        raise ValidationError("encode needs levels >= 1")
    check_feature_map(image, "image")
    pyramid = []
    current = image
    for _ in range(levels):
        bands = dwt2(current)
        pyramid.append(EncoderLevel(bands.ll, bands.highs, bands.size))
        current = bands.ll
    return pyramid


class FAAttention(nn.Module):
    """Frequency-aware cross-modal attention at the U-Net bottleneck.

    Tokens are the flattened bottleneck positions. One point-wise linear
    layer maps the concatenated low bands ``[ir, rgb]`` (2C channels) to
    q/k/v, a second maps the concatenated detail bands (6C channels) to q/k.
    The attention map is the low-band softmax modulated by
    ``1 + softmax`` of the detail-band logits.
    """

    def __init__(self, channels: int, dim: int = 32):
        super().__init__()
        self.dim = dim
        self.qkv_low = nn.Linear(2 * channels, 3 * dim)
        self.qk_high = nn.Linear(6 * channels, 2 * dim)
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, channels)

    def weights(self, f_low: torch.Tensor, f_high: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        """Return (W_A, low softmax, high softmax, v) for token inputs (B, L, *)."""
        q, k, v = self.qkv_low(f_low).split(self.dim, dim=-1)
        qh, kh = self.qk_high(f_high).split(self.dim, dim=-1)
        scale = 1.0 / math.sqrt(self.dim)
        a_low = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
        a_high = torch.softmax(qh @ kh.transpose(-1, -2) * scale, dim=-1)
        return a_low * (1 + a_high), a_low, a_high, v

    def forward(self, ir_low, rgb_low, ir_high, rgb_high):
        for name, t in (("rgb_low", rgb_low), ("ir_high", ir_high), ("rgb_high", rgb_high)):
            check_same_spatial(ir_low, t, f"fa_attention {name}")
        b, c, h, w = rgb_low.shape
        f_low = torch.cat([ir_low, rgb_low], dim=1).flatten(2).transpose(1, 2)
        f_high = torch.cat([ir_high, rgb_high], dim=1).flatten(2).transpose(1, 2)
        w_a, _, _, v = self.weights(f_low, f_high)
        out = self.proj(self.norm(w_a @ v))
        return out.transpose(1, 2).reshape(b, c, h, w)


def decode(
    rgb_pyramid: List[EncoderLevel], ir_pyramid: List[EncoderLevel], bottleneck: torch.Tensor
) -> torch.Tensor:
    """Rebuild the RGB image from the bottleneck.

    Step ``j`` adds the RGB LL band of encoder level ``n - j + 1`` to the
    running feature and inverts the transform with that level's infrared
    detail bands.
    """
    if len(rgb_pyramid) != len(ir_pyramid):
        raise ValidationError(
            f"pyramid depth mismatch: rgb {len(rgb_pyramid)} vs ir {len(ir_pyramid)}"
        )
    feature = bottleneck
    for rgb_level, ir_level in zip(reversed(rgb_pyramid), reversed(ir_pyramid)):
        check_same_spatial(feature, rgb_level.low, "decode")
        bands = from_low_high(feature + rgb_level.low, ir_level.high)
        feature = idwt2(bands, size=rgb_level.size)
    return feature


def replicate_ir(ir: torch.Tensor, channels: int) -> torch.Tensor:
    if ir.shape[1] == channels:
        return ir
    if ir.shape[1] == 1:
        return ir.expand(-1, channels, -1, -1)
    raise ValidationError(f"infrared has {ir.shape[1]} channels, expected 1 or {channels}")


class WUNet(nn.Module):
    def __init__(self, cfg: WUNetConfig = WUNetConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.attention = FAAttention(c, cfg.attention_dim)
        self.conv = nn.Conv2d(c, c, 3, padding=1)
        self.scale = nn.Parameter(torch.ones(c))
        self.reset_residual()

    @torch.no_grad()
    def reset_residual(self, noise: float = 1e-2) -> None:
        """Identity-plus-noise init for the 3x3 residual convolution."""
        w = torch.randn_like(self.conv.weight) * noise
        for i in range(self.cfg.channels):
            w[i, i, 1, 1] += 1.0
        self.conv.weight.copy_(w)
        self.conv.bias.zero_()

    def forward(self, rgb: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
        c, n = self.cfg.channels, self.cfg.levels
        check_feature_map(rgb, "rgb")
        if rgb.shape[1] != c:
            raise ValidationError(f"rgb has {rgb.shape[1]} channels, expected {c}")
        ir = replicate_ir(check_feature_map(ir, "ir"), c)
        check_same_spatial(rgb, ir, "wunet inputs")
        rgb_pyr = encode(rgb, n)
        ir_pyr = encode(ir, n)
        bottleneck = self.attention(
            ir_pyr[-1].low, rgb_pyr[-1].low, ir_pyr[-1].high, rgb_pyr[-1].high
        )
        decoded = decode(rgb_pyr, ir_pyr, bottleneck)
        return decoded + self.scale.view(1, -1, 1, 1) * self.conv(rgb)

