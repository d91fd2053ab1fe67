"""Self-adaptive wavelet fusion with the correlated feature enhancer.

Infrared is the reference modality. The RGB map is decomposed into Haar
subbands, mixed by a 3x3 conv across all four bands and gated per channel
by ``w1`` before it can touch the interaction core, which limits how much
misaligned RGB content reaches the infrared stream. The core's RGB output
is folded back into every subband and inverted to the spatial domain, then
a ``w2``-weighted conv skip of the raw RGB map is added.
"""

from __future__ import annotations

from typing import Tuple

import torch
import torch.nn as nn

from wmnet.cfm import CFM
from wmnet.ops import resize_to
from wmnet.validation import ValidationError, check_feature_map, check_same_spatial
from wmnet.wavelet import dwt2, from_low_high, idwt2, split_stacked, stack_subbands


def enhance_correlated(
    rgb_low: torch.Tensor,
    rgb_high: torch.Tensor,
    rgb_core: torch.Tensor,
    size: Tuple[int, int] | None = None,
) -> torch.Tensor:
    """Inverse-transform ``(low + core, high + core)`` with ``core`` broadcast to all three detail bands."""
    check_same_spatial(rgb_low, rgb_core, "enhance_correlated")
    if rgb_core.shape[1] != rgb_low.shape[1]:
        raise ValidationError(
            f"core output has {rgb_core.shape[1]} channels, expected {rgb_low.shape[1]}"
        )
    high = rgb_high + rgb_core.repeat(1, 3, 1, 1)
    return idwt2(from_low_high(rgb_low + rgb_core, high), size=size)


class SAWF(nn.Module):
    """``core`` is any module mapping (ir, rgb_low) to (ir', rgb') at the input sizes."""

    def __init__(self, channels: int, w1: float = 0.1, w2: float = 1.0, core: nn.Module | None = None):
        super().__init__()
        self.channels = channels
        self.band_conv = nn.Conv2d(4 * channels, 4 * channels, 3, padding=1, bias=False)
        self.w1 = nn.Parameter(torch.full((4 * channels,), float(w1)))
        self.skip_conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.w2 = nn.Parameter(torch.full((channels,), float(w2)))
        self.core = core if core is not None else CFM(channels)

    def modulate_decompose(self, x_rgb: torch.Tensor):
        """Returns (LL with C channels, details with 3C channels, original size)."""
        bands = dwt2(x_rgb)
        mixed = self.w1.view(1, -1, 1, 1) * self.band_conv(stack_subbands(bands))
        low, high = split_stacked(mixed)
        return low, high, bands.size

    def forward(self, x_ir: torch.Tensor, x_rgb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        check_feature_map(x_ir, "x_ir")
        check_feature_map(x_rgb, "x_rgb")
        if x_ir.shape[1] != x_rgb.shape[1] or x_ir.shape[1] != self.channels:
            raise ValidationError(
                f"SAWF channel mismatch: ir {x_ir.shape[1]}, rgb {x_rgb.shape[1]}, "
                f"expected {self.channels}"
            )
        x_rgb = resize_to(x_rgb, x_ir.shape[-2:])
        rgb_low, rgb_high, size = self.modulate_decompose(x_rgb)
        ir_out, rgb_core = self.core(x_ir, rgb_low)
        rgb_core = resize_to(rgb_core, rgb_low.shape[-2:])
        x_m = enhance_correlated(rgb_low, rgb_high, rgb_core, size)
        rgb_out = x_m + self.w2.view(1, -1, 1, 1) * self.skip_conv(x_rgb)
        return ir_out, rgb_out
