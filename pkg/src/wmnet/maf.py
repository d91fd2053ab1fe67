"""Misalignment-aware fusion stage wrapped around SAWF.

Each backbone stage owns one ``MAF``. After the interaction step both
modality outputs go through one shared LayerNorm + 1x1 conv, are blended
with their own stage input by ``scaled_add``, and summed into the fused map
for the detection head.
"""

from __future__ import annotations

import logging
from typing import Tuple, Union

import torch
import torch.nn as nn

from wmnet.cfm import CFM, CrossAttentionCore
from wmnet.ops import ChannelLayerNorm, resize_to
from wmnet.sawf import SAWF
from wmnet.validation import ValidationError

log = logging.getLogger(__name__)

SCALE_EPS = 1e-4


def scaled_add(refined: torch.Tensor, skip: torch.Tensor, scale: Union[float, torch.Tensor]) -> torch.Tensor:
    """Blend a refined map with its skip connection.

    For ``0 < scale < 1`` the sum ``(1 + scale) * refined + (2 - scale) * skip``
    is divided by 4, for ``scale >= 1`` by ``(1 + scale) ** 2``. The two
    branches meet exactly at ``scale = 1``. Non-positive scales are clamped
    to a small epsilon with a warning.
    """
    if refined.shape != skip.shape:
        raise ValidationError(
            f"scaled_add shape mismatch {tuple(refined.shape)} vs {tuple(skip.shape)}"
        )
    s = torch.as_tensor(scale, dtype=refined.dtype, device=refined.device)
    if bool((s <= 0).any()):
        log.warning("scaled_add: scale %s <= 0, clamping to %g", s.detach().cpu().tolist(), SCALE_EPS)
        s = s.clamp_min(SCALE_EPS)
    blended = (1 + s) * refined + (2 - s) * skip
    return torch.where(s < 1, blended / 4, blended / (1 + s) ** 2)


class Refine(nn.Module):
    """Per-position channel LayerNorm followed by a point-wise conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.norm(x))


def make_core(kind: str, channels: int) -> nn.Module:
    if kind == "cfm":
        return CFM(channels)
    if kind == "attention":
        return CrossAttentionCore(channels)
    raise ValidationError(f"unknown fusion core {kind!r}")


class MAF(nn.Module):
    """One fusion stage.

    ``core`` is ``"cfm"``, ``"attention"`` or ``None``. With ``sawf=True``
    the core runs inside SAWF on the RGB low band; with ``sawf=False`` it
    runs directly on the two stage inputs. ``core=None`` (only valid
    without SAWF) is plain element-wise addition with no parameters.
    """

    def __init__(self, channels: int, core: str | None = "cfm", sawf: bool = True,
                 w1: float = 0.1, w2: float = 1.0, scale: float = 1.0):
        super().__init__()
        if sawf and core is None:
            raise ValidationError("SAWF needs an interaction core (cfm or attention)")
        self.channels = channels
        self.core_kind = core
        self.use_sawf = sawf
        if core is None:
            self.interact = None
        elif sawf:
            self.interact = SAWF(channels, w1, w2, core=make_core(core, channels))
        else:
            self.interact = make_core(core, channels)
        if self.interact is not None:
            self.refine = Refine(channels)
            self.scale = nn.Parameter(torch.tensor(float(scale)))

    def forward(self, x_ir: torch.Tensor, x_rgb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (ir stage output, rgb stage output, fused map), all at the IR map's size."""
        x_rgb = resize_to(x_rgb, x_ir.shape[-2:])
        if self.interact is None:
            return x_ir, x_rgb, x_ir + x_rgb
        ir_mid, rgb_mid = self.interact(x_ir, x_rgb)
        out_ir = scaled_add(self.refine(ir_mid), x_ir, self.scale)
        out_rgb = scaled_add(self.refine(rgb_mid), x_rgb, self.scale)
        return out_ir, out_rgb, out_rgb + out_ir
