"""Dual-stream detector: optional WU-Net, a 4-stage conv backbone per modality
with one MAF per stage, and a center-heatmap head on the last three fused maps.
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from wmnet.bench import NUM_CLASSES
from wmnet.cfm import CFM, CrossAttentionCore
from wmnet.config import ExperimentConfig
from wmnet.maf import MAF
from wmnet.ops import count_parameters
from wmnet.wunet import WUNet, WUNetConfig

HEAD_STRIDE = 4


class ConvBNAct(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(c_in, c_out, k, stride, k // 2, bias=False),
            nn.BatchNorm2d(c_out),
            nn.SiLU(inplace=True),
        )


class Stage(nn.Sequential):
    def __init__(self, c_in: int, c_out: int):
        super().__init__(ConvBNAct(c_in, c_out, 3, 2), ConvBNAct(c_out, c_out, 3, 1))


class CenterHead(nn.Module):
    """Anchor-free head at stride 4: class heatmap, box size and sub-cell offset."""

    def __init__(self, in_widths: Sequence[int], width: int = 32, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_widths)
        self.fuse = ConvBNAct(width, width, 3)
        self.heatmap = nn.Conv2d(width, num_classes, 1)
        self.size = nn.Conv2d(width, 2, 1)
        self.offset = nn.Conv2d(width, 2, 1)
        # initial foreground probability ~0.1
        nn.init.constant_(self.heatmap.bias, -math.log((1 - 0.1) / 0.1))

    def forward(self, feats: Sequence[torch.Tensor]) -> Dict[str, torch.Tensor]:
        size = feats[0].shape[-2:]
        x = sum(
            F.interpolate(lat(f), size=size, mode="nearest") if f.shape[-2:] != size else lat(f)
            for lat, f in zip(self.lateral, feats)
        )
        x = self.fuse(x)
        return {"heatmap": self.heatmap(x), "size": self.size(x), "offset": self.offset(x)}


class WMNet(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        self.wunet = WUNet(WUNetConfig()) if cfg.wunet else None
        widths = list(cfg.widths)
        self.rgb_stages = nn.ModuleList(Stage(c_in, c_out) for c_in, c_out in zip([3] + widths, widths))
        self.ir_stages = nn.ModuleList(Stage(c_in, c_out) for c_in, c_out in zip([1] + widths, widths))
        self.mafs = nn.ModuleList(
            MAF(c, core=cfg.core, sawf=cfg.sawf, w1=cfg.w1, w2=cfg.w2) for c in widths
        )
        self.head = CenterHead(widths[1:], cfg.head_width)

    def fused_features(self, rgb: torch.Tensor, ir: torch.Tensor) -> List[torch.Tensor]:
        """All four fused maps ``X_f^1 .. X_f^4``."""
        if self.wunet is not None:
            rgb = self.wunet(rgb, ir)
        fused = []
        for rgb_stage, ir_stage, maf in zip(self.rgb_stages, self.ir_stages, self.mafs):
            ir, rgb, f = maf(ir_stage(ir), rgb_stage(rgb))
            fused.append(f)
        return fused

    def forward(self, rgb: torch.Tensor, ir: torch.Tensor) -> Dict[str, torch.Tensor]:
        return self.head(self.fused_features(rgb, ir)[1:])


def build_model(cfg: ExperimentConfig) -> WMNet:
    return WMNet(cfg)


def core_parameter_counts(channels: int) -> Tuple[int, int]:
    """(CFM core, cross-attention core) parameter counts at one channel width."""
    return count_parameters(CFM(channels)), count_parameters(CrossAttentionCore(channels))
