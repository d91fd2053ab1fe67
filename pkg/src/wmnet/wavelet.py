"""Single-level orthonormal 2D Haar transform on (B, C, H, W) tensors.

Convention for a 2x2 block ``[[a, b], [c, d]]`` (``a, b`` on the top row)::

    ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2

The transform matrix is symmetric and orthogonal, so the inverse uses the
same four combinations. Odd heights/widths are reflect-padded by one row or
column before the forward transform; the original size travels with the
subbands so the inverse can crop it away.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn.functional as F

from wmnet.validation import ValidationError, check_feature_map


class SubbandSet(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor
    # (H, W) of the map that produced these subbands, before any padding
    size: Optional[Tuple[int, int]] = None

    @property
    def highs(self) -> torch.Tensor:
        return torch.cat([self.lh, self.hl, self.hh], dim=1)


def pad_even(x: torch.Tensor) -> torch.Tensor:
    """Reflect-pad the last row/column so height and width are even."""
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x
    # reflect needs at least two samples along the padded axis
    mode = "reflect" if min(h if ph else 2, w if pw else 2) > 1 else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def dwt2(x: torch.Tensor) -> SubbandSet:
    """Forward Haar transform; each subband has shape (B, C, ceil(H/2), ceil(W/2))."""
    check_feature_map(x)
    size = (x.shape[-2], x.shape[-1])
    x = pad_even(x)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return SubbandSet(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
        size=size,
    )


def idwt2(s: SubbandSet, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Inverse Haar transform.

    ``size`` overrides ``s.size`` as the crop target; with neither set the
    output is exactly twice the subband resolution.
    """
    ll, lh, hl, hh = s.ll, s.lh, s.hl, s.hh
    shape = ll.shape
    for name, band in (("lh", lh), ("hl", hl), ("hh", hh)):
        if band.shape != shape:
            raise ValidationError(
                f"subband {name} has shape {tuple(band.shape)}, expected {tuple(shape)}"
            )
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    bsz, ch, h, w = shape
    top = torch.stack([a, b], dim=-1).reshape(bsz, ch, h, 2 * w)
    bottom = torch.stack([c, d], dim=-1).reshape(bsz, ch, h, 2 * w)
    out = torch.stack([top, bottom], dim=-2).reshape(bsz, ch, 2 * h, 2 * w)
    size = size if size is not None else s.size
    if size is not None:
        out = out[..., : size[0], : size[1]]
    return out


def stack_subbands(s: SubbandSet) -> torch.Tensor:
    """Concatenate subbands along channels as [LL | LH | HL | HH]."""
    return torch.cat([s.ll, s.lh, s.hl, s.hh], dim=1)


def split_stacked(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split a 4C-channel stacked map into (LL with C channels, [LH|HL|HH] with 3C)."""
    channels = x.shape[1]
    if channels % 4:
        raise ValidationError(f"stacked channel count {channels} is not divisible by 4")
    c = channels // 4
    return x[:, :c], x[:, c:]


def unstack(x: torch.Tensor, size: Optional[Tuple[int, int]] = None) -> SubbandSet:
    low, high = split_stacked(x)
    return from_low_high(low, high, size)


def from_low_high(
    low: torch.Tensor, high: torch.Tensor, size: Optional[Tuple[int, int]] = None
) -> SubbandSet:
    """Rebuild a SubbandSet from an LL map and its 3C-channel detail stack."""
    c = low.shape[1]
    if high.shape[1] != 3 * c:
        raise ValidationError(f"high band has {high.shape[1]} channels, expected {3 * c}")
    lh, hl, hh = high.split(c, dim=1)
    return SubbandSet(low, lh, hl, hh, size)
