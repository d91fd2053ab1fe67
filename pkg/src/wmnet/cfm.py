"""Cross-modality fusion with a state-space sequence block.

Both modalities are pooled to a 16x16 grid, flattened to 256 tokens each,
concatenated infrared-first along the token axis and run through one
selective state-space block. The output is split back per modality and
resized to each input's spatial size.

``CrossAttentionCore`` has the same call signature and stands in for the
transformer fusion used by the baseline detector.
"""

from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from wmnet.ops import resize_to
from wmnet.validation import ValidationError, check_feature_map

POOL_SIZE = 16
CHUNK_SIZE = 64


def pool_to_tokens(x: torch.Tensor, grid: int = POOL_SIZE) -> torch.Tensor:
    """Adaptive-average-pool (B, C, H, W) to ``grid x grid`` and flatten row-major to (B, L, C)."""
    check_feature_map(x)
    pooled = F.adaptive_avg_pool2d(x, grid)
    return pooled.flatten(2).transpose(1, 2)


def tokens_to_map(tokens: torch.Tensor, size: Tuple[int, int], grid: int = POOL_SIZE) -> torch.Tensor:
    b, l, c = tokens.shape
    if l != grid * grid:
        raise ValidationError(f"expected {grid * grid} tokens, got {l}")
    grid_map = tokens.transpose(1, 2).reshape(b, c, grid, grid)
    return resize_to(grid_map, size)


def _segsum(v: torch.Tensor) -> torch.Tensor:
    """``out[..., t, s] = sum(v[..., s+1 : t+1])`` for ``s <= t``; -inf above the diagonal.

    Built from a masked cumulative sum rather than differences of prefix
    sums, so ``-inf`` entries in ``v`` (zero decays) stay well defined.
    """
    q = v.shape[-1]
    expanded = v.unsqueeze(-1).expand(*v.shape, q)
    strict = torch.ones(q, q, dtype=torch.bool, device=v.device).tril(-1)
    summed = expanded.masked_fill(~strict, 0).cumsum(dim=-2)
    return summed.masked_fill(~strict.logical_or(torch.eye(q, dtype=torch.bool, device=v.device)), float("-inf"))


def _decay_matrix(a: torch.Tensor) -> torch.Tensor:
    """Lower-triangular ``prod(a[s+1 : t+1])`` for every (t, s) pair, any real ``a``."""
    mag = a.abs()
    nonzero = mag > 0
    log_mag = torch.where(nonzero, torch.log(torch.where(nonzero, mag, torch.ones_like(mag))),
                          torch.full_like(mag, float("-inf")))
    decay = torch.exp(_segsum(log_mag))
    negatives = torch.nan_to_num(_segsum((a < 0).to(a.dtype)), neginf=0.0)
    sign = 1 - 2 * torch.remainder(negatives, 2)
    return decay * sign


def ssd_scan(
    x: torch.Tensor,
    a: torch.Tensor,
    b: torch.Tensor,
    c: torch.Tensor,
    d: Optional[torch.Tensor] = None,
    chunk_size: int = CHUNK_SIZE,
) -> torch.Tensor:
    """Chunked evaluation of the linear state-space recurrence.

    ``h_t = a_t * h_{t-1} + x_t b_t^T`` and ``y_t = h_t c_t + d * x_t`` with
    ``h_0 = 0``. Shapes: ``x`` (B, L, P), ``a`` (B, L) scalar decay per step,
    ``b`` and ``c`` (B, L, N), ``d`` (P,). The state ``h`` is (P, N).

    Inside a chunk the recurrence is unrolled into a masked decay matrix;
    chunk boundary states are carried sequentially.
    """
    for name, t in (("x", x), ("a", a), ("b", b), ("c", c)):
        if not torch.isfinite(t).all():
            raise ValidationError(f"ssd_scan: {name} contains non-finite values")
    if d is not None and not torch.isfinite(d).all():
        raise ValidationError("ssd_scan: d contains non-finite values")
    bsz, length, p = x.shape
    n = b.shape[-1]
    if a.shape != (bsz, length) or b.shape != (bsz, length, n) or c.shape != (bsz, length, n):
        raise ValidationError(
            f"ssd_scan shape mismatch: x {tuple(x.shape)}, a {tuple(a.shape)}, "
            f"b {tuple(b.shape)}, c {tuple(c.shape)}"
        )

    q = min(chunk_size, length)
    pad = (-length) % q
    if pad:
        # trailing padding never influences earlier outputs
        x = F.pad(x, (0, 0, 0, pad))
        a = F.pad(a, (0, pad), value=1.0)
        b = F.pad(b, (0, 0, 0, pad))
        c = F.pad(c, (0, 0, 0, pad))
    chunks = (length + pad) // q
    xs = x.reshape(bsz, chunks, q, p)
    as_ = a.reshape(bsz, chunks, q)
    bs = b.reshape(bsz, chunks, q, n)
    cs = c.reshape(bsz, chunks, q, n)

    decay = _decay_matrix(as_)  # (B, K, Q, Q)
    scores = cs @ bs.transpose(-1, -2) * decay
    y = scores @ xs

    # decay from chunk start through step t, inclusive
    from_start = as_[..., :1] * decay[..., :, 0]
    # decay from step s (exclusive) to chunk end
    to_end = decay[..., -1, :]
    chunk_states = (xs * to_end.unsqueeze(-1)).transpose(-1, -2) @ bs  # (B, K, P, N)

    h = x.new_zeros(bsz, p, n)
    carried = []
    for k in range(chunks):
        carried.append(h)
        h = from_start[:, k, -1].view(bsz, 1, 1) * h + chunk_states[:, k]
    carried = torch.stack(carried, dim=1)  # state entering each chunk
    y = y + from_start.unsqueeze(-1) * (cs @ carried.transpose(-1, -2))

    y = y.reshape(bsz, chunks * q, p)[:, :length]
    if d is not None:
        y = y + x[:, :length] * d
    return y


class MambaBlock(nn.Module):
    """Single-head selective SSD block: norm, gated projection, scan, norm, projection.

    Decay per step is ``exp(-softplus(a_log) * dt_t)`` which stays in (0, 1);
    ``dt_t``, ``b_t`` and ``c_t`` are projected from each token.
    """

    def __init__(self, d_model: int, d_state: int = 16, expand: int = 2, chunk_size: int = CHUNK_SIZE):
        super().__init__()
        self.d_inner = expand * d_model
        self.d_state = d_state
        self.chunk_size = chunk_size
        self.norm = nn.LayerNorm(d_model)
        self.in_proj = nn.Linear(d_model, 2 * self.d_inner + 2 * d_state + 1, bias=False)
        self.dt_bias = nn.Parameter(torch.full((1,), -1.0))
        self.a_log = nn.Parameter(torch.zeros(1))
        self.d = nn.Parameter(torch.ones(self.d_inner))
        self.out_norm = nn.RMSNorm(self.d_inner, eps=1e-5)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

    def ssd_params(self, tokens: torch.Tensor):
        """Project tokens to (gate z, scan input x, decay a, b, c)."""
        e, n = self.d_inner, self.d_state
        z, xs, b, c, dt = self.in_proj(self.norm(tokens)).split([e, e, n, n, 1], dim=-1)
        dt = F.softplus(dt + self.dt_bias)
        a = torch.exp(-F.softplus(self.a_log) * dt).squeeze(-1)
        return z, F.silu(xs), a, b * dt, c

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        z, xs, a, b, c = self.ssd_params(tokens)
        y = ssd_scan(xs, a, b, c, self.d, chunk_size=self.chunk_size)
        y = self.out_norm(y * F.silu(z))
        return self.out_proj(y)


class CFM(nn.Module):
    def __init__(self, channels: int, d_state: int = 16, expand: int = 2, chunk_size: int = CHUNK_SIZE):
        super().__init__()
        self.channels = channels
        self.mamba = MambaBlock(channels, d_state, expand, chunk_size)

    def forward(self, x_ir: torch.Tensor, x_rgb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x_ir.shape[1] != x_rgb.shape[1]:
            raise ValidationError(
                f"CFM channel mismatch: ir {x_ir.shape[1]} vs rgb {x_rgb.shape[1]}"
            )
        t_ir = pool_to_tokens(x_ir)
        t_rgb = pool_to_tokens(x_rgb)
        fused = self.mamba(torch.cat([t_ir, t_rgb], dim=1))
        out_ir, out_rgb = fused.split(t_ir.shape[1], dim=1)
        return tokens_to_map(out_ir, x_ir.shape[-2:]), tokens_to_map(out_rgb, x_rgb.shape[-2:])


class CrossAttentionCore(nn.Module):
    """Transformer fusion over the joint token sequence (the baseline core).

    Learned positional embeddings, one pre-norm attention layer and a 4x MLP,
    both residual, over the same 2 x 256 pooled tokens the CFM sees.
    """

    def __init__(self, channels: int, heads: int = 1, mlp_ratio: int = 4):
        super().__init__()
        if channels % heads:
            raise ValidationError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.pos = nn.Parameter(torch.randn(1, 2 * POOL_SIZE * POOL_SIZE, channels) * 0.02)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, x_ir: torch.Tensor, x_rgb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x_ir.shape[1] != x_rgb.shape[1]:
            raise ValidationError(
                f"attention core channel mismatch: ir {x_ir.shape[1]} vs rgb {x_rgb.shape[1]}"
            )
        t_ir = pool_to_tokens(x_ir)
        t_rgb = pool_to_tokens(x_rgb)
        t = torch.cat([t_ir, t_rgb], dim=1) + self.pos
        h = self.norm1(t)
        t = t + self.attn(h, h, h, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        out_ir, out_rgb = t.split(t_ir.shape[1], dim=1)
        return tokens_to_map(out_ir, x_ir.shape[-2:]), tokens_to_map(out_rgb, x_rgb.shape[-2:])
