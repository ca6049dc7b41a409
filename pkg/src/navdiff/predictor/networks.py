"""Building blocks of the future-frame predictor.

All nonlinearities are smooth (SiLU/GELU/softmax) so parameter gradients can be
checked against finite differences.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _groups(c: int) -> int:
    return math.gcd(c, 8)


class ConvEncoder2D(nn.Module):
    """Strided conv stack; returns the feature map after every stage."""

    def __init__(self, in_ch: int, channels=(32, 64, 128)):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, channels[0], 3, padding=1)
        stages = []
        prev = channels[0]
        for c in channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, c, 3, stride=2, padding=1),
                    nn.GroupNorm(_groups(c), c),
                    nn.SiLU(),
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.GroupNorm(_groups(c), c),
                    nn.SiLU(),
                )
            )
            prev = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = channels[-1]

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_maps(x)[-1]


class GoalContextEncoder(nn.Module):
    """Compact stand-in for the multimodal LLM.

    Patch tokens of the current and goal images (one shared conv encoder) are
    joined with embedded instruction tokens, mixed by two self-attention layers
    and read out by ``n_tokens`` learned summary queries.
    """

    def __init__(self, d_ctx=256, n_tokens=8, channels=(32, 64, 128), grid=4, vocab_size=16, max_text=16, heads=4):
        super().__init__()
        self.backbone = ConvEncoder2D(3, channels)
        self.grid = grid
        self.patch_proj = nn.Linear(channels[-1], d_ctx)
        self.patch_pos = nn.Parameter(torch.randn(grid * grid, d_ctx) * 0.02)
        self.type_embed = nn.Parameter(torch.randn(3, d_ctx) * 0.02)
        self.word_embed = nn.Embedding(vocab_size, d_ctx)
        self.word_pos = nn.Parameter(torch.randn(max_text, d_ctx) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_ctx, heads, dim_feedforward=2 * d_ctx, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
        )
        self.mixer = nn.TransformerEncoder(layer, num_layers=2, enable_nested_tensor=False)
        self.summary = nn.Parameter(torch.randn(n_tokens, d_ctx) * 0.02)
        self.readout = nn.MultiheadAttention(d_ctx, heads, batch_first=True)
        self.norm = nn.LayerNorm(d_ctx)

    def _patches(self, img: torch.Tensor) -> torch.Tensor:
        fmap = F.adaptive_avg_pool2d(self.backbone(img), self.grid)
        return self.patch_proj(fmap.flatten(2).transpose(1, 2)) + self.patch_pos

    def forward(self, x_t: torch.Tensor, x_g: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-2:] != x_g.shape[-2:]:
            raise ValueError("current and goal images must share a resolution")
        cur = self._patches(x_t) + self.type_embed[0]
        goal = self._patches(x_g) + self.type_embed[1]
        words = self.word_embed(y) + self.word_pos[: y.shape[1]] + self.type_embed[2]
        seq = self.mixer(torch.cat([cur, goal, words], dim=1))
        q = self.summary.unsqueeze(0).expand(seq.shape[0], -1, -1)
        out, _ = self.readout(q, seq, seq, need_weights=False)
        return self.norm(out + q)


class QueryAdapter(nn.Module):
    """Learned queries cross-attending to the context tokens (Q-Former role)."""

    def __init__(self, d_ctx=256, d=256, n_queries=8, heads=4):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, d) * 0.02)
        self.kv = nn.Linear(d_ctx, d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.out_proj = nn.Linear(d, d)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        kv = self.kv(tokens)
        q = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        return self.out_proj(out)


class HistoryEncoder(nn.Module):
    """One row per history frame: shared conv encoder, pooled, plus a temporal offset."""

    def __init__(self, h=4, d=256, channels=(32, 64, 128)):
        super().__init__()
        self.h = h
        self.backbone = ConvEncoder2D(3, channels)
        self.proj = nn.Linear(channels[-1], d)
        self.temporal = nn.Parameter(torch.randn(h, d) * 0.02)

    def forward(self, x_h: torch.Tensor) -> torch.Tensor:
        if x_h.dim() != 5 or x_h.shape[1] != self.h:
            raise ValueError(f"expected history of {self.h} frames, got shape {tuple(x_h.shape)}")
        b, h = x_h.shape[:2]
        feats = self.backbone(x_h.flatten(0, 1)).mean(dim=(2, 3))
        return self.proj(feats).view(b, h, -1) + self.temporal


class FusionBlock(nn.Module):
    """Self-attention over each stream, cross-attention (queries from the
    adapter stream, keys/values from history), then a two-layer MLP; all
    pre-norm residual."""

    def __init__(self, d=256, heads=4):
        super().__init__()
        self.norm_q1 = nn.LayerNorm(d)
        self.self_q = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm_h1 = nn.LayerNorm(d)
        self.self_h = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm_q2 = nn.LayerNorm(d)
        self.norm_h2 = nn.LayerNorm(d)
        self.cross = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm_m = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def zero_init(self) -> None:
        """Zero every residual output projection so the block starts as the identity on f_N."""
        for attn in (self.self_q, self.self_h, self.cross):
            nn.init.zeros_(attn.out_proj.weight)
            nn.init.zeros_(attn.out_proj.bias)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, f_n: torch.Tensor, f_h: torch.Tensor) -> torch.Tensor:
        if f_n.shape[-1] != f_h.shape[-1]:
            raise ValueError("f_N and f_H must share their feature dimension")
        q = self.norm_q1(f_n)
        x = f_n + self.self_q(q, q, q, need_weights=False)[0]
        hh = self.norm_h1(f_h)
        hist = f_h + self.self_h(hh, hh, hh, need_weights=False)[0]
        kv = self.norm_h2(hist)
        x = x + self.cross(self.norm_q2(x), kv, kv, need_weights=False)[0]
        return x + self.mlp(self.norm_m(x))


def timestep_embedding(s: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = s.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_c, out_c, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_c), in_c)
        self.conv1 = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_c)
        self.norm2 = nn.GroupNorm(_groups(out_c), out_c)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.skip = nn.Conv2d(in_c, out_c, 1) if in_c != out_c else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialCrossAttention(nn.Module):
    def __init__(self, c, d_cond, heads):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(c), c)
        self.attn = nn.MultiheadAttention(c, heads, kdim=d_cond, vdim=d_cond, batch_first=True)

    def forward(self, x, cond):
        b, c, hgt, wid = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, cond, cond, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, hgt, wid)


class ConditionalUNet(nn.Module):
    """Noise predictor: encoder-decoder with skips, cross-attention to the
    conditioning tokens at every level, and a pooled token projection added
    to the sinusoidal step embedding."""

    def __init__(self, in_c=6, out_c=3, channels=(64, 128, 256), d_cond=256, heads=4, emb_dim=None):
        super().__init__()
        emb_dim = emb_dim or 4 * channels[0]
        self.emb_base = max(channels[0], 4)
        self.step_mlp = nn.Sequential(nn.Linear(self.emb_base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_pool = nn.Linear(d_cond, emb_dim)
        self.stem = nn.Conv2d(in_c, channels[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        for i, c in enumerate(channels):
            self.down_res.append(ResBlock(prev, c, emb_dim))
            self.down_attn.append(SpatialCrossAttention(c, d_cond, heads))
            self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(channels) - 1 else nn.Identity())
            prev = c
        self.mid_res = ResBlock(prev, prev, emb_dim)
        self.mid_attn = SpatialCrossAttention(prev, d_cond, heads)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(channels))):
            c = channels[i]
            self.up_res.append(ResBlock(prev + c, c, emb_dim))
            self.up_attn.append(SpatialCrossAttention(c, d_cond, heads))
            self.upsample.append(nn.Conv2d(c, channels[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            prev = channels[i - 1] if i > 0 else c
        self.out_norm = nn.GroupNorm(_groups(channels[0]), channels[0])
        self.out_conv = nn.Conv2d(channels[0], out_c, 3, padding=1)

    def forward(self, z: torch.Tensor, s: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        s = torch.as_tensor(s, device=z.device).reshape(-1).expand(z.shape[0])
        emb = self.step_mlp(timestep_embedding(s, self.emb_base).to(z.dtype))
        emb = emb + self.cond_pool(cond.mean(dim=1))
        x = self.stem(z)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            x = attn(res(x, emb), cond)
            skips.append(x)
            x = down(x)
        x = self.mid_attn(self.mid_res(x, emb), cond)
        for res, attn, up in zip(self.up_res, self.up_attn, self.upsample):
            x = attn(res(torch.cat([x, skips.pop()], dim=1), emb), cond)
            if not isinstance(up, nn.Identity):
                x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(x)))
