"""Image encoders, fusion variants and the recurrent actor-critic."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_ACTIONS = 4
START_TOKEN = N_ACTIONS


class FusionVariant(str, Enum):
    HYBRID = "hybrid"
    EARLY = "early"
    LATE = "late"


def _gn(c: int) -> nn.GroupNorm:
    # At least two channels per group so 1x1 maps still normalize over something.
    return nn.GroupNorm(math.gcd(c, min(8, max(1, c // 2))), c)


class BasicBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm1 = _gn(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm2 = _gn(c)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        return F.silu(x + self.norm2(self.conv2(h)))


class ResidualEncoder(nn.Module):
    """Four strided stages, each followed by one residual block, average-pooled to a vector."""

    def __init__(self, in_ch: int, widths=(32, 64, 128, 256), out_dim: int = 512):
        super().__init__()
        self.in_ch = in_ch
        layers = []
        prev = in_ch
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1, bias=False), _gn(w), nn.SiLU(), BasicBlock(w)]
            prev = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(prev, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"encoder expects {self.in_ch} channels, got {x.shape[1]}")
        return F.silu(self.head(self.body(x).mean(dim=(2, 3))))


class FusionEncoders(nn.Module):
    """Turns (current, future, goal) images into the policy's visual feature.

    HYBRID: two 6-channel encoders on (x_t, x_fut) and (x_t, x_g).
    EARLY: one 9-channel encoder on all three images.
    LATE: one 3-channel encoder applied to each image, features concatenated.
    EARLY and LATE outputs are linearly projected to the HYBRID width.
    """

    def __init__(self, variant: FusionVariant, widths=(32, 64, 128, 256), d_f: int = 512, freeze_goal: bool = False):
        super().__init__()
        self.variant = FusionVariant(variant)
        self.d_f = d_f
        self.out_dim = 2 * d_f
        if self.variant == FusionVariant.HYBRID:
            self.future_encoder = ResidualEncoder(6, widths, d_f)
            self.goal_encoder = ResidualEncoder(6, widths, d_f)
            if freeze_goal:
                self.goal_encoder.requires_grad_(False)
        elif self.variant == FusionVariant.EARLY:
            self.encoder = ResidualEncoder(9, widths, d_f)
            self.proj = nn.Linear(d_f, self.out_dim)
        else:
            self.encoder = ResidualEncoder(3, widths, d_f)
            self.proj = nn.Linear(3 * d_f, self.out_dim)

    def encode_future_pair(self, x_t, x_fut):
        if x_t.shape[-2:] != x_fut.shape[-2:]:
            raise ValueError("current and future frames must share a resolution")
        return self.future_encoder(torch.cat([x_t, x_fut], dim=1))

    def encode_goal_pair(self, x_t, x_g):
        if x_t.shape[-2:] != x_g.shape[-2:]:
            raise ValueError("current and goal frames must share a resolution")
        return self.goal_encoder(torch.cat([x_t, x_g], dim=1))

    def late_features(self, x_t, x_fut, x_g) -> list[torch.Tensor]:
        return [self.encoder(x) for x in (x_t, x_fut, x_g)]

    def forward(self, x_t, x_fut, x_g):
        """HYBRID returns (f_p, f_o); the others return one projected feature."""
        if not (x_t.shape[-2:] == x_fut.shape[-2:] == x_g.shape[-2:]):
            raise ValueError("all three images must share a resolution")
        if self.variant == FusionVariant.HYBRID:
            return self.encode_future_pair(x_t, x_fut), self.encode_goal_pair(x_t, x_g)
        if self.variant == FusionVariant.EARLY:
            return F.silu(self.proj(self.encoder(torch.cat([x_t, x_fut, x_g], dim=1))))
        return F.silu(self.proj(torch.cat(self.late_features(x_t, x_fut, x_g), dim=1)))

    def features(self, x_t, x_fut, x_g) -> torch.Tensor:
        out = self(x_t, x_fut, x_g)
        return torch.cat(out, dim=1) if isinstance(out, tuple) else out


@dataclass
class PolicyConfig:
    variant: str = "hybrid"
    widths: tuple = (32, 64, 128, 256)
    d_f: int = 512
    d_h: int = 512
    action_embed: int = 32
    freeze_goal_encoder: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class ActorCriticOutput(NamedTuple):
    logits: torch.Tensor
    value: torch.Tensor
    state_embedding: torch.Tensor


class PolicyState(NamedTuple):
    hidden: torch.Tensor
    prev_action: torch.Tensor

    @classmethod
    def initial(cls, batch: int, d_h: int, dtype=torch.float32) -> "PolicyState":
        return cls(torch.zeros(batch, d_h, dtype=dtype), torch.full((batch,), START_TOKEN, dtype=torch.long))


class FusionPolicy(nn.Module):
    """Visual fusion features plus the previous action feed a GRU cell whose
    output drives linear actor and critic heads."""

    def __init__(self, config: PolicyConfig | None = None):
        super().__init__()
        cfg = config or PolicyConfig()
        self.config = cfg
        self.fusion = FusionEncoders(FusionVariant(cfg.variant), cfg.widths, cfg.d_f, cfg.freeze_goal_encoder)
        self.action_embedding = nn.Embedding(N_ACTIONS + 1, cfg.action_embed)
        self.rnn = nn.GRUCell(self.fusion.out_dim + cfg.action_embed, cfg.d_h)
        self.actor = nn.Linear(cfg.d_h, N_ACTIONS)
        self.critic = nn.Linear(cfg.d_h, 1)
        nn.init.orthogonal_(self.actor.weight, gain=0.01)
        nn.init.zeros_(self.actor.bias)

    def initial_state(self, batch: int) -> PolicyState:
        return PolicyState.initial(batch, self.config.d_h, self.actor.weight.dtype)

    def encode(self, x_t, x_fut, x_g) -> torch.Tensor:
        return self.fusion.features(x_t, x_fut, x_g)

    def step(self, feats: torch.Tensor, state: PolicyState) -> tuple[ActorCriticOutput, PolicyState]:
        inp = torch.cat([feats, self.action_embedding(state.prev_action)], dim=1)
        hidden = self.rnn(inp, state.hidden)
        out = ActorCriticOutput(self.actor(hidden), self.critic(hidden).squeeze(-1), hidden)
        return out, PolicyState(hidden, state.prev_action)

    def forward_sequence(self, feats, prev_actions, masks, hidden0):
        """Unroll over time. ``masks[t] == 0`` marks an episode start: hidden is zeroed there.

        feats (T, B, F), prev_actions (T, B), masks (T, B), hidden0 (B, H).
        Returns logits (T, B, A), values (T, B).
        """
        hidden = hidden0
        logits, values = [], []
        for t in range(feats.shape[0]):
            hidden = hidden * masks[t].unsqueeze(-1)
            out, st = self.step(feats[t], PolicyState(hidden, prev_actions[t]))
            hidden = st.hidden
            logits.append(out.logits)
            values.append(out.value)
        return torch.stack(logits), torch.stack(values)


def policy_forward(model: FusionPolicy, f_p, f_o, state: PolicyState) -> tuple[ActorCriticOutput, PolicyState]:
    """One recurrent step on the HYBRID feature pair."""
    return model.step(torch.cat([f_p, f_o], dim=1), state)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def matched_config(base: PolicyConfig, variant: FusionVariant | str, tolerance: float = 0.10) -> PolicyConfig:
    """Config for ``variant`` whose total parameter count is closest to the
    HYBRID model built from ``base`` (encoder widths scaled in steps of 8)."""
    variant = FusionVariant(variant)
    hybrid = PolicyConfig(**{**base.to_dict(), "widths": tuple(base.widths), "variant": "hybrid"})
    target = count_parameters(FusionPolicy(hybrid))
    if variant == FusionVariant.HYBRID:
        return hybrid
    best, best_gap = None, math.inf
    for mult in np.arange(0.8, 2.5, 0.02):
        widths = tuple(max(8, int(round(w * mult / 8.0)) * 8) for w in base.widths)
        cfg = PolicyConfig(**{**hybrid.to_dict(), "widths": widths, "variant": variant.value})
        gap = abs(count_parameters(FusionPolicy(cfg)) - target) / target
        if gap < best_gap:
            best, best_gap = cfg, gap
    if best_gap > tolerance:
        raise ValueError(f"could not match parameter budget within {tolerance:.0%} (best {best_gap:.1%})")
    return best
