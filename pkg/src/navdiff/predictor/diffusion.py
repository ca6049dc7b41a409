"""Noise schedule, forward process and image codecs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. Index 0 of ``alpha_bars`` is the clean signal (1.0)."""

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("schedule needs at least two steps")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("require 0 < beta_start < beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps, dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def alpha_bar(self, s, like: torch.Tensor | None = None) -> torch.Tensor:
        table = torch.as_tensor(self.alpha_bars)
        out = table[torch.as_tensor(s, dtype=torch.long)]
        if like is not None:
            out = out.to(like.dtype)
        return out

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def sampling_steps(self, n_steps: int) -> list[int]:
        """``n_steps`` schedule indices evenly spaced from S down to 1."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        n_steps = min(n_steps, self.steps)
        return [int(v) for v in np.round(np.linspace(self.steps, 1, n_steps))]


def _bcast(v: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, *([1] * (ref.dim() - 1))) if v.dim() else v


def forward_noise(z0: torch.Tensor, s, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if eps.shape != z0.shape:
        raise ValueError("eps must be shaped like z0")
    s_t = torch.as_tensor(s, dtype=torch.long)
    if (s_t < 1).any() or (s_t > schedule.steps).any():
        raise ValueError(f"step must lie in [1, {schedule.steps}]")
    ab = _bcast(schedule.alpha_bar(s_t, z0), z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def recover_clean(z_s: torch.Tensor, s, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    ab = _bcast(schedule.alpha_bar(torch.as_tensor(s, dtype=torch.long), z_s), z_s)
    return (z_s - (1.0 - ab).sqrt() * eps) / ab.sqrt()


class PixelCodec:
    """Pixel-space codec: affine map of [0, 1] images onto [-1, 1]."""

    channels = 3
    low, high = -1.0, 1.0

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x * 2.0 - 1.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


class IdentityCodec:
    channels = 3
    low, high = 0.0, 1.0

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z.clamp(0.0, 1.0)


CODECS = {"pixel": PixelCodec, "identity": IdentityCodec}
