"""Predictor composition, training objective and deterministic sampler."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from navdiff.oracle import VOCAB, TrainingTuple
from navdiff.predictor.diffusion import CODECS, NoiseSchedule, forward_noise
from navdiff.predictor.networks import (
    ConditionalUNet,
    FusionBlock,
    GoalContextEncoder,
    HistoryEncoder,
    QueryAdapter,
)


@dataclass
class PredictorConfig:
    resolution: int = 64
    history: int = 4
    d: int = 256
    n_queries: int = 8
    d_ctx: int = 256
    n_ctx_tokens: int = 8
    ctx_grid: int = 4
    encoder_channels: tuple = (32, 64, 128)
    unet_channels: tuple = (64, 128, 256)
    heads: int = 4
    unet_heads: int = 4
    unet_emb_dim: int | None = None
    max_text: int = 16
    codec: str = "pixel"
    schedule: dict = field(default_factory=lambda: NoiseSchedule().to_dict())
    sampler_steps: int = 20
    # "eps": the network output is the noise estimate directly. "residual": a
    # scaled correction to the noise implied by copying x_t. "clean": a
    # correction to x_t itself, so a zero output predicts no change.
    output: str = "clean"
    residual_scale: float = 0.25

    def __post_init__(self):
        if self.output not in ("eps", "residual", "clean"):
            raise ValueError(f"unknown output parameterization {self.output!r}")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["unet_channels"] = tuple(d["unet_channels"])
        return cls(**d)


class PredictorFeatures(NamedTuple):
    f_n: torch.Tensor
    f_h: torch.Tensor
    f_star: torch.Tensor


class Predictor(nn.Module):
    def __init__(self, config: PredictorConfig | None = None):
        super().__init__()
        cfg = config or PredictorConfig()
        self.config = cfg
        self.schedule = NoiseSchedule(**cfg.schedule)
        self.codec = CODECS[cfg.codec]()
        self.context = GoalContextEncoder(
            cfg.d_ctx, cfg.n_ctx_tokens, cfg.encoder_channels, cfg.ctx_grid, len(VOCAB), cfg.max_text, cfg.heads
        )
        self.adapter = QueryAdapter(cfg.d_ctx, cfg.d, cfg.n_queries, cfg.heads)
        self.history = HistoryEncoder(cfg.history, cfg.d, cfg.encoder_channels)
        self.fusion = FusionBlock(cfg.d, cfg.heads)
        c = self.codec.channels
        self.denoiser = ConditionalUNet(2 * c, c, cfg.unet_channels, cfg.d, cfg.unet_heads, cfg.unet_emb_dim)
        # Base conditioning tokens; the fused features are added on top. In the
        # observation-only stage these are the only conditioning.
        self.cond_offset = nn.Parameter(torch.randn(cfg.n_queries, cfg.d) * 0.02)
        self.conditioned = True
        if cfg.output != "eps":
            nn.init.zeros_(self.denoiser.out_conv.weight)
            nn.init.zeros_(self.denoiser.out_conv.bias)

    def begin_conditioned_stage(self) -> None:
        """Start end-to-end training from an observation-only denoiser.

        Zeroing the adapter and fusion output projections makes f_star == 0 at
        the switch, so the denoiser sees exactly its stage-one conditioning.
        """
        nn.init.zeros_(self.adapter.out_proj.weight)
        nn.init.zeros_(self.adapter.out_proj.bias)
        self.fusion.zero_init()
        self.conditioned = True

    def features(self, x_t, x_g, y, x_h) -> PredictorFeatures:
        tokens = self.context(x_t, x_g, y)
        f_n = self.adapter(tokens)
        f_h = self.history(x_h)
        return PredictorFeatures(f_n, f_h, self.fusion(f_n, f_h))

    def condition(self, batch: dict) -> torch.Tensor:
        b = batch["x_t"].shape[0]
        if not self.conditioned:
            return self.cond_offset.unsqueeze(0).expand(b, -1, -1)
        f_star = self.features(batch["x_t"], batch["x_g"], batch["y"], batch["x_h"]).f_star
        return self.cond_offset + f_star

    def predict_noise(self, z_s: torch.Tensor, s, batch: dict, cond: torch.Tensor | None = None) -> torch.Tensor:
        if cond is None:
            cond = self.condition(batch)
        prior = self.codec.encode(batch["x_t"]).to(z_s.dtype)
        if self.config.output == "clean":
            # The network sees sqrt(ab) * (z_s - sqrt(ab) * prior): the evidence of
            # change from x_t, which fades to zero where noise dominates.
            ab = self.schedule.alpha_bar(torch.as_tensor(s, dtype=torch.long), z_s).reshape(-1, 1, 1, 1)
            innovation = ab.sqrt() * (z_s - ab.sqrt() * prior)
            raw = self.denoiser(torch.cat([innovation, prior], dim=1), s, cond)
            return clean_noise(raw, z_s, prior, s, self.schedule)
        raw = self.denoiser(torch.cat([z_s, prior], dim=1), s, cond)
        if self.config.output == "eps":
            return raw
        return residual_noise(raw, z_s, prior, s, self.schedule, self.config.residual_scale)


def clean_noise(raw, z_s, prior, s, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise implied by the clean estimate ``prior + raw``."""
    ab = schedule.alpha_bar(torch.as_tensor(s, dtype=torch.long), z_s)
    ab = ab.reshape(-1, *([1] * (z_s.dim() - 1))) if ab.dim() else ab
    return (z_s - ab.sqrt() * (prior + raw)) / (1.0 - ab).sqrt()


def residual_noise(raw, z_s, prior, s, schedule: NoiseSchedule, scale: float) -> torch.Tensor:
    """Noise estimate from a preconditioned correction around ``prior``.

    With sigma^2 = (1 - ab) / ab the clean estimate is
    prior + c_skip (z_s / sqrt(ab) - prior) + c_out raw, c_skip = scale^2 / (sigma^2 + scale^2),
    c_out = sigma scale / sqrt(sigma^2 + scale^2). Rewritten in noise space so no
    term is divided by a vanishing sqrt(ab). raw == 0 reproduces the prior
    wherever the noise dominates.
    """
    ab = schedule.alpha_bar(torch.as_tensor(s, dtype=torch.long), z_s)
    ab = ab.reshape(-1, *([1] * (z_s.dim() - 1))) if ab.dim() else ab
    sig2 = (1.0 - ab) / ab
    denom = sig2 + scale**2
    eps_prior = (z_s - ab.sqrt() * prior) / (1.0 - ab).sqrt()
    return (sig2 / denom) * eps_prior - (scale / denom.sqrt()) * raw


def _chw(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img), dtype=torch.float32)
    return t.permute(2, 0, 1)


def collate(tuples: Sequence[TrainingTuple] | TrainingTuple) -> dict:
    if isinstance(tuples, TrainingTuple):
        tuples = [tuples]
    res = {tuple(np.shape(x)) for t in tuples for x in (t.x_t, t.x_tk, t.x_g, *t.x_h)}
    if len(res) != 1:
        raise ValueError(f"mixed image shapes in batch: {sorted(res)}")
    return {
        "x_t": torch.stack([_chw(t.x_t) for t in tuples]),
        "x_tk": torch.stack([_chw(t.x_tk) for t in tuples]),
        "x_g": torch.stack([_chw(t.x_g) for t in tuples]),
        "x_h": torch.stack([torch.stack([_chw(f) for f in t.x_h]) for t in tuples]),
        "y": torch.as_tensor([list(t.y) for t in tuples], dtype=torch.long),
    }


def to_dtype(batch: dict, dtype: torch.dtype) -> dict:
    return {k: (v.to(dtype) if v.is_floating_point() else v) for k, v in batch.items()}


def diffusion_loss(model, batch, schedule: NoiseSchedule, rng: torch.Generator | None = None, s=None, eps=None) -> torch.Tensor:
    """Mean squared error between injected and predicted noise.

    ``model`` needs ``codec`` and ``predict_noise(z_s, s, batch)``. Steps and
    noise are drawn from ``rng`` unless given explicitly.
    """
    if isinstance(batch, (TrainingTuple, list, tuple)):
        batch = collate(batch)
    codec = model.codec
    z0 = codec.encode(batch["x_tk"])
    b = z0.shape[0]
    if s is None:
        s = torch.randint(1, schedule.steps + 1, (b,), generator=rng)
    if eps is None:
        eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_s = forward_noise(z0, s, eps, schedule)
    eps_hat = model.predict_noise(z_s, s, batch)
    return ((eps - eps_hat) ** 2).mean()


@torch.no_grad()
def sample(model, batch: dict, n_steps: int = 20, seed: int = 0) -> torch.Tensor:
    """Deterministic (eta = 0) reverse process from seeded noise; returns [0, 1] images."""
    schedule = model.schedule
    codec = model.codec
    x_t = batch["x_t"]
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((x_t.shape[0], codec.channels, *x_t.shape[-2:]), generator=gen, dtype=x_t.dtype)
    cond = model.condition(batch) if hasattr(model, "condition") else None
    steps = schedule.sampling_steps(n_steps)
    abars = schedule.alpha_bars
    for i, s in enumerate(steps):
        ab = float(abars[s])
        ab_prev = float(abars[steps[i + 1]]) if i + 1 < len(steps) else 1.0
        s_vec = torch.full((x_t.shape[0],), s, dtype=torch.long)
        eps = model.predict_noise(z, s_vec, batch, cond) if cond is not None else model.predict_noise(z, s_vec, batch)
        z0 = ((z - (1.0 - ab) ** 0.5 * eps) / ab**0.5).clamp(codec.low, codec.high)
        eps = (z - ab**0.5 * z0) / (1.0 - ab) ** 0.5
        z = ab_prev**0.5 * z0 + (1.0 - ab_prev) ** 0.5 * eps
    return codec.decode(z)


def sample_future(model, x_t, x_g, y, x_h, n_steps: int = 20, seed: int = 0) -> np.ndarray:
    """Predict one future frame; numpy (R, R, 3) in and out."""
    t = TrainingTuple(np.asarray(x_t), np.asarray(x_t), [np.asarray(f) for f in x_h], list(y), np.asarray(x_g))
    batch = collate([t])
    was_training = model.training
    model.eval()
    out = sample(model, batch, n_steps, seed)
    model.train(was_training)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


@torch.no_grad()
def heldout_loss(model, tuples: Sequence[TrainingTuple], batch_size: int = 64, seed: int = 1234) -> float:
    """Objective on fixed (s, eps) draws so repeated evaluation is exact."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for i in range(0, len(tuples), batch_size):
        chunk = tuples[i : i + batch_size]
        loss = diffusion_loss(model, collate(chunk), model.schedule, gen)
        total += float(loss) * len(chunk)
        count += len(chunk)
    model.train(was_training)
    return total / max(count, 1)
