"""Navigation metrics (SR, SPL) and image metrics (PSNR, Frechet distance, perceptual distance)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

PSNR_CAP = 100.0
FRECHET_EPS = 1e-6
REPORT_FORMAT = "navdiff.eval_report/1"


def spl(success: bool, shortest: float, actual: float) -> float:
    """Success weighted by path length: S * l / max(p, l)."""
    if shortest <= 0:
        raise ValueError("shortest path length must be positive")
    if actual < 0:
        raise ValueError("actual path length must be non-negative")
    if not success:
        return 0.0
    return shortest / max(actual, shortest)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance_from_moments(mu_a, cov_a, mu_b, cov_b, eps: float = FRECHET_EPS) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2), with eps*I added to both covariances."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    d = mu_a.shape[0]
    a = np.atleast_2d(cov_a).astype(np.float64) + eps * np.eye(d)
    b = np.atleast_2d(cov_b).astype(np.float64) + eps * np.eye(d)
    ra = _sqrtm_psd(a)
    cross = _sqrtm_psd(ra @ b @ ra)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(a) + np.trace(b) - 2.0 * np.trace(cross))


def frechet_feature_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("feature sets must be (n, d) arrays with the same d")
    d = fa.shape[1]
    if fa.shape[0] <= d or fb.shape[0] <= d:
        raise ValueError(f"each set needs more than d={d} samples")
    return frechet_distance_from_moments(
        fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False)
    )


def encoder_extractor(encoder: torch.nn.Module) -> Callable[[np.ndarray], list[torch.Tensor]]:
    """Wrap a conv encoder with ``feature_maps`` as an Observation -> feature maps extractor."""

    @torch.no_grad()
    def extract(obs: np.ndarray) -> list[torch.Tensor]:
        x = torch.as_tensor(np.asarray(obs), dtype=torch.float32).permute(2, 0, 1)[None]
        return encoder.feature_maps(x)

    return extract


def perceptual_distance(extractor, a: np.ndarray, b: np.ndarray) -> float:
    """Sum over layers of the spatially averaged squared distance between
    channel-normalized feature maps."""
    total = 0.0
    for fa, fb in zip(extractor(a), extractor(b)):
        na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total


def default_extractor(seed: int = 0, channels=(16, 32, 64)):
    """The predictor's 2D encoder architecture with fixed seeded weights."""
    from navdiff.predictor.networks import ConvEncoder2D

    torch.manual_seed(seed)
    enc = ConvEncoder2D(3, channels).eval()
    return encoder_extractor(enc)


@dataclass
class EpisodeRecord:
    episode_id: str
    success: bool
    steps: int
    path_length: float
    shortest_length: float
    spl: float = field(default=0.0)

    def __post_init__(self):
        self.spl = spl(self.success, self.shortest_length, self.path_length)

    def to_dict(self) -> dict:
        return {
            "id": self.episode_id,
            "success": bool(self.success),
            "steps": int(self.steps),
            "path_length": float(self.path_length),
            "shortest_length": float(self.shortest_length),
            "spl": float(self.spl),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        return cls(d["id"], bool(d["success"]), int(d["steps"]), float(d["path_length"]), float(d["shortest_length"]))


@dataclass
class EvalReport:
    sr: float
    spl: float
    records: list[EpisodeRecord]
    config: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord], config: dict | None = None) -> "EvalReport":
        if not records:
            raise ValueError("cannot aggregate an empty record set")
        ordered = sorted(records, key=lambda r: r.episode_id)
        sr = math.fsum(1.0 for r in ordered if r.success) / len(ordered)
        mean_spl = math.fsum(r.spl for r in ordered) / len(ordered)
        return cls(sr, mean_spl, ordered, dict(config or {}))

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "sr": self.sr,
            "spl": self.spl,
            "n_episodes": len(self.records),
            "records": [r.to_dict() for r in self.records],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported report format {doc.get('format')!r}")
        records = [EpisodeRecord.from_dict(r) for r in doc["records"]]
        return cls(float(doc["sr"]), float(doc["spl"]), records, doc.get("config", {}))
