"""Where the policy's future frame comes from."""

from __future__ import annotations

from enum import Enum

import numpy as np
import torch

from navdiff.mazeworld import EpisodeSpec, Pose
from navdiff.oracle import DEFAULT_H, render_future, tokenize


class FutureSource(str, Enum):
    PRIVILEGED_ORACLE = "oracle"
    PREDICTOR = "predictor"
    NONE = "none"


class MissingModelError(ValueError):
    pass


def history_window(frames: list[np.ndarray], h: int) -> list[np.ndarray]:
    """Last ``h`` frames, front-padded with the first one (matches the training tuples)."""
    n = len(frames)
    return [frames[max(0, i)] for i in range(n - h, n)]


class FutureProvider:
    """Produces x_future for one refresh.

    PRIVILEGED_ORACLE renders the expert's k-step lookahead, PREDICTOR samples
    the diffusion model, NONE returns the goal image. ``predictor`` may also be
    a plain callable ``(x_t, x_g, y, x_h, seed) -> frame``.
    """

    def __init__(self, source, k: int, predictor=None, sampler_steps: int = 20, history: int | None = None):
        self.source = FutureSource(source)
        if k < 1:
            raise ValueError("refresh interval k must be >= 1")
        if self.source == FutureSource.PREDICTOR and predictor is None:
            raise MissingModelError("future source 'predictor' requires a trained predictor checkpoint")
        self.k = k
        self.predictor = predictor
        self.sampler_steps = sampler_steps
        if history is None:
            history = predictor.config.history if hasattr(predictor, "config") else DEFAULT_H
        self.history = history
        self.instruction = tokenize()
        self.calls = 0

    def __call__(self, episode: EpisodeSpec, pose: Pose, frames: list[np.ndarray], seed: int = 0) -> np.ndarray:
        self.calls += 1
        if self.source == FutureSource.NONE:
            return episode.goal_image
        if self.source == FutureSource.PRIVILEGED_ORACLE:
            return render_future(episode, pose, self.k)
        x_h = history_window(frames, self.history)
        if not isinstance(self.predictor, torch.nn.Module):
            return self.predictor(frames[-1], episode.goal_image, self.instruction, x_h, seed)
        from navdiff.predictor.model import sample_future

        return sample_future(
            self.predictor, frames[-1], episode.goal_image, self.instruction, x_h, self.sampler_steps, seed
        )
