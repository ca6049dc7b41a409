"""Single-episode action selection around a trained policy."""

from __future__ import annotations

import numpy as np
import torch

from navdiff.mazeworld import Action
from navdiff.policy.networks import FusionPolicy, PolicyState


def to_batch(*images: np.ndarray) -> list[torch.Tensor]:
    return [torch.as_tensor(np.asarray(im), dtype=torch.float32).permute(2, 0, 1)[None] for im in images]


class PolicyAgent:
    """Keeps the recurrent state between calls; samples actions from a seeded generator."""

    def __init__(self, model: FusionPolicy, greedy: bool = False):
        self.model = model
        self.greedy = greedy
        self.reset(0)

    def reset(self, seed: int) -> None:
        self.state = self.model.initial_state(1)
        self.gen = torch.Generator().manual_seed(int(seed))

    @torch.no_grad()
    def act(self, x_t, x_fut, x_g) -> Action:
        was_training = self.model.training
        self.model.eval()
        feats = self.model.encode(*to_batch(x_t, x_fut, x_g))
        out, st = self.model.step(feats, self.state)
        self.model.train(was_training)
        if self.greedy:
            a = int(out.logits.argmax(-1))
        else:
            a = int(torch.multinomial(torch.softmax(out.logits, -1), 1, generator=self.gen))
        self.state = PolicyState(st.hidden, torch.tensor([a]))
        return Action(a)


class ScriptedAgent:
    """Replays a fixed action list (then STOP); handy for loop tests."""

    def __init__(self, actions):
        self.actions = [Action(a) for a in actions]
        self.reset(0)

    def reset(self, seed: int) -> None:
        self.i = 0

    def act(self, x_t, x_fut, x_g) -> Action:
        a = self.actions[self.i] if self.i < len(self.actions) else Action.STOP
        self.i += 1
        return a
