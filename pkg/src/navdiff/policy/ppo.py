"""Reward shaping, GAE and the recurrent PPO update."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

SUCCESS_BONUS = 2.5
SLACK_PENALTY = 0.003


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs_per_batch: int = 4
    n_envs: int = 8
    rollout_length: int = 128
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 2.5e-4
    max_grad_norm: float = 0.5
    n_minibatches: int = 2

    def __post_init__(self):
        checks = {
            "gamma": 0.0 < self.gamma <= 1.0,
            "gae_lambda": 0.0 <= self.gae_lambda <= 1.0,
            "clip": 0.0 < self.clip < 1.0,
            "epochs_per_batch": self.epochs_per_batch >= 1,
            "n_envs": self.n_envs >= 1,
            "rollout_length": self.rollout_length >= 1,
            "entropy_coef": self.entropy_coef >= 0.0,
            "value_coef": self.value_coef >= 0.0,
            "lr": 0.0 < self.lr < 1.0,
            "max_grad_norm": self.max_grad_norm > 0.0,
            "n_minibatches": 1 <= self.n_minibatches <= self.n_envs,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid PPO config fields: {bad}")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_reward(prev_geo: float, new_geo: float, success: bool, terminal: bool = False) -> float:
    """Success bonus plus geodesic progress minus a per-step slack."""
    if prev_geo < 0 or new_geo < 0:
        raise ValueError("geodesic distances must be non-negative")
    return SUCCESS_BONUS * float(bool(success)) + (prev_geo - new_geo) - SLACK_PENALTY


def compute_gae(rewards, values, dones, gamma: float, lam: float, bootstrap=None):
    """Generalized advantage estimates over a time-major sequence.

    ``bootstrap`` is V(s_T) for the state after the last step (zero if omitted).
    Works on (T,) or (T, N) arrays; returns float64 (advantages, returns).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if not (r.shape == v.shape == d.shape):
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    next_v = np.zeros(r.shape[1:]) if bootstrap is None else np.asarray(bootstrap, dtype=np.float64)
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        nonterm = 1.0 - d[t]
        delta = r[t] + gamma * next_v * nonterm - v[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


@dataclass
class RolloutBatch:
    """Time-major rollout of N environments over T steps.

    ``masks[t, n] == 0`` where step t begins a new episode (hidden reset, prev
    action START). ``hidden0`` is the recurrent state before step 0 and
    ``hiddens[t]`` the state each step started from.
    """

    x_t: torch.Tensor
    x_future: torch.Tensor
    x_g: torch.Tensor
    actions: torch.Tensor
    prev_actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    masks: torch.Tensor
    hidden0: torch.Tensor
    hiddens: torch.Tensor
    bootstrap_value: torch.Tensor
    advantages: torch.Tensor | None = None
    returns: torch.Tensor | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.actions.shape)

    def finalize(self, gamma: float, lam: float) -> "RolloutBatch":
        adv, ret = compute_gae(
            self.rewards.numpy(), self.values.numpy(), self.dones.numpy(), gamma, lam, self.bootstrap_value.numpy()
        )
        self.advantages = torch.as_tensor(adv, dtype=torch.float32)
        self.returns = torch.as_tensor(ret, dtype=torch.float32)
        return self


def ppo_loss(model, batch: RolloutBatch, env_idx, config: PPOConfig, advantages: torch.Tensor):
    """Clipped surrogate + value MSE - entropy bonus on the env columns ``env_idx``.

    The recurrence is replayed over the full time axis from ``hidden0``.
    """
    T = batch.actions.shape[0]
    n = len(env_idx)
    sel = lambda x: x[:, env_idx]  # noqa: E731
    flat = lambda x: sel(x).reshape(T * n, *x.shape[2:])  # noqa: E731
    feats = model.encode(flat(batch.x_t), flat(batch.x_future), flat(batch.x_g)).view(T, n, -1)
    logits, values = model.forward_sequence(
        feats, sel(batch.prev_actions), sel(batch.masks).to(feats.dtype), batch.hidden0[env_idx].to(feats.dtype)
    )
    logp_all = torch.log_softmax(logits, dim=-1)
    actions = sel(batch.actions)
    logp = logp_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(logp - sel(batch.log_probs).to(logp.dtype))
    adv = advantages[:, env_idx].to(logp.dtype)
    surr = torch.min(ratio * adv, ratio.clamp(1.0 - config.clip, 1.0 + config.clip) * adv)
    policy_loss = -surr.mean()
    value_loss = ((values - sel(batch.returns).to(values.dtype)) ** 2).mean()
    entropy = -(logp_all.exp() * logp_all).sum(-1).mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    stats = {
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy.detach()),
        "clip_frac": float(((ratio.detach() - 1.0).abs() > config.clip).float().mean()),
    }
    return loss, stats


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    std = adv.std(unbiased=False)
    return (adv - adv.mean()) / (std + 1e-8)


def ppo_update(model: nn.Module, optimizer, batch: RolloutBatch, config: PPOConfig, rng=None) -> dict:
    """Several epochs of minibatched clipped-PPO on one rollout.

    Minibatches split the environment axis so each keeps whole sequences.
    A non-finite loss skips that optimizer step and is counted in ``aborted``.
    """
    if batch.advantages is None:
        batch.finalize(config.gamma, config.gae_lambda)
    rng = rng if rng is not None else np.random.default_rng(0)
    adv = normalize_advantages(batch.advantages)
    n_envs = batch.actions.shape[1]
    n_mb = min(config.n_minibatches, n_envs)
    totals: dict[str, float] = {}
    count = 0
    aborted = 0
    params = [p for p in model.parameters() if p.requires_grad]
    for _ in range(config.epochs_per_batch):
        for chunk in np.array_split(rng.permutation(n_envs), n_mb):
            loss, stats = ppo_loss(model, batch, torch.as_tensor(chunk), config, adv)
            if not math.isfinite(float(loss.detach())):
                log.warning("non-finite PPO loss %s; update skipped", float(loss.detach()))
                aborted += 1
                continue
            optimizer.zero_grad()
            loss.backward()
            grad_norm = float(nn.utils.clip_grad_norm_(params, config.max_grad_norm))
            if not math.isfinite(grad_norm):
                log.warning("non-finite gradient norm; update skipped")
                optimizer.zero_grad()
                aborted += 1
                continue
            optimizer.step()
            stats["loss"] = float(loss.detach())
            stats["grad_norm"] = grad_norm
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    out = {k: v / count for k, v in totals.items()} if count else {}
    out["aborted"] = aborted
    return out
