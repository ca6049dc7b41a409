"""Fusion policy, PPO and rollout collection."""

from navdiff.policy.agent import PolicyAgent, ScriptedAgent
from navdiff.policy.future import FutureProvider, FutureSource, MissingModelError
from navdiff.policy.networks import (
    ActorCriticOutput,
    FusionEncoders,
    FusionPolicy,
    FusionVariant,
    PolicyConfig,
    PolicyState,
    matched_config,
    policy_forward,
)
from navdiff.policy.ppo import PPOConfig, RolloutBatch, compute_gae, compute_reward, ppo_update

__all__ = [
    "ActorCriticOutput",
    "FusionEncoders",
    "FusionPolicy",
    "FusionVariant",
    "FutureProvider",
    "FutureSource",
    "MissingModelError",
    "PPOConfig",
    "PolicyAgent",
    "PolicyConfig",
    "PolicyState",
    "RolloutBatch",
    "ScriptedAgent",
    "compute_gae",
    "compute_reward",
    "matched_config",
    "policy_forward",
    "ppo_update",
]
