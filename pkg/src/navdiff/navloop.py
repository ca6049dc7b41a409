"""Closed-loop evaluation: refresh the future frame every k steps, act with the policy in between."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from navdiff.mazeworld import Action, EpisodeSpec, NavEnv, Pose
from navdiff.metrics import EpisodeRecord, EvalReport
from navdiff.policy.agent import PolicyAgent
from navdiff.policy.future import FutureProvider, FutureSource, MissingModelError


@dataclass
class NavLoopConfig:
    k: int = 5
    T: int = 200
    future_source: str = "predictor"
    sampler_steps: int = 20
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        self.future_source = FutureSource(self.future_source).value
        if not (1 <= self.k <= self.T):
            raise ValueError(f"need 1 <= k <= T, got k={self.k}, T={self.T}")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpisodeTrace:
    poses: list[Pose] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    refresh_steps: list[int] = field(default_factory=list)
    futures: list[np.ndarray] = field(default_factory=list)
    frames: list[np.ndarray] = field(default_factory=list)

    @property
    def predictor_calls(self) -> int:
        return len(self.refresh_steps)


def episode_seed(suite_seed: int, episode_id: str) -> int:
    digest = hashlib.sha256(f"{suite_seed}:{episode_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _as_agent(policy, greedy: bool):
    if policy is None:
        raise MissingModelError("a trained policy checkpoint is required")
    if hasattr(policy, "act") and hasattr(policy, "reset"):
        return policy
    return PolicyAgent(policy, greedy=greedy)


def run_episode_traced(predictor, policy, episode: EpisodeSpec, config: NavLoopConfig, provider=None):
    """Run one episode and return (record, trace).

    The outer loop refreshes x_future, the inner loop executes up to k policy
    steps. STOP ends the episode at once; the recurrent state carries across
    refreshes.
    """
    agent = _as_agent(policy, config.greedy)
    if provider is None:
        provider = FutureProvider(config.future_source, config.k, predictor, config.sampler_steps)
    seed = episode_seed(config.seed, episode.episode_id)
    agent.reset(seed)
    env = NavEnv(dataclasses.replace(episode, max_steps=min(config.T, episode.max_steps)))
    trace = EpisodeTrace(poses=[env.pose], frames=[env.observation])
    t = 0
    while t < config.T and not env.done:
        x_future = provider(env.episode, env.pose, trace.frames, seed + len(trace.refresh_steps))
        trace.refresh_steps.append(t)
        trace.futures.append(np.asarray(x_future, dtype=np.float32))
        for _ in range(config.k):
            if t >= config.T or env.done:
                break
            action = Action(agent.act(env.observation, x_future, episode.goal_image))
            env.step(action)
            t += 1
            trace.actions.append(int(action))
            trace.poses.append(env.pose)
            trace.frames.append(env.observation)
    record = EpisodeRecord(episode.episode_id, env.success, env.steps, env.path_length, episode.shortest_length)
    return record, trace


def run_episode(predictor, policy, episode: EpisodeSpec, config: NavLoopConfig) -> EpisodeRecord:
    return run_episode_traced(predictor, policy, episode, config)[0]


def evaluate(
    predictor,
    policy,
    suite: Sequence[EpisodeSpec],
    config: NavLoopConfig,
    artifact_dir: str | Path | None = None,
    extra_config: dict | None = None,
) -> EvalReport:
    """Run every episode with its own derived seed and aggregate SR/SPL.

    Episodes run sequentially in-process; per-episode seeds make the result
    independent of suite order. With ``artifact_dir`` each episode's trace is
    dumped for plotting.
    """
    if not suite:
        raise ValueError("evaluation suite is empty")
    ids = [ep.episode_id for ep in suite]
    if len(set(ids)) != len(ids):
        raise ValueError("episode ids in a suite must be unique")
    records = []
    for ep in suite:
        record, trace = run_episode_traced(predictor, policy, ep, config)
        records.append(record)
        if artifact_dir is not None:
            dump_trace(Path(artifact_dir) / "episodes" / ep.episode_id, ep, record, trace, config.k)
    return EvalReport.from_records(records, {**config.to_dict(), **(extra_config or {})})


def dump_trace(directory: Path, episode: EpisodeSpec, record: EpisodeRecord, trace: EpisodeTrace, k: int) -> None:
    """Write ``trace.json`` plus ``frames.npz`` (predicted futures and the frames actually seen k steps later)."""
    from navdiff.harness.persist import atomic_write_bytes, write_json

    directory.mkdir(parents=True, exist_ok=True)
    last = len(trace.frames) - 1
    actual = [trace.frames[min(t + k, last)] for t in trace.refresh_steps]
    current = [trace.frames[t] for t in trace.refresh_steps]
    doc = {
        "episode_id": episode.episode_id,
        "maze": json.loads(episode.maze.to_json()),
        "start": episode.start.to_dict(),
        "goal": episode.goal.to_dict(),
        "poses": [p.to_dict() for p in trace.poses],
        "actions": trace.actions,
        "refresh_steps": trace.refresh_steps,
        "predictor_calls": trace.predictor_calls,
        "k": k,
        "record": record.to_dict(),
    }
    write_json(directory / "trace.json", doc)
    buf = io.BytesIO()
    np.savez_compressed(
        buf,
        current=np.stack(current).astype(np.float32),
        predicted=np.stack(trace.futures).astype(np.float32),
        actual=np.stack(actual).astype(np.float32),
        goal=np.asarray(episode.goal_image, dtype=np.float32),
    )
    atomic_write_bytes(directory / "frames.npz", buf.getvalue())


def expected_calls(steps: int, k: int) -> int:
    return math.ceil(steps / k)
