"""Rollout collection over parallel environment workers and the PPO training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from navdiff.harness.persist import config_hash, load_checkpoint, save_checkpoint
from navdiff.mazeworld import Action, EpisodeSpec, MazeSpec, NavEnv, make_episode
from navdiff.metrics import spl
from navdiff.policy.future import FutureProvider, FutureSource
from navdiff.policy.networks import START_TOKEN, FusionPolicy, FusionVariant, PolicyConfig, PolicyState
from navdiff.policy.ppo import PPOConfig, RolloutBatch, compute_reward, ppo_update

log = logging.getLogger(__name__)

EnvFactory = Callable[[np.random.Generator], EpisodeSpec]


def episode_pool_factory(episodes: Sequence[EpisodeSpec]) -> EnvFactory:
    """Draw uniformly from a fixed list of episodes."""
    pool = list(episodes)
    if not pool:
        raise ValueError("empty episode pool")
    return lambda rng: pool[int(rng.integers(0, len(pool)))]


def maze_episode_factory(
    mazes: Sequence[MazeSpec],
    min_geo: float,
    max_geo: float,
    resolution: int,
    max_steps: int = 200,
    fov: float = 90.0,
) -> EnvFactory:
    """Fresh start/goal pairs in a uniformly chosen maze."""
    mazes = list(mazes)

    def factory(rng: np.random.Generator) -> EpisodeSpec:
        maze = mazes[int(rng.integers(0, len(mazes)))]
        return make_episode(maze, int(rng.integers(0, 2**31 - 1)), min_geo, max_geo, resolution, fov, max_steps)

    return factory


class EnvWorker:
    """One environment, its episode stream and its future-frame schedule."""

    def __init__(self, factory: EnvFactory, provider: FutureProvider, seed: int):
        self.factory = factory
        self.provider = provider
        self.rng = np.random.default_rng(seed)
        self.completed: list[dict] = []
        self.start_episode()

    def start_episode(self) -> None:
        self.episode = self.factory(self.rng)
        self.env = NavEnv(self.episode)
        self.frames = [self.env.observation]
        self.since_refresh = 0
        self.refreshes = 0
        self.fresh = True
        self.episode_return = 0.0
        self._refresh()

    def _refresh(self) -> None:
        seed = int(self.rng.integers(0, 2**31 - 1))
        self.future = self.provider(self.episode, self.env.pose, self.frames, seed)
        self.refreshes += 1
        self.since_refresh = 0

    def observation(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.env.observation, self.future, self.episode.goal_image

    def act(self, action: Action) -> tuple[float, bool]:
        prev_geo = self.env.geodesic
        res = self.env.step(action)
        self.frames.append(res.observation)
        if len(self.frames) > 16:
            del self.frames[0]
        reward = compute_reward(prev_geo, res.geodesic_to_goal, res.success, self.env.done)
        self.episode_return += reward
        self.fresh = False
        if self.env.done:
            ep = self.episode
            self.completed.append(
                {
                    "success": bool(self.env.success),
                    "spl": spl(self.env.success, ep.shortest_length, self.env.path_length),
                    "steps": self.env.steps,
                    "return": self.episode_return,
                }
            )
            self.start_episode()
            return reward, True
        self.since_refresh += 1
        if self.since_refresh >= self.provider.k:
            self._refresh()
        return reward, False


def _images(workers: list[EnvWorker]) -> tuple[torch.Tensor, ...]:
    obs = [w.observation() for w in workers]
    return tuple(
        torch.from_numpy(np.stack([np.asarray(o[i], dtype=np.float32) for o in obs])).permute(0, 3, 1, 2)
        for i in range(3)
    )


class RolloutCollector:
    """Steps N workers in lockstep with a frozen parameter snapshot."""

    def __init__(self, model: FusionPolicy, workers: list[EnvWorker], seed: int = 0):
        self.model = model
        self.workers = workers
        n = len(workers)
        self.hidden = torch.zeros(n, model.config.d_h)
        self.prev_action = torch.full((n,), START_TOKEN, dtype=torch.long)
        self.gen = torch.Generator().manual_seed(seed)

    def _masks(self) -> torch.Tensor:
        return torch.tensor([0.0 if w.fresh else 1.0 for w in self.workers])

    @torch.no_grad()
    def collect(self, length: int) -> RolloutBatch:
        model = self.model
        was_training = model.training
        model.eval()
        buf = {k: [] for k in ("x_t", "x_future", "x_g", "actions", "prev", "logp", "values", "rewards", "dones", "masks", "hiddens")}
        for _ in range(length):
            masks = self._masks()
            hidden = self.hidden * masks[:, None]
            prev = torch.where(masks > 0, self.prev_action, torch.full_like(self.prev_action, START_TOKEN))
            x_t, x_f, x_g = _images(self.workers)
            out, st = model.step(model.encode(x_t, x_f, x_g), PolicyState(hidden, prev))
            probs = torch.softmax(out.logits, -1)
            actions = torch.multinomial(probs, 1, generator=self.gen).squeeze(-1)
            logp = torch.log(probs.gather(-1, actions[:, None]).squeeze(-1).clamp_min(1e-30))
            rewards, dones = [], []
            for w, a in zip(self.workers, actions.tolist()):
                r, d = w.act(Action(a))
                rewards.append(r)
                dones.append(float(d))
            for key, val in (
                ("x_t", x_t), ("x_future", x_f), ("x_g", x_g), ("actions", actions), ("prev", prev),
                ("logp", logp), ("values", out.value), ("rewards", torch.tensor(rewards)),
                ("dones", torch.tensor(dones)), ("masks", masks), ("hiddens", hidden),
            ):
                buf[key].append(val)
            self.hidden = st.hidden
            self.prev_action = actions
        masks = self._masks()
        x_t, x_f, x_g = _images(self.workers)
        prev = torch.where(masks > 0, self.prev_action, torch.full_like(self.prev_action, START_TOKEN))
        out, _ = model.step(model.encode(x_t, x_f, x_g), PolicyState(self.hidden * masks[:, None], prev))
        model.train(was_training)
        stack = {k: torch.stack(v) for k, v in buf.items()}
        return RolloutBatch(
            x_t=stack["x_t"],
            x_future=stack["x_future"],
            x_g=stack["x_g"],
            actions=stack["actions"],
            prev_actions=stack["prev"],
            log_probs=stack["logp"],
            values=stack["values"],
            rewards=stack["rewards"],
            dones=stack["dones"],
            masks=stack["masks"],
            hidden0=stack["hiddens"][0].clone(),
            hiddens=stack["hiddens"],
            bootstrap_value=out.value.clone(),
        )


@dataclass
class PolicyTrainConfig:
    ppo: PPOConfig = field(default_factory=PPOConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    n_updates: int = 200
    k: int = 5
    seed: int = 0
    val_every: int = 10
    val_target: float | None = None
    val_future_source: str | None = None
    sampler_steps: int = 20

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d


class PolicyTrainingError(ValueError):
    pass


def train_policy(
    env_factory: EnvFactory,
    future_source,
    variant,
    config: PolicyTrainConfig,
    predictor=None,
    val_suite: Sequence[EpisodeSpec] | None = None,
    out_dir: str | Path | None = None,
) -> tuple[FusionPolicy, list[dict]]:
    """PPO over ``config.ppo.n_envs`` workers; x_future refreshes every ``config.k`` steps.

    Every ``val_every`` updates (and after the last) the policy runs the
    evaluation loop on ``val_suite``. Training ends early once validation SR
    reaches ``val_target``. Log records hold {update, mean_reward, sr_val,
    spl_val, losses}.
    """
    from navdiff.navloop import NavLoopConfig, evaluate

    source = FutureSource(future_source)
    if source == FutureSource.PREDICTOR and predictor is None:
        raise PolicyTrainingError("future source 'predictor' requires a trained predictor checkpoint")
    pcfg = PolicyConfig(**{**config.policy.to_dict(), "widths": tuple(config.policy.widths), "variant": FusionVariant(variant).value})
    torch.manual_seed(config.seed)
    model = FusionPolicy(pcfg)
    ppo = config.ppo
    workers = [
        EnvWorker(env_factory, FutureProvider(source, config.k, predictor, config.sampler_steps), seed=config.seed * 1000 + i)
        for i in range(ppo.n_envs)
    ]
    collector = RolloutCollector(model, workers, seed=config.seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=ppo.lr, eps=1e-5)
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    chash = config_hash({"train": config.to_dict(), "variant": pcfg.variant, "source": source.value})
    val_source = FutureSource(config.val_future_source or source)
    records: list[dict] = []
    for update in range(1, config.n_updates + 1):
        batch = collector.collect(ppo.rollout_length)
        stats = ppo_update(model, opt, batch, ppo, rng)
        done_eps = [e for w in workers for e in w.completed]
        for w in workers:
            w.completed.clear()
        rec = {
            "update": update,
            "mean_reward": float(batch.rewards.mean()),
            "episodes": len(done_eps),
            "sr_train": float(np.mean([e["success"] for e in done_eps])) if done_eps else None,
            "losses": stats,
        }
        stop = False
        if val_suite and (update % config.val_every == 0 or update == config.n_updates):
            loop_cfg = NavLoopConfig(k=config.k, T=max(config.k, max(ep.max_steps for ep in val_suite)),
                                     future_source=val_source.value, sampler_steps=config.sampler_steps,
                                     seed=config.seed)
            report = evaluate(predictor, model, val_suite, loop_cfg)
            rec["sr_val"], rec["spl_val"] = report.sr, report.spl
            stop = config.val_target is not None and report.sr >= config.val_target
        records.append(rec)
        log.info("update %d reward %.4f val %s", update, rec["mean_reward"], rec.get("sr_val"))
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if stop:
            break
    if out is not None:
        save_policy(out / "policy", model, records[-1]["update"], chash, {"future_source": source.value, "k": config.k})
    return model, records


def save_policy(path: str | Path, model: FusionPolicy, update: int, chash: str | None = None, extra: dict | None = None) -> Path:
    cfg = model.config.to_dict()
    meta = {
        "kind": "policy",
        "variant": model.config.variant,
        "config": cfg,
        "config_hash": chash or config_hash(cfg),
        "update": update,
        "n_params": sum(p.numel() for p in model.parameters()),
        **(extra or {}),
    }
    return save_checkpoint(path, model.state_dict(), meta)


def load_policy(path: str | Path) -> FusionPolicy:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path} is not a policy checkpoint")
    model = FusionPolicy(PolicyConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model


def first_update_reaching(records: list[dict], target: float) -> int | None:
    for r in records:
        sr = r.get("sr_val")
        if sr is not None and not math.isnan(sr) and sr >= target:
            return r["update"]
    return None
