"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``C<n> PASS|FAIL ...`` line. The heavy criteria
(C3, C6, C7, C8) train models; their checkpoints and timings are cached under
``NAVDIFF_ACCEPTANCE_CACHE`` (default ``<repo>/.acceptance_cache``) keyed by a
hash of the training settings. Set ``NAVDIFF_ACCEPTANCE_RETRAIN=1`` to ignore
the cache.
"""

import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import bfs_hops, lattice_bfs_steps
from predictor_helpers import MICRO, OracleDenoiser, central_difference_check, random_tuples
from navdiff.harness.persist import config_hash
from navdiff.mazeworld import corridor_maze, generate_maze, geodesic_distance, make_episode, Pose
from navdiff.metrics import frechet_distance_from_moments, frechet_feature_distance, psnr, spl
from navdiff.navloop import NavLoopConfig, evaluate, expected_calls
from navdiff.oracle import build_tuples, collect_trajectory
from navdiff.policy.agent import ScriptedAgent
from navdiff.policy.networks import PolicyConfig, count_parameters, matched_config
from navdiff.policy.ppo import PPOConfig
from navdiff.policy.train import (
    PolicyTrainConfig,
    first_update_reaching,
    load_policy,
    maze_episode_factory,
    save_policy,
    train_policy,
)
from navdiff.predictor.diffusion import NoiseSchedule, PixelCodec
from navdiff.predictor.model import Predictor, PredictorConfig, collate, diffusion_loss, sample, to_dtype
from navdiff.predictor.train import PredictorTrainConfig, load_predictor, save_predictor, train_predictor

CACHE = Path(os.environ.get("NAVDIFF_ACCEPTANCE_CACHE") or Path(__file__).resolve().parents[1] / ".acceptance_cache")
RETRAIN = os.environ.get("NAVDIFF_ACCEPTANCE_RETRAIN") == "1"
SEEDS = (0, 1, 2)
R = 16

# Predictor task (C3, reused by C8).
PRED_MAZE = 11
PRED_TRAIN_MAZES = 30
PRED_EPISODES = 20
PRED_GEO = (1.5, 6.0)
PRED_MODEL = PredictorConfig(
    resolution=R, d=64, d_ctx=64, encoder_channels=(16, 32, 64), unet_channels=(16, 32, 64), output="clean"
)
PRED_TRAIN = PredictorTrainConfig(stage1_steps=1500, stage2_steps=10000, batch_size=32, lr=5e-4)

# Policies (C6, C7, C8).
POLICY_BASE = PolicyConfig(widths=(8, 16, 32, 64), d_f=64, d_h=64, action_embed=16)
POLICY_PPO = PPOConfig(n_envs=8, rollout_length=64, epochs_per_batch=3, lr=2e-3)
NAV_PPO = PPOConfig(n_envs=8, rollout_length=64, epochs_per_batch=3, lr=1e-3)
NAV_MAZE = 7
NAV_GEO = (1.5, 3.0)
NAV_MAX_STEPS = 40
NAV_UPDATES = 300


@pytest.fixture
def announce(capsys):
    def say(cid: str, ok: bool, detail: str) -> bool:
        with capsys.disabled():
            print(f"\n{cid} {'PASS' if ok else 'FAIL'} {detail}", flush=True)
        return ok

    return say


def cached(name: str, settings: dict, build):
    """Run ``build(directory) -> dict`` once per distinct ``settings``; returns (directory, meta)."""
    d = CACHE / f"{name}-{config_hash(settings)[:12]}"
    meta_path = d / "meta.json"
    if meta_path.exists() and not RETRAIN:
        return d, json.loads(meta_path.read_text())
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    t0 = time.time()
    meta = build(d)
    meta["seconds"] = time.time() - t0
    meta["settings"] = settings
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return d, meta


# -- C1 ----------------------------------------------------------------------


def test_c1_loss_gradient_fidelity(announce):
    t0 = time.time()
    cfg = PredictorConfig(**{**MICRO.to_dict(), "encoder_channels": MICRO.encoder_channels,
                             "unet_channels": MICRO.unet_channels, "output": "eps"})
    torch.manual_seed(0)
    model = Predictor(cfg).double()
    model.begin_conditioned_stage()
    n_params = sum(p.numel() for p in model.parameters())
    batch = to_dtype(collate(random_tuples(2, 8, seed=1)), torch.float64)
    s = torch.tensor([37, 640])
    eps = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    params = [p for p in model.parameters() if p.requires_grad]
    err, ana, _ = central_difference_check(lambda: diffusion_loss(model, batch, model.schedule, s=s, eps=eps), params)
    nonzero = float((ana.abs() > 0).float().mean())
    ok = n_params < 1000 and err < 1e-4 and nonzero > 0.5 and time.time() - t0 < 60
    assert announce("C1", ok, f"params={n_params} max_rel_err={err:.2e} nonzero_grads={nonzero:.2f} {time.time() - t0:.1f}s")


# -- C2 ----------------------------------------------------------------------


def test_c2_sampler_reconstructs_oracle_target(announce):
    gen = torch.Generator().manual_seed(0)
    target = torch.rand(4, 3, 16, 16, dtype=torch.float64, generator=gen)
    oracle = OracleDenoiser(target, NoiseSchedule(), PixelCodec())
    errs = [float((sample(oracle, {"x_t": torch.zeros_like(target)}, n_steps=20, seed=s) - target).abs().max()) for s in range(3)]
    ok = max(errs) < 1e-3
    assert announce("C2", ok, f"max_abs_err={max(errs):.2e} over 3 noise seeds")


# -- C3 ----------------------------------------------------------------------


def predictor_tuples(maze_seeds, per_maze, k=5, h=4):
    out = []
    for ms in maze_seeds:
        maze = generate_maze(ms, PRED_MAZE, PRED_MAZE)
        for e in range(per_maze):
            ep = make_episode(maze, e, *PRED_GEO, resolution=R)
            out += build_tuples(collect_trajectory(ep), k, h, ep.goal_image)
    return out


def trained_predictor():
    settings = {"model": PRED_MODEL.to_dict(), "train": PRED_TRAIN.__dict__, "mazes": PRED_TRAIN_MAZES,
                "episodes": PRED_EPISODES, "geo": PRED_GEO, "maze": PRED_MAZE}

    def build(d):
        train = predictor_tuples(range(100, 100 + PRED_TRAIN_MAZES), PRED_EPISODES)
        held = predictor_tuples(range(800, 803), 5)
        model, records = train_predictor(train, held, PRED_MODEL, PRED_TRAIN)
        save_predictor(d / "predictor", model, records[-1]["step"])
        return {"n_train_tuples": len(train), "n_mazes": PRED_TRAIN_MAZES}

    d, meta = cached("predictor", settings, build)
    return load_predictor(d / "predictor"), meta


def test_c3_predictor_beats_copy(announce):
    model, meta = trained_predictor()
    held = predictor_tuples(range(900, 905), 10)
    changed = [t for t in held if not np.array_equal(t.x_t, t.x_tk)]
    pred, copy = [], []
    for i in range(0, len(changed), 64):
        chunk = changed[i : i + 64]
        with torch.no_grad():
            out = sample(model.eval(), collate(chunk), 20, seed=i).permute(0, 2, 3, 1).numpy()
        pred += [psnr(o, t.x_tk) for o, t in zip(out, chunk)]
        copy += [psnr(t.x_t, t.x_tk) for t in chunk]
    gain = float(np.mean(pred) - np.mean(copy))
    ok = meta["n_mazes"] >= 10 and meta["n_train_tuples"] >= 5000 and gain >= 1.0
    assert announce(
        "C3", ok,
        f"predicted={np.mean(pred):.2f}dB copy={np.mean(copy):.2f}dB gain={gain:+.2f}dB "
        f"on {len(changed)} changed held-out tuples; trained on {meta['n_train_tuples']} tuples in {meta['seconds'] / 60:.0f} min",
    )


# -- C4 ----------------------------------------------------------------------


def test_c4_spl_and_geodesic_oracles(announce):
    t0 = time.time()
    spl_ok = spl(True, 3.0, 3.0) == 1.0 and spl(False, 3.0, 3.0) == 0.0 and spl(True, 4.0, 8.0) == 0.5
    mismatches = pairs = 0
    for seed in range(20):
        maze = generate_maze(5000 + seed, 17, 17)
        cells = maze.free_cells()
        for a in cells:
            hops = bfs_hops(maze.grid, a)
            pa = Pose(*maze.cell_center(a), 0)
            for b in cells:
                pairs += 1
                if geodesic_distance(maze, pa, Pose(*maze.cell_center(b), 0)) != hops[b] * maze.cell_size:
                    mismatches += 1
    ok = spl_ok and mismatches == 0 and time.time() - t0 < 300
    assert announce("C4", ok, f"spl_trivial={spl_ok} geodesic mismatches={mismatches}/{pairs} pairs {time.time() - t0:.0f}s")


# -- C5 ----------------------------------------------------------------------


def test_c5_follower_completeness(announce):
    t0 = time.time()
    successes = efficient = 0
    for i in range(200):
        maze = generate_maze(7000 + i % 40, 11, 11)
        ep = make_episode(maze, i, 1.5, 8.0, resolution=16)
        traj = collect_trajectory(ep)
        rec = evaluate(None, ScriptedAgent(traj.actions), [ep], NavLoopConfig(k=5, T=ep.max_steps, future_source="none")).records[0]
        successes += rec.success
        efficient += len(traj.actions) <= 1.5 * lattice_bfs_steps(maze, ep.start, ep.goal)
    ok = successes == 200 and efficient >= 190 and time.time() - t0 < 600
    assert announce("C5", ok, f"success={successes}/200 within_1.5x_bfs={efficient}/200 {time.time() - t0:.0f}s")


# -- C6 ----------------------------------------------------------------------


def corridor_run(seed: int):
    settings = {"base": POLICY_BASE.to_dict(), "ppo": POLICY_PPO.to_dict(), "seed": seed, "corridor": 8, "max": 200}

    def build(d):
        maze = corridor_maze(8, seed=1)
        val = [make_episode(maze, 1000 + i, 1.5, 3.5, resolution=R, max_steps=40) for i in range(20)]
        factory = maze_episode_factory([maze], 1.5, 3.5, R, max_steps=40)
        cfg = PolicyTrainConfig(ppo=POLICY_PPO, policy=POLICY_BASE, n_updates=200, val_every=5, val_target=0.9, seed=seed)
        _, records = train_policy(factory, "oracle", "hybrid", cfg, val_suite=val)
        return {"reached": first_update_reaching(records, 0.9), "last_sr": records[-1].get("sr_val")}

    return cached(f"corridor-s{seed}", settings, build)[1]


def test_c6_ppo_corridor_smoke(announce):
    metas = [corridor_run(s) for s in SEEDS]
    total = sum(m["seconds"] for m in metas)
    ok = all(m["reached"] is not None and m["reached"] <= 200 for m in metas) and total < 1800
    detail = " ".join(f"s{s}:update={m['reached']}" for s, m in zip(SEEDS, metas))
    assert announce("C6", ok, f"{detail} train_time={total / 60:.1f}min")


# -- C7 / C8 -----------------------------------------------------------------


def nav_mazes(start: int, n: int):
    return [generate_maze(start + i, NAV_MAZE, NAV_MAZE) for i in range(n)]


def nav_suite(mazes, per_maze: int, offset: int):
    return [make_episode(m, offset + j, *NAV_GEO, resolution=R, max_steps=NAV_MAX_STEPS) for m in mazes for j in range(per_maze)]


def fusion_policy(variant: str, seed: int):
    pcfg = matched_config(POLICY_BASE, variant)
    settings = {"policy": pcfg.to_dict(), "ppo": NAV_PPO.to_dict(), "seed": seed, "maze": NAV_MAZE,
                "geo": NAV_GEO, "updates": NAV_UPDATES, "max_steps": NAV_MAX_STEPS}

    def build(d):
        mazes = nav_mazes(100, 10)
        factory = maze_episode_factory(mazes, *NAV_GEO, R, max_steps=NAV_MAX_STEPS)
        cfg = PolicyTrainConfig(ppo=NAV_PPO, policy=pcfg, n_updates=NAV_UPDATES, val_every=NAV_UPDATES, seed=seed)
        model, _ = train_policy(factory, "oracle", variant, cfg)
        save_policy(d / "policy", model, NAV_UPDATES)
        return {"n_params": count_parameters(model)}

    d, meta = cached(f"fusion-{variant}-s{seed}", settings, build)
    return load_policy(d / "policy"), meta


def test_c7_fusion_ordering(announce):
    suite = nav_suite(nav_mazes(100, 10), 10, 5000)
    sr, params = {}, {}
    for variant in ("hybrid", "early", "late"):
        rates = []
        for seed in SEEDS:
            policy, meta = fusion_policy(variant, seed)
            params[variant] = meta["n_params"]
            rates.append(evaluate(None, policy, suite, NavLoopConfig(k=5, T=NAV_MAX_STEPS, future_source="oracle", seed=seed)).sr)
        sr[variant] = float(np.mean(rates))
    matched = max(params.values()) / min(params.values()) <= 1.10
    ok = matched and sr["hybrid"] >= sr["early"] and sr["hybrid"] >= sr["late"]
    detail = " ".join(f"{v}={sr[v]:.3f}({params[v]}p)" for v in sr)
    assert announce("C7", ok, f"mean SR over 3 seeds: {detail}")


def test_c8_future_channel_carries_signal(announce):
    predictor, _ = trained_predictor()
    suite = nav_suite(nav_mazes(900, 10), 5, 6000)
    sr = {"oracle": [], "none": [], "predictor": []}
    for seed in SEEDS:
        policy, _ = fusion_policy("hybrid", seed)
        for source in sr:
            cfg = NavLoopConfig(k=5, T=NAV_MAX_STEPS, future_source=source, seed=seed)
            sr[source].append(evaluate(predictor, policy, suite, cfg).sr)
    mean = {k: float(np.mean(v)) for k, v in sr.items()}
    ok = mean["oracle"] >= mean["none"] + 0.05 and mean["predictor"] >= mean["none"]
    detail = " ".join(f"{k}={mean[k]:.3f}" for k in mean)
    assert announce("C8", ok, f"held-out mean SR over 3 seeds: {detail}")


# -- C9 ----------------------------------------------------------------------


class CountingPredictor:
    def __init__(self):
        self.calls = 0

    def __call__(self, x_t, x_g, y, x_h, seed):
        self.calls += 1
        return x_t


def test_c9_loop_schedule_and_reproducibility(announce, tmp_path):
    maze = generate_maze(11, 11, 11)
    episodes = [make_episode(maze, i, 1.5, 6.0, resolution=16) for i in range(4)]
    scripts = [collect_trajectory(ep).actions for ep in episodes]
    count_ok = True
    for k in (1, 5, 10):
        for ep, actions in zip(episodes, scripts):
            counter = CountingPredictor()
            rep = evaluate(counter, ScriptedAgent(actions), [ep], NavLoopConfig(k=k, T=ep.max_steps, future_source="predictor"))
            count_ok &= counter.calls == expected_calls(rep.records[0].steps, k) == math.ceil(rep.records[0].steps / k)
    reports = []
    for name in ("a", "b"):
        rep = evaluate(CountingPredictor(), ScriptedAgent(scripts[0]), episodes, NavLoopConfig(k=5, future_source="predictor"), tmp_path / name)
        traces = b"".join(p.read_bytes() for p in sorted((tmp_path / name).rglob("trace.json")))
        reports.append(rep.to_json().encode() + traces)
    ok = count_ok and reports[0] == reports[1]
    assert announce("C9", ok, f"call_counts_match={count_ok} reports_byte_equal={reports[0] == reports[1]}")


# -- C10 ---------------------------------------------------------------------


def test_c10_metrics_algebra(announce):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 4))
    identical = abs(frechet_feature_distance(x, x))
    delta = np.array([0.5, -1.0, 2.0, 0.0])
    cov = np.diag([1.0, 2.0, 0.5, 3.0])
    shifted = abs(frechet_distance_from_moments(np.zeros(4), cov, delta, cov, eps=0.0) - float(delta @ delta))
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    b = np.array([[1.0, -0.2], [-0.2, 0.5]])
    mu_b = np.array([1.0, 0.5])
    truth = float(mu_b @ mu_b + np.trace(a) + np.trace(b)
                  - 2.0 * math.sqrt(np.trace(a @ b) + 2.0 * math.sqrt(np.linalg.det(a) * np.linalg.det(b))))
    sa = rng.multivariate_normal(np.zeros(2), a, size=20000)
    sb = rng.multivariate_normal(mu_b, b, size=20000)
    sampled = abs(frechet_feature_distance(sa, sb) - truth) / truth
    z = np.zeros((4, 4, 3))
    psnr_ok = psnr(z, z) == 100.0 and psnr(z, np.ones_like(z)) == 0.0 and psnr(z, np.full_like(z, 0.1)) == pytest.approx(20.0, abs=1e-12)
    ok = identical < 1e-6 and shifted < 1e-6 and sampled < 0.05 and psnr_ok
    assert announce("C10", ok, f"identical={identical:.1e} shift={shifted:.1e} sampled_rel={sampled:.3%} psnr_hand={psnr_ok}")
