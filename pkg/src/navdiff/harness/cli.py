"""Command line entry point: make-mazes, collect, train-predictor, train-policy, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from navdiff.harness.config import ConfigError, RunConfig, load_config
from navdiff.harness.persist import CheckpointError, atomic_write_text, write_json

log = logging.getLogger("navdiff")

RUNS_ENV = "NAVDIFF_RUNS"
SPLITS = ("train", "val", "test")


class MissingArtifactError(RuntimeError):
    pass


class RunLayout:
    def __init__(self, root: Path):
        self.root = root
        self.dataset = root / "dataset"
        self.mazes = self.dataset / "mazes"
        self.suites = self.dataset / "suites"
        self.checkpoints = root / "checkpoints"
        self.eval = root / "eval"
        self.plots = root / "plots"

    def policy_stem(self, variant: str, source: str, seed: int) -> Path:
        return self.checkpoints / f"policy_{variant}_{source}_s{seed}"

    @property
    def predictor_stem(self) -> Path:
        return self.checkpoints / "predictor"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return path


def _echo_config(directory: Path, cfg: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_text(directory / "config.resolved", cfg.to_ini())


def _load_mazes(layout: RunLayout, split: str):
    from navdiff.mazeworld import MazeSpec

    index = json.loads(_require(layout.mazes / "index.json", "maze index (run make-mazes first)").read_text())
    return [MazeSpec.from_json((layout.mazes / rel).read_text()) for rel in index["splits"][split]]


def _predictor_config(cfg: RunConfig):
    from navdiff.predictor.model import PredictorConfig

    p = cfg.predictor
    return PredictorConfig(
        resolution=cfg.sim.resolution,
        history=cfg.data.h,
        d=p.d,
        n_queries=p.n_queries,
        d_ctx=p.d_ctx,
        n_ctx_tokens=p.n_ctx_tokens,
        encoder_channels=tuple(p.encoder_channels),
        unet_channels=tuple(p.unet_channels),
        heads=p.heads,
        unet_heads=p.heads,
        sampler_steps=cfg.eval.sampler_steps,
    )


def _load_predictor_checkpoint(layout: RunLayout):
    from navdiff.predictor.train import load_predictor

    _require(layout.predictor_stem.with_suffix(".json"), "predictor checkpoint (run train-predictor first)")
    return load_predictor(layout.predictor_stem)


def cmd_make_mazes(cfg: RunConfig, layout: RunLayout, args) -> int:
    from navdiff.mazeworld import generate_maze

    index_path = layout.mazes / "index.json"
    if index_path.exists():
        existing = json.loads(index_path.read_text())
        if existing.get("config_hash") == cfg.hash:
            print(f"mazes already present in {layout.mazes}")
            return 0
        raise ConfigError(f"{layout.mazes} was generated with a different config; use a new --run-id")
    counts = {"train": cfg.data.train_mazes, "val": cfg.data.val_mazes, "test": cfg.data.test_mazes}
    splits = {}
    for split in SPLITS:
        splits[split] = []
        for i in range(counts[split]):
            maze = generate_maze(cfg.seed_for("maze", split, i), cfg.sim.maze_width, cfg.sim.maze_height, cfg.sim.cell_size)
            rel = f"{split}/{i:04d}.json"
            atomic_write_text(layout.mazes / rel, maze.to_json())
            splits[split].append(rel)
    write_json(index_path, {"config_hash": cfg.hash, "splits": splits})
    _echo_config(layout.mazes, cfg)
    print(f"wrote {sum(counts.values())} mazes to {layout.mazes}")
    return 0


def _episodes(cfg: RunConfig, mazes, split: str, per_maze: int, tag: str):
    from navdiff.mazeworld import make_episode

    eps = []
    for i, maze in enumerate(mazes):
        for j in range(per_maze):
            eps.append(
                make_episode(
                    maze, cfg.seed_for(tag, split, i, j) % 100000, cfg.data.min_geo, cfg.data.max_geo,
                    cfg.sim.resolution, cfg.sim.fov, cfg.sim.max_steps,
                )
            )
    return eps


def cmd_collect(cfg: RunConfig, layout: RunLayout, args) -> int:
    from navdiff.harness.suites import write_suite
    from navdiff.oracle import collect_many, write_episode, write_index

    if (layout.dataset / "index.json").exists():
        raise ConfigError(f"dataset already collected at {layout.dataset}; datasets are immutable")
    entries = {}
    for split in ("train", "val"):
        mazes = _load_mazes(layout, split)
        eps = _episodes(cfg, mazes, split, cfg.data.episodes_per_maze, "collect")
        trajs = collect_many(eps, workers=args.workers)
        entries[split] = []
        for ep, tr in zip(eps, trajs):
            n = write_episode(layout.dataset, split, ep, tr, cfg.data.k, cfg.data.h)
            entries[split].append({"episode_id": tr.episode_id, "n_tuples": n})
        print(f"{split}: {len(eps)} episodes, {sum(e['n_tuples'] for e in entries[split])} tuples")
    for split in ("val", "test"):
        suite = _episodes(cfg, _load_mazes(layout, split), split, cfg.data.eval_episodes_per_maze, "suite")
        write_suite(layout.suites / f"{split}.json", suite, cfg.hash)
    write_index(layout.dataset, entries, cfg.data.k, cfg.data.h)
    _echo_config(layout.dataset, cfg)
    return 0


def cmd_train_predictor(cfg: RunConfig, layout: RunLayout, args) -> int:
    from navdiff.oracle import load_split
    from navdiff.predictor.train import PredictorTrainConfig, save_predictor, train_predictor

    _require(layout.dataset / "index.json", "dataset index (run collect first)")
    train = load_split(layout.dataset, "train")
    held = load_split(layout.dataset, "val")
    p = cfg.predictor
    tcfg = PredictorTrainConfig(
        stage1_steps=args.stage1_steps if args.stage1_steps is not None else p.stage1_steps,
        stage2_steps=args.stage2_steps if args.stage2_steps is not None else p.stage2_steps,
        batch_size=p.batch_size,
        lr=p.lr,
        seed=cfg.seed_for("predictor"),
    )
    out = layout.checkpoints / "predictor_train"
    model, records = train_predictor(train, held, _predictor_config(cfg), tcfg, out_dir=out)
    step = max(r["step"] for r in records) if records else 0
    save_predictor(layout.predictor_stem, model, step, cfg.hash)
    _echo_config(layout.checkpoints, cfg)
    final = [r for r in records if r["split"] == "heldout"]
    if final:
        print(f"held-out loss {final[-1]['loss']:.5f}")
    print(f"saved {layout.predictor_stem}")
    return 0


def cmd_train_policy(cfg: RunConfig, layout: RunLayout, args) -> int:
    from navdiff.harness.suites import read_suite
    from navdiff.policy.networks import PolicyConfig, matched_config
    from navdiff.policy.ppo import PPOConfig
    from navdiff.policy.train import PolicyTrainConfig, maze_episode_factory, save_policy, train_policy

    pol = cfg.policy
    source = args.future or pol.future_source
    seed = args.seed if args.seed is not None else cfg.seed
    predictor = _load_predictor_checkpoint(layout) if source == "predictor" else None
    mazes = _load_mazes(layout, "train")
    factory = maze_episode_factory(mazes, cfg.data.min_geo, cfg.data.max_geo, cfg.sim.resolution, cfg.sim.max_steps, cfg.sim.fov)
    val_path = layout.suites / "val.json"
    val_suite = read_suite(val_path) if val_path.exists() else None
    base = PolicyConfig(widths=tuple(pol.widths), d_f=pol.d_f, d_h=pol.d_h)
    ppo = PPOConfig(
        gamma=pol.gamma, gae_lambda=pol.gae_lambda, clip=pol.clip, epochs_per_batch=pol.epochs_per_batch,
        n_envs=pol.n_envs, rollout_length=pol.rollout_length, entropy_coef=pol.entropy_coef,
        value_coef=pol.value_coef, lr=pol.lr,
    )
    tcfg = PolicyTrainConfig(
        ppo=ppo,
        policy=matched_config(base, args.fusion),
        n_updates=args.updates if args.updates is not None else pol.n_updates,
        k=pol.k,
        seed=seed,
        val_every=pol.val_every,
        sampler_steps=cfg.eval.sampler_steps,
    )
    stem = layout.policy_stem(args.fusion, source, seed)
    model, records = train_policy(factory, source, args.fusion, tcfg, predictor, val_suite, out_dir=stem.parent / (stem.name + "_train"))
    save_policy(stem, model, records[-1]["update"], cfg.hash, {"future_source": source, "k": pol.k, "seed": seed})
    _echo_config(layout.checkpoints, cfg)
    print(f"saved {stem}")
    return 0


def cmd_eval(cfg: RunConfig, layout: RunLayout, args) -> int:
    from navdiff.harness.suites import read_suite
    from navdiff.navloop import NavLoopConfig, evaluate
    from navdiff.policy.train import load_policy

    seed = args.seed if args.seed is not None else cfg.eval.seeds[0]
    k = args.k if args.k is not None else cfg.eval.k
    source = args.future or cfg.eval.future_source
    split = args.split or cfg.eval.split
    stem = Path(args.policy) if args.policy else layout.policy_stem(cfg.policy.variant, cfg.policy.future_source, cfg.seed)
    stem = stem.with_suffix("") if stem.suffix in (".pt", ".json") else stem
    _require(stem.with_suffix(".json"), "policy checkpoint")
    policy = load_policy(stem)
    predictor = _load_predictor_checkpoint(layout) if source == "predictor" else None
    suite = read_suite(_require(layout.suites / f"{split}.json", f"{split} suite (run collect first)"))
    if args.limit:
        suite = suite[: args.limit]
    loop_cfg = NavLoopConfig(k=k, T=cfg.eval.T, future_source=source, sampler_steps=cfg.eval.sampler_steps, seed=seed)
    name = args.name or f"{stem.name}_{source}_k{k}_s{seed}_{split}"
    out = layout.eval / name
    report = evaluate(
        predictor, policy, suite, loop_cfg,
        artifact_dir=None if args.no_artifacts else out,
        extra_config={"config_hash": cfg.hash, "policy": stem.name, "split": split},
    )
    atomic_write_text(out / "report.json", report.to_json() + "\n")
    _echo_config(out, cfg)
    print(f"{name}: SR {report.sr:.4f}  SPL {report.spl:.4f}  ({len(report.records)} episodes)")
    return 0


def summary_rows(eval_root: Path) -> list[dict]:
    from navdiff.metrics import EvalReport

    rows = []
    for path in sorted(eval_root.glob("*/report.json")):
        rep = EvalReport.from_json(path.read_text())
        rows.append({"name": path.parent.name, "episodes": len(rep.records), "sr": rep.sr, "spl": rep.spl})
    return rows


def format_table(rows: list[dict]) -> str:
    width = max([len("eval")] + [len(r["name"]) for r in rows])
    lines = [f"{'eval':<{width}}  {'n':>5}  {'SR':>7}  {'SPL':>7}"]
    for r in rows:
        lines.append(f"{r['name']:<{width}}  {r['episodes']:>5d}  {r['sr']:>7.4f}  {r['spl']:>7.4f}")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, layout: RunLayout, args) -> int:
    from navdiff.harness.plots import emit_plots

    rows = summary_rows(layout.eval)
    if not rows:
        log.warning("no eval reports under %s", layout.eval)
    else:
        table = format_table(rows)
        print(table)
        atomic_write_text(layout.eval / "summary.txt", table + "\n")
    if not args.no_plots:
        entries = emit_plots(layout.eval, layout.plots)
        print(f"{len(entries)} episode plots in {layout.plots}")
    return 0


COMMANDS = {
    "make-mazes": cmd_make_mazes,
    "collect": cmd_collect,
    "train-predictor": cmd_train_predictor,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--run-id", default="default")
    common.add_argument("--runs-root", help=f"root for run directories (default ${RUNS_ENV} or ./runs)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="navdiff", description="Maze image-goal navigation with a diffusion future-frame predictor.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("make-mazes", parents=[common], help="generate train/val/test mazes")
    p = sub.add_parser("collect", parents=[common], help="collect expert trajectories and evaluation suites")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("train-predictor", parents=[common], help="two-stage diffusion predictor training")
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p = sub.add_parser("train-policy", parents=[common], help="PPO policy training")
    p.add_argument("--fusion", choices=["hybrid", "early", "late"], default="hybrid")
    p.add_argument("--future", choices=["oracle", "predictor", "none"])
    p.add_argument("--updates", type=int)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("eval", parents=[common], help="closed-loop evaluation on an episode suite")
    p.add_argument("--k", type=int)
    p.add_argument("--future", choices=["predictor", "oracle", "none"])
    p.add_argument("--policy", help="policy checkpoint path (stem, .pt or .json)")
    p.add_argument("--split", choices=["val", "test"])
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int, help="evaluate only the first N episodes")
    p.add_argument("--name")
    p.add_argument("--no-artifacts", action="store_true")
    p = sub.add_parser("report", parents=[common], help="summary table and plots for finished evals")
    p.add_argument("--no-plots", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "eval" and args.k is not None:
            cfg = replace(cfg, eval=replace(cfg.eval, k=args.k)).validate()
        root = Path(args.runs_root or os.environ.get(RUNS_ENV) or "runs") / args.run_id
        layout = RunLayout(root)
        root.mkdir(parents=True, exist_ok=True)
        _echo_config(root, cfg)
        return COMMANDS[args.command](cfg, layout, args)
    except (ConfigError, MissingArtifactError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"navdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
