import json
import logging

import numpy as np
import pytest
import torch

from navdiff.harness.cli import build_parser, format_table, main, summary_rows
from navdiff.harness.config import ConfigError, RunConfig, load_config
from navdiff.harness.persist import (
    CheckpointError,
    canonical_json,
    config_hash,
    load_checkpoint,
    save_checkpoint,
    write_json,
)
from navdiff.harness.plots import emit_plots, plot_frame_strip, plot_trajectory
from navdiff.harness.suites import read_suite, write_suite
from navdiff.mazeworld import euclidean, generate_maze, make_episode
from navdiff.metrics import EvalReport
from navdiff.navloop import NavLoopConfig, evaluate
from navdiff.oracle import collect_trajectory
from navdiff.policy.agent import ScriptedAgent

TINY = [
    "sim.maze_width=7", "sim.maze_height=7", "sim.resolution=16", "sim.max_steps=30",
    "data.train_mazes=2", "data.val_mazes=1", "data.test_mazes=1", "data.episodes_per_maze=2",
    "data.eval_episodes_per_maze=2", "data.min_geo=1.0", "data.max_geo=3.0",
    "policy.widths=8,8,16,16", "policy.d_f=16", "policy.d_h=16", "policy.n_envs=2",
    "policy.rollout_length=8", "policy.n_updates=1", "policy.val_every=1", "eval.T=30",
]


def run_cli(root, *argv):
    return main([*argv, "--runs-root", str(root), "--run-id", "r", *[x for s in TINY for x in ("--set", s)]])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert run_cli(root, "make-mazes") == 0
    assert run_cli(root, "collect") == 0
    assert run_cli(root, "train-policy") == 0
    return root


def test_parser_rejects_unknown_input(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_fusion_defaults_to_hybrid():
    args = build_parser().parse_args(["train-policy"])
    assert args.fusion == "hybrid"


def test_eval_without_policy_names_artifact(tmp_path, capsys):
    assert main(["eval", "--runs-root", str(tmp_path), "--run-id", "x", "--future", "oracle"]) == 1
    err = capsys.readouterr().err
    assert "policy checkpoint" in err and "policy_hybrid_oracle_s0" in err


def test_bad_override_exits_nonzero(tmp_path, capsys):
    assert main(["make-mazes", "--runs-root", str(tmp_path), "--set", "sim.resolution=2"]) == 1
    assert "resolution" in capsys.readouterr().err


def test_pipeline_layout(tiny_run):
    run = tiny_run / "r"
    assert (run / "config.resolved").exists()
    assert (run / "dataset" / "index.json").exists()
    assert (run / "dataset" / "suites" / "test.json").exists()
    sidecar = json.loads((run / "checkpoints" / "policy_hybrid_oracle_s0.json").read_text())
    assert sidecar["variant"] == "hybrid" and sidecar["future_source"] == "oracle"
    resolved = load_config(run / "config.resolved")
    assert sidecar["config_hash"] == resolved.hash


def test_stages_do_not_clobber_inputs(tiny_run, capsys):
    before = (tiny_run / "r" / "dataset" / "index.json").read_bytes()
    assert run_cli(tiny_run, "make-mazes") == 0
    assert run_cli(tiny_run, "collect") == 1
    assert (tiny_run / "r" / "dataset" / "index.json").read_bytes() == before
    assert "already" in capsys.readouterr().err


def test_eval_and_report_round_trip(tiny_run, capsys):
    assert run_cli(tiny_run, "eval", "--future", "oracle", "--k", "3", "--name", "e1") == 0
    assert run_cli(tiny_run, "eval", "--future", "none", "--name", "e2", "--no-artifacts") == 0
    capsys.readouterr()
    assert run_cli(tiny_run, "report") == 0
    out = capsys.readouterr().out
    eval_root = tiny_run / "r" / "eval"
    for name in ("e1", "e2"):
        rep = EvalReport.from_json((eval_root / name / "report.json").read_text())
        line = next(ln for ln in out.splitlines() if ln.startswith(name + " "))
        _, n, sr, spl_ = line.split()
        assert int(n) == len(rep.records)
        assert float(sr) == pytest.approx(rep.sr, abs=5e-5) and float(spl_) == pytest.approx(rep.spl, abs=5e-5)
    assert (eval_root / "summary.txt").read_text().strip() == format_table(summary_rows(eval_root))
    index = json.loads((tiny_run / "r" / "plots" / "index.json").read_text())
    assert index["plots"] and all(p["strip_columns"] == p["predictor_calls"] for p in index["plots"])
    e1 = json.loads((eval_root / "e1" / "report.json").read_text())
    assert e1["config"]["k"] == 3 and e1["config"]["config_hash"]


def test_eval_is_reproducible_through_cli(tiny_run):
    for name in ("a", "b"):
        assert run_cli(tiny_run, "eval", "--future", "oracle", "--name", name, "--no-artifacts") == 0
    root = tiny_run / "r" / "eval"
    assert (root / "a" / "report.json").read_bytes() == (root / "b" / "report.json").read_bytes()


def test_report_on_empty_eval_dir(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert main(["report", "--runs-root", str(tmp_path), "--run-id", "empty"]) == 0
    assert emit_plots(tmp_path / "nothing", tmp_path / "plots") == []
    assert any("no " in r.getMessage() for r in caplog.records)


def test_config_defaults_overrides_and_ini_round_trip(tmp_path):
    cfg = load_config(None, ["sim.resolution=64", "policy.variant=late", "eval.seeds=0,1,2", "run.seed=4"])
    assert cfg.sim.resolution == 64 and cfg.policy.variant == "late" and tuple(cfg.eval.seeds) == (0, 1, 2)
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    again = load_config(path)
    assert again.hash == cfg.hash and again.to_dict() == cfg.to_dict()
    assert RunConfig().hash == RunConfig().hash != cfg.hash


@pytest.mark.parametrize(
    "override",
    ["sim.fov=200", "policy.variant=middle", "eval.future_source=magic", "nope.key=1", "sim.nokey=1", "sim.resolution=abc", "garbage"],
)
def test_config_validation(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_seed_namespacing():
    cfg = RunConfig()
    assert cfg.seed_for("maze", "train", 0) == cfg.seed_for("maze", "train", 0)
    assert cfg.seed_for("maze", "train", 0) != cfg.seed_for("maze", "train", 1)
    assert cfg.seed_for("maze", "train", 0) != cfg.seed_for("maze", "val", 0)


def test_canonical_manifest_round_trip(tmp_path):
    doc = {"b": [1, 2.5, "x"], "a": {"z": None, "y": True}}
    write_json(tmp_path / "m.json", doc, canonical=True)
    text = (tmp_path / "m.json").read_text()
    assert text == canonical_json(json.loads(text)) + "\n"
    assert config_hash(doc) == config_hash(json.loads(text))


def test_checkpoint_round_trip_and_refusals(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(3, 2)
    save_checkpoint(tmp_path / "c", net.state_dict(), {"kind": "test"})
    state, meta = load_checkpoint(tmp_path / "c")
    back = torch.nn.Linear(3, 2)
    back.load_state_dict(state)
    x = torch.randn(4, 3)
    assert torch.equal(back(x), net(x)) and meta["kind"] == "test"

    side = tmp_path / "c.json"
    good = side.read_text()
    side.write_text(good[: len(good) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")
    doc = json.loads(good)
    side.write_text(json.dumps({**doc, "version": 99}))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "c")
    (tmp_path / "c.pt").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c")


def test_suite_round_trip(tmp_path):
    maze = generate_maze(2, 9, 9)
    eps = [make_episode(maze, i, 1.0, 3.0, resolution=16) for i in range(3)]
    write_suite(tmp_path / "s.json", eps, "h")
    back = read_suite(tmp_path / "s.json")
    assert [e.episode_id for e in back] == [e.episode_id for e in eps]
    assert all(np.array_equal(a.goal_image, b.goal_image) and a.start == b.start for a, b in zip(back, eps))


def test_plots_contracts(tmp_path):
    maze = generate_maze(4, 9, 9)
    ep = make_episode(maze, 1, 1.5, 3.0, resolution=16)
    actions = collect_trajectory(ep).actions
    evaluate(None, ScriptedAgent(actions), [ep], NavLoopConfig(k=2, future_source="oracle"), tmp_path / "ev")
    trace = json.loads((tmp_path / "ev" / "episodes" / ep.episode_id / "trace.json").read_text())
    assert trace["record"]["success"]
    geo = plot_trajectory(trace, tmp_path / "t.png")
    gx, gy, r = geo["goal_circle"]
    assert r == 1.0 and (gx, gy) == (ep.goal.x, ep.goal.y)
    assert np.hypot(geo["end"][0] - gx, geo["end"][1] - gy) <= r
    frames = dict(np.load(tmp_path / "ev" / "episodes" / ep.episode_id / "frames.npz"))
    assert plot_frame_strip(frames, tmp_path / "s.png") == trace["predictor_calls"]
    assert (tmp_path / "t.png").stat().st_size > 0 and (tmp_path / "s.png").stat().st_size > 0
    (tmp_path / "ev" / "episodes" / "broken").mkdir()
    entries = emit_plots(tmp_path / "ev", tmp_path / "plots")
    assert len(entries) == 1
