"""Top-down trajectory overlays and predicted-vs-actual frame strips."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from navdiff.harness.persist import write_json  # noqa: E402
from navdiff.mazeworld import SUCCESS_RADIUS, MazeSpec  # noqa: E402

log = logging.getLogger(__name__)


def plot_trajectory(trace: dict, path: str | Path) -> dict:
    """Draw the path over the maze; returns the drawn goal circle and endpoints."""
    maze = MazeSpec.from_json(json.dumps(trace["maze"]))
    h, w = maze.grid.shape
    cs = maze.cell_size
    fig, ax = plt.subplots(figsize=(4, 4 * h / w))
    ax.imshow(maze.grid, cmap="Greys", origin="lower", extent=(0, w * cs, 0, h * cs), vmin=0, vmax=1.5)
    xs = [p["x"] for p in trace["poses"]]
    ys = [p["y"] for p in trace["poses"]]
    ax.plot(xs, ys, "-", color="tab:blue", lw=1.5)
    goal = trace["goal"]
    circle = ax.add_patch(plt.Circle((goal["x"], goal["y"]), SUCCESS_RADIUS, fill=False, color="tab:green", lw=1.5))
    ax.plot([goal["x"]], [goal["y"]], "*", color="tab:green", ms=10)
    ax.plot([xs[0]], [ys[0]], "o", color="tab:orange", ms=6)
    ax.plot([xs[-1]], [ys[-1]], "x", color="tab:red", ms=8)
    rec = trace["record"]
    ax.set_title(f"{trace['episode_id']}  success={rec['success']}  spl={rec['spl']:.2f}", fontsize=8)
    ax.set_xlim(0, w * cs)
    ax.set_ylim(0, h * cs)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return {
        "goal_circle": (*circle.center, circle.radius),
        "start": (xs[0], ys[0]),
        "end": (xs[-1], ys[-1]),
    }


def plot_frame_strip(frames: dict, path: str | Path) -> int:
    """Rows: current, predicted, actual k steps later. One column per predictor call."""
    rows = [("current", frames["current"]), ("predicted", frames["predicted"]), ("actual", frames["actual"])]
    n = len(frames["predicted"])
    fig, axes = plt.subplots(3, n, figsize=(1.2 * n + 0.6, 3.8), squeeze=False)
    for r, (name, imgs) in enumerate(rows):
        for c in range(n):
            ax = axes[r][c]
            ax.imshow(np.clip(imgs[c], 0.0, 1.0))
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(name, fontsize=7)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return n


def emit_plots(eval_dir: str | Path, out_dir: str | Path) -> list[dict]:
    """Plot every dumped episode under ``eval_dir`` into ``out_dir``; returns the index entries.

    Episodes with missing artifacts are skipped with a warning.
    """
    eval_dir, out_dir = Path(eval_dir), Path(out_dir)
    episode_dirs = sorted(eval_dir.glob("**/episodes/*")) if eval_dir.exists() else []
    if not episode_dirs:
        log.warning("no episode artifacts under %s; nothing to plot", eval_dir)
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ep_dir in episode_dirs:
        trace_path, frames_path = ep_dir / "trace.json", ep_dir / "frames.npz"
        if not trace_path.exists() or not frames_path.exists():
            log.warning("skipping %s: missing trace.json or frames.npz", ep_dir)
            continue
        trace = json.loads(trace_path.read_text())
        prefix = "_".join(ep_dir.relative_to(eval_dir).parts[:-2] + (ep_dir.name,))
        traj_png = out_dir / f"{prefix}_trajectory.png"
        strip_png = out_dir / f"{prefix}_strip.png"
        plot_trajectory(trace, traj_png)
        with np.load(frames_path) as frames:
            cols = plot_frame_strip(dict(frames), strip_png)
        entries.append(
            {
                "episode_id": trace["episode_id"],
                "trajectory": traj_png.name,
                "strip": strip_png.name,
                "strip_columns": cols,
                "predictor_calls": trace["predictor_calls"],
                "success": trace["record"]["success"],
            }
        )
    write_json(out_dir / "index.json", {"plots": entries})
    return entries
