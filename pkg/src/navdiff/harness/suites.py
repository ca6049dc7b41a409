"""Episode suite files: start/goal specs that re-render deterministically on load."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from navdiff.harness.persist import write_json
from navdiff.mazeworld import EpisodeSpec, MazeSpec, Pose, render_ego

SUITE_FORMAT = "navdiff.suite/1"


def episode_to_dict(ep: EpisodeSpec) -> dict:
    return {
        "episode_id": ep.episode_id,
        "maze": json.loads(ep.maze.to_json()),
        "start": ep.start.to_dict(),
        "goal": ep.goal.to_dict(),
        "shortest_length": ep.shortest_length,
        "max_steps": ep.max_steps,
        "resolution": ep.resolution,
        "fov": ep.fov,
    }


def episode_from_dict(d: dict, maze_cache: dict | None = None) -> EpisodeSpec:
    key = json.dumps(d["maze"], sort_keys=True)
    cache = maze_cache if maze_cache is not None else {}
    maze = cache.get(key)
    if maze is None:
        maze = cache[key] = MazeSpec.from_json(json.dumps(d["maze"]))
    goal = Pose.from_dict(d["goal"])
    return EpisodeSpec(
        maze=maze,
        start=Pose.from_dict(d["start"]),
        goal=goal,
        goal_image=render_ego(maze, goal, d["resolution"], d["fov"]),
        shortest_length=float(d["shortest_length"]),
        max_steps=int(d["max_steps"]),
        episode_id=d["episode_id"],
        resolution=int(d["resolution"]),
        fov=float(d["fov"]),
    )


def write_suite(path: str | Path, episodes: Sequence[EpisodeSpec], chash: str = "") -> None:
    write_json(path, {"format": SUITE_FORMAT, "config_hash": chash, "episodes": [episode_to_dict(e) for e in episodes]})


def read_suite(path: str | Path) -> list[EpisodeSpec]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SUITE_FORMAT:
        raise ValueError(f"unsupported suite format {doc.get('format')!r} in {path}")
    cache: dict = {}
    return [episode_from_dict(d, cache) for d in doc["episodes"]]
