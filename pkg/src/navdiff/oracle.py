"""Shortest-path expert, trajectory collection and predictor training tuples."""

from __future__ import annotations

import json
import math
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from navdiff.mazeworld import (
    FORWARD_METERS,
    SUCCESS_RADIUS,
    TURN_DEGREES,
    Action,
    EpisodeSpec,
    MazeSpec,
    NavEnv,
    Pose,
    apply_action,
    euclidean,
    is_clear,
    load_png,
    path_distance,
    render_ego,
    save_png,
    unit_vector,
)

INSTRUCTION = "navigate to the place shown in the goal image"
VOCAB = ("<pad>", "<unk>", "navigate", "to", "the", "place", "shown", "in", "goal", "image", "go", "find")
DATASET_FORMAT = "navdiff.dataset/1"
DEFAULT_K = 5
DEFAULT_H = 4


class UnreachableGoalError(RuntimeError):
    pass


class CollectionError(RuntimeError):
    pass


def tokenize(text: str = INSTRUCTION) -> list[int]:
    lookup = {w: i for i, w in enumerate(VOCAB)}
    return [lookup.get(w, 1) for w in text.lower().split()]


@dataclass
class Trajectory:
    episode_id: str
    poses: list[Pose]
    actions: list[Action]
    frames: list[np.ndarray]


@dataclass
class TrainingTuple:
    x_t: np.ndarray
    x_tk: np.ndarray
    x_h: list[np.ndarray]
    y: list[int]
    x_g: np.ndarray


LATTICE_STEP = FORWARD_METERS
_N_HEADINGS = 360 // TURN_DEGREES
_UNREACHED = np.iinfo(np.int32).max


def _on_lattice(maze: MazeSpec, pose: Pose) -> tuple[int, int] | None:
    """Integer lattice coordinates of ``pose`` when it sits on the forward-step grid."""
    i, j = pose.x / LATTICE_STEP, pose.y / LATTICE_STEP
    ri, rj = round(i), round(j)
    if abs(i - ri) > 1e-9 or abs(j - rj) > 1e-9:
        return None
    return ri, rj


def cost_to_go(maze: MazeSpec, goal: Pose) -> np.ndarray:
    """Minimum actions-before-STOP for every lattice state, shape (nx, ny, headings).

    Lattice states are positions on the 0.25 m grid with any of the twelve
    headings; forward moves are only taken along the four axis headings, so
    from a lattice state the agent never leaves the lattice.
    """
    key = ("ctg", goal.x, goal.y)
    if key in maze._fields:
        return maze._fields[key]
    nx = int(round(maze.width * maze.cell_size / LATTICE_STEP)) + 1
    ny = int(round(maze.height * maze.cell_size / LATTICE_STEP)) + 1
    xs = np.arange(nx) * LATTICE_STEP
    ys = np.arange(ny) * LATTICE_STEP
    clear = np.array([[is_clear(maze, x, y) for y in ys] for x in xs])
    cost = np.full((nx, ny, _N_HEADINGS), _UNREACHED, dtype=np.int64)
    queue = deque()
    for i, j in zip(*np.nonzero(clear)):
        if math.hypot(xs[i] - goal.x, ys[j] - goal.y) <= SUCCESS_RADIUS:
            cost[i, j, :] = 0
            queue.extend((int(i), int(j), hd) for hd in range(_N_HEADINGS))
    axis = {0: (1, 0), 3: (0, 1), 6: (-1, 0), 9: (0, -1)}
    while queue:
        i, j, hd = queue.popleft()
        c = cost[i, j, hd] + 1
        # predecessors by a turn: heading hd-1 (turned left into hd) or hd+1
        for ph in ((hd - 1) % _N_HEADINGS, (hd + 1) % _N_HEADINGS):
            if cost[i, j, ph] > c:
                cost[i, j, ph] = c
                queue.append((i, j, ph))
        if hd in axis:
            di, dj = axis[hd]
            pi, pj = i - di, j - dj
            if 0 <= pi < nx and 0 <= pj < ny and clear[pi, pj] and cost[pi, pj, hd] > c:
                cost[pi, pj, hd] = c
                queue.append((pi, pj, hd))
    maze._fields[key] = cost
    return cost


def _greedy_action(maze: MazeSpec, pose: Pose, goal: Pose) -> Action:
    """Off-lattice fallback: score the twelve headings by the continuous geodesic
    after one clear forward step; move if the current heading is best, otherwise
    turn the short way toward the best heading (smallest rotation, left first)."""
    scored = []
    for i in range(_N_HEADINGS):
        h = i * TURN_DEGREES
        ux, uy = unit_vector(h)
        nx, ny = pose.x + FORWARD_METERS * ux, pose.y + FORWARD_METERS * uy
        if not is_clear(maze, nx, ny):
            continue
        ccw = (h - pose.heading) % 360
        scored.append((path_distance(maze, nx, ny, goal), min(ccw, 360 - ccw), 0 if ccw <= 180 else 1))
    if not scored:
        return Action.TURN_LEFT
    best_val = min(s[0] for s in scored)
    choice = min((s for s in scored if s[0] <= best_val + 1e-9), key=lambda s: (s[1], s[2]))
    if choice[1] == 0:
        return Action.MOVE_FORWARD
    return Action.TURN_LEFT if choice[2] == 0 else Action.TURN_RIGHT


def follower_action(maze: MazeSpec, pose: Pose, goal: Pose) -> Action:
    """Expert action toward ``goal``.

    STOP inside the success radius. On the forward-step lattice the action
    minimizes the exact remaining step count (ties: MOVE_FORWARD, TURN_LEFT,
    TURN_RIGHT); elsewhere the greedy geodesic rule applies.
    """
    if euclidean(pose, goal) <= SUCCESS_RADIUS:
        return Action.STOP
    if math.isinf(path_distance(maze, pose.x, pose.y, goal)):
        raise UnreachableGoalError(f"goal unreachable from ({pose.x}, {pose.y})")
    ij = _on_lattice(maze, pose)
    if ij is not None:
        cost = cost_to_go(maze, goal)
        i, j = ij
        if 0 <= i < cost.shape[0] and 0 <= j < cost.shape[1] and cost[i, j, pose.heading // TURN_DEGREES] < _UNREACHED:
            best, best_cost = None, _UNREACHED
            for a in (Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
                nxt, collided = apply_action(maze, pose, a)
                if collided:
                    continue
                nij = _on_lattice(maze, nxt)
                if nij is None:
                    continue
                c = cost[nij[0], nij[1], nxt.heading // TURN_DEGREES]
                if c < best_cost:
                    best, best_cost = a, c
            if best is not None:
                return best
    return _greedy_action(maze, pose, goal)


def follow_until(maze: MazeSpec, pose: Pose, goal: Pose, n_steps: int) -> tuple[Pose, bool]:
    """Run up to ``n_steps`` expert actions; returns (pose, stopped) where
    ``stopped`` means the expert chose STOP within the window."""
    for _ in range(n_steps):
        a = follower_action(maze, pose, goal)
        if a == Action.STOP:
            return pose, True
        pose, _ = apply_action(maze, pose, a)
    return pose, False


def follow(maze: MazeSpec, pose: Pose, goal: Pose, n_steps: int) -> Pose:
    """Pose reached by executing up to ``n_steps`` expert actions (stops early on STOP)."""
    return follow_until(maze, pose, goal, n_steps)[0]


def collect_trajectory(episode: EpisodeSpec, max_steps: int | None = None) -> Trajectory:
    budget = max_steps if max_steps is not None else episode.max_steps
    env = NavEnv(episode)
    poses, actions, frames = [env.pose], [], [env.observation]
    while not env.done:
        if env.steps >= budget:
            break
        a = follower_action(episode.maze, env.pose, episode.goal)
        env.step(a)
        actions.append(a)
        poses.append(env.pose)
        frames.append(env.observation)
    if not actions or actions[-1] != Action.STOP:
        raise CollectionError(f"expert did not STOP within {budget} steps on {episode.episode_id}")
    return Trajectory(episode.episode_id, poses, actions, frames)


def collect_many(episodes: list[EpisodeSpec], workers: int = 1) -> list[Trajectory]:
    if workers <= 1:
        return [collect_trajectory(ep) for ep in episodes]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(collect_trajectory, episodes))


def build_tuples(
    traj: Trajectory,
    k: int,
    h: int,
    goal_image: np.ndarray,
    instruction: list[int] | None = None,
) -> list[TrainingTuple]:
    if k < 1 or h < 1:
        raise ValueError("k and h must be >= 1")
    if not traj.frames:
        raise ValueError("empty trajectory")
    y = list(instruction) if instruction is not None else tokenize()
    frames = traj.frames
    last = len(frames) - 1
    out = []
    for t in range(len(frames)):
        hist = [frames[max(0, i)] for i in range(t - h + 1, t + 1)]
        out.append(TrainingTuple(frames[t], frames[min(t + k, last)], hist, y, goal_image))
    return out


def _write_json_atomic(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1))
    os.replace(tmp, path)


def write_episode(root: str | Path, split: str, episode: EpisodeSpec, traj: Trajectory, k: int, h: int) -> int:
    """Persist one expert episode; returns the number of tuples it yields."""
    ep_dir = Path(root) / split / traj.episode_id
    frame_dir = ep_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(traj.frames):
        save_png(frame_dir / f"{i:05d}.png", f)
    goal_index = len(traj.frames)
    save_png(frame_dir / f"{goal_index:05d}.png", episode.goal_image)
    manifest = {
        "format": DATASET_FORMAT,
        "episode_id": traj.episode_id,
        "maze": json.loads(episode.maze.to_json()),
        "start": episode.start.to_dict(),
        "goal": episode.goal.to_dict(),
        "shortest_length": episode.shortest_length,
        "poses": [p.to_dict() for p in traj.poses],
        "actions": [int(a) for a in traj.actions],
        "n_frames": len(traj.frames),
        "goal_frame_index": goal_index,
        "k": k,
        "h": h,
        "instruction": INSTRUCTION,
        "resolution": int(episode.goal_image.shape[0]),
    }
    _write_json_atomic(ep_dir / "manifest.json", manifest)
    return len(traj.frames)


def write_index(root: str | Path, entries: dict[str, list[dict]], k: int, h: int) -> None:
    """``entries`` maps split name to [{"episode_id", "n_tuples"}, ...]."""
    _write_json_atomic(Path(root) / "index.json", {"format": DATASET_FORMAT, "k": k, "h": h, "splits": entries})


def load_episode_tuples(ep_dir: str | Path) -> list[TrainingTuple]:
    ep_dir = Path(ep_dir)
    manifest = json.loads((ep_dir / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    frames = [load_png(ep_dir / "frames" / f"{i:05d}.png") for i in range(manifest["n_frames"])]
    goal = load_png(ep_dir / "frames" / f"{manifest['goal_frame_index']:05d}.png")
    traj = Trajectory(
        manifest["episode_id"],
        [Pose.from_dict(p) for p in manifest["poses"]],
        [Action(a) for a in manifest["actions"]],
        frames,
    )
    return build_tuples(traj, manifest["k"], manifest["h"], goal, tokenize(manifest["instruction"]))


def load_split(root: str | Path, split: str) -> list[TrainingTuple]:
    index = json.loads((Path(root) / "index.json").read_text())
    if index.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {index.get('format')!r}")
    tuples = []
    for entry in index["splits"].get(split, []):
        tuples.extend(load_episode_tuples(Path(root) / split / entry["episode_id"]))
    return tuples


def render_future(episode: EpisodeSpec, pose: Pose, k: int) -> np.ndarray:
    """Privileged future: frame at the pose the expert reaches in k steps.

    When the expert would STOP inside the window the trajectory is clamped to
    its end, which is the goal view itself.
    """
    target, stopped = follow_until(episode.maze, pose, episode.goal, k)
    if stopped:
        return np.array(episode.goal_image, dtype=np.float32, copy=True)
    return render_ego(episode.maze, target, episode.resolution, episode.fov)
