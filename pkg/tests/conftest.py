import os
from collections import deque

import numpy as np
import pytest
import torch

from navdiff.mazeworld import MazeSpec

torch.set_num_threads(1)


def bfs_hops(grid: np.ndarray, src) -> dict:
    """Plain BFS over free cells, written independently of MazeSpec.distance_field."""
    h, w = grid.shape
    seen = {src: 0}
    q = deque([src])
    while q:
        r, c = q.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and not grid[nr, nc] and (nr, nc) not in seen:
                seen[(nr, nc)] = seen[(r, c)] + 1
                q.append((nr, nc))
    return seen


def room_maze(free_rows: int = 1, free_cols: int = 1, cell_size: float = 0.5) -> MazeSpec:
    grid = np.ones((free_rows + 2, free_cols + 2), dtype=bool)
    grid[1:-1, 1:-1] = False
    return MazeSpec(grid, cell_size, None, 0)


@pytest.fixture
def tmp_runs(tmp_path, monkeypatch):
    monkeypatch.setenv("NAVDIFF_RUNS", str(tmp_path / "runs"))
    return tmp_path / "runs"


def acceptance_cache_dir():
    return os.environ.get("NAVDIFF_ACCEPTANCE_CACHE")


def lattice_bfs_steps(maze, start, goal, radius=1.0):
    """Fewest actions (STOP included) from ``start`` to a STOP inside ``radius``.

    Exhaustive BFS over (position, heading) states. Forward moves are allowed
    only along the four axis headings, which keeps positions on the 0.25 m
    lattice and the state space finite.
    """
    from navdiff.mazeworld import Action, apply_action, euclidean

    def key(p):
        return (round(p.x / 0.25), round(p.y / 0.25), p.heading)

    q = deque([(start, 0)])
    seen = {key(start)}
    while q:
        p, d = q.popleft()
        if euclidean(p, goal) <= radius:
            return d + 1
        for a in (Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
            if a == Action.MOVE_FORWARD and p.heading % 90:
                continue
            n, collided = apply_action(maze, p, a)
            if collided or key(n) in seen:
                continue
            seen.add(key(n))
            q.append((n, d + 1))
    return None
