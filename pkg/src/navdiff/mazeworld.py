"""Procedural mazes, discrete-action dynamics and first-person ray-cast rendering.

World frame: x grows with the grid column, y with the grid row; cell ``(r, c)``
covers ``[c*cs, (c+1)*cs] x [r*cs, (r+1)*cs]``. Headings are integer degrees,
counter-clockwise, 0 pointing along +x.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

TURN_DEGREES = 30
FORWARD_METERS = 0.25
SUCCESS_RADIUS = 1.0
CLEARANCE = 0.1
WALL_HEIGHT = 1.0
DEFAULT_RESOLUTION = 64
DEFAULT_FOV = 90.0
MAZE_FORMAT = "navdiff.maze/1"

# RGB in [0, 1]; indexed by MazeSpec.palette.
WALL_COLORS = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.65, 0.25],
        [0.20, 0.35, 0.85],
        [0.90, 0.80, 0.20],
        [0.75, 0.30, 0.80],
        [0.20, 0.80, 0.80],
        [0.95, 0.55, 0.15],
        [0.55, 0.35, 0.20],
        [0.90, 0.90, 0.90],
        [0.45, 0.75, 0.45],
        [0.95, 0.50, 0.65],
        [0.40, 0.40, 0.55],
    ],
    dtype=np.float64,
)
FLOOR_COLOR = np.array([0.42, 0.38, 0.33])
CEILING_COLOR = np.array([0.70, 0.72, 0.78])


class Action(IntEnum):
    STOP = 0
    MOVE_FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


class InvalidPoseError(ValueError):
    pass


class EpisodeGenerationError(RuntimeError):
    pass


class EpisodeOverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heading", int(self.heading) % 360)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(float(d["x"]), float(d["y"]), int(d["heading"]))


def unit_vector(heading: float) -> tuple[float, float]:
    """Direction of a heading; exact for multiples of 90 degrees."""
    h = heading % 360
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    if h in exact:
        return exact[h]
    rad = math.radians(h)
    return math.cos(rad), math.sin(rad)


@dataclass(eq=False)
class MazeSpec:
    grid: np.ndarray  # (H, W) bool, True = occupied
    cell_size: float = 0.5
    palette: np.ndarray | None = None  # (H, W) int color ids, -1 on free cells
    seed: int = 0
    _fields: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.palette is None:
            rng = np.random.default_rng([self.seed, 0xC0101])
            pal = rng.integers(0, len(WALL_COLORS), size=self.grid.shape)
            self.palette = np.where(self.grid, pal, -1)
        self.palette = np.asarray(self.palette, dtype=np.int64)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MazeSpec):
            return NotImplemented
        return (
            self.grid.shape == other.grid.shape
            and bool(np.array_equal(self.grid, other.grid))
            and bool(np.array_equal(self.palette, other.palette))
            and self.cell_size == other.cell_size
            and self.seed == other.seed
        )

    __hash__ = None

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        r, c = cell
        return (c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free_cell(self, cell: tuple[int, int]) -> bool:
        return self.in_bounds(cell) and not self.grid[cell]

    def is_free_point(self, x: float, y: float) -> bool:
        return self.is_free_cell(self.cell_of(x, y))

    def free_cells(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(~self.grid)
        return list(zip(rows.tolist(), cols.tolist()))

    def distance_field(self, cell: tuple[int, int]) -> np.ndarray:
        """BFS hop counts from ``cell`` over 4-connected free cells (-1 = unreachable)."""
        key = tuple(cell)
        if key not in self._fields:
            if not self.is_free_cell(key):
                raise InvalidPoseError(f"cell {key} is occupied")
            dist = np.full(self.grid.shape, -1, dtype=np.int64)
            dist[key] = 0
            queue = deque([key])
            while queue:
                r, c = queue.popleft()
                for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                    n = (r + dr, c + dc)
                    if self.in_bounds(n) and not self.grid[n] and dist[n] < 0:
                        dist[n] = dist[r, c] + 1
                        queue.append(n)
            self._fields[key] = dist
        return self._fields[key]

    def to_json(self) -> str:
        doc = {
            "format": MAZE_FORMAT,
            "width": self.width,
            "height": self.height,
            "cell_size": self.cell_size,
            "seed": self.seed,
            "grid": "".join("1" if v else "0" for v in self.grid.ravel()),
            "palette": self.palette.ravel().tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MazeSpec":
        doc = json.loads(text)
        if doc.get("format") != MAZE_FORMAT:
            raise ValueError(f"unsupported maze format {doc.get('format')!r}")
        h, w = doc["height"], doc["width"]
        grid = np.array([ch == "1" for ch in doc["grid"]], dtype=bool).reshape(h, w)
        palette = np.array(doc["palette"], dtype=np.int64).reshape(h, w)
        return cls(grid, float(doc["cell_size"]), palette, int(doc["seed"]))


def generate_maze(seed: int, width: int = 11, height: int = 11, cell_size: float = 0.5) -> MazeSpec:
    """Carve a perfect maze with an iterative randomized depth-first search."""
    for name, v in (("width", width), ("height", height)):
        if v < 5 or v % 2 == 0:
            raise ValueError(f"{name} must be odd and >= 5, got {v}")
    rng = np.random.default_rng(seed)
    grid = np.ones((height, width), dtype=bool)
    start = (2 * int(rng.integers(0, height // 2)) + 1, 2 * int(rng.integers(0, width // 2)) + 1)
    grid[start] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = [
            (r + dr, c + dc)
            for dr, dc in ((0, 2), (2, 0), (0, -2), (-2, 0))
            if 0 < r + dr < height - 1 and 0 < c + dc < width - 1 and grid[r + dr, c + dc]
        ]
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(0, len(options)))]
        grid[(r + nr) // 2, (c + nc) // 2] = False
        grid[nr, nc] = False
        stack.append((nr, nc))
    return MazeSpec(grid, cell_size, None, seed)


def corridor_maze(length: int, cell_size: float = 0.5, seed: int = 0) -> MazeSpec:
    """A single straight east-west corridor of ``length`` free cells."""
    if length < 1:
        raise ValueError("corridor length must be positive")
    grid = np.ones((3, length + 2), dtype=bool)
    grid[1, 1:-1] = False
    return MazeSpec(grid, cell_size, None, seed)


def is_clear(maze: MazeSpec, x: float, y: float, radius: float = CLEARANCE) -> bool:
    """True when a disc of ``radius`` at (x, y) touches no occupied cell."""
    r0, c0 = maze.cell_of(x, y)
    if not maze.is_free_cell((r0, c0)):
        return False
    cs = maze.cell_size
    for r in range(r0 - 1, r0 + 2):
        for c in range(c0 - 1, c0 + 2):
            if maze.is_free_cell((r, c)):
                continue
            nx = min(max(x, c * cs), (c + 1) * cs)
            ny = min(max(y, r * cs), (r + 1) * cs)
            if (x - nx) ** 2 + (y - ny) ** 2 < radius * radius:
                return False
    return True


def _check_pose(maze: MazeSpec, pose: Pose) -> None:
    if not maze.is_free_point(pose.x, pose.y):
        raise InvalidPoseError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is not in free space")


def _cast_rays(maze: MazeSpec, pose: Pose, resolution: int, fov: float):
    """Vectorized DDA. Returns perpendicular hit distance (m), hit cell and side per column."""
    cs = maze.cell_size
    fx, fy = unit_vector(pose.heading)
    lx, ly = -fy, fx
    u = 1.0 - 2.0 * (np.arange(resolution) + 0.5) / resolution
    plane = math.tan(math.radians(fov) / 2.0)
    dx = fx + lx * plane * u
    dy = fy + ly * plane * u
    gx, gy = pose.x / cs, pose.y / cs
    map_x = np.full(resolution, int(math.floor(gx)))
    map_y = np.full(resolution, int(math.floor(gy)))
    with np.errstate(divide="ignore"):
        delta_x = np.where(dx == 0, np.inf, np.abs(1.0 / dx))
        delta_y = np.where(dy == 0, np.inf, np.abs(1.0 / dy))
    step_x = np.where(dx < 0, -1, 1)
    step_y = np.where(dy < 0, -1, 1)
    with np.errstate(invalid="ignore"):
        side_x = np.where(dx < 0, (gx - map_x) * delta_x, (map_x + 1.0 - gx) * delta_x)
        side_y = np.where(dy < 0, (gy - map_y) * delta_y, (map_y + 1.0 - gy) * delta_y)
    side_x = np.nan_to_num(side_x, nan=np.inf)
    side_y = np.nan_to_num(side_y, nan=np.inf)
    hit = np.zeros(resolution, dtype=bool)
    side = np.zeros(resolution, dtype=np.int64)
    max_iter = 2 * (maze.width + maze.height) + 4
    for _ in range(max_iter):
        active = ~hit
        if not active.any():
            break
        go_x = active & (side_x < side_y)
        go_y = active & ~go_x
        side_x = np.where(go_x, side_x + delta_x, side_x)
        map_x = np.where(go_x, map_x + step_x, map_x)
        side_y = np.where(go_y, side_y + delta_y, side_y)
        map_y = np.where(go_y, map_y + step_y, map_y)
        side = np.where(go_x, 0, np.where(go_y, 1, side))
        inside = (map_x >= 0) & (map_x < maze.width) & (map_y >= 0) & (map_y < maze.height)
        occ = np.ones(resolution, dtype=bool)
        occ[inside] = maze.grid[map_y[inside], map_x[inside]]
        hit |= active & occ
    map_x = np.clip(map_x, 0, maze.width - 1)
    map_y = np.clip(map_y, 0, maze.height - 1)
    perp = np.where(side == 0, side_x - delta_x, side_y - delta_y) * cs
    # Fractional position along the hit face, used for segment edge lines.
    along = np.where(side == 0, gy + perp / cs * dy, gx + perp / cs * dx)
    along = along - np.floor(along)
    return np.maximum(perp, 1e-6), map_y, map_x, side, along


def wall_fraction(maze: MazeSpec, pose: Pose, resolution: int = DEFAULT_RESOLUTION, fov: float = DEFAULT_FOV) -> np.ndarray:
    """Projected half-height of the wall in each column, as a fraction of half the image."""
    _check_pose(maze, pose)
    perp = _cast_rays(maze, pose, resolution, fov)[0]
    return (WALL_HEIGHT / 2.0) / (perp * math.tan(math.radians(fov) / 2.0))


def render_ego(maze: MazeSpec, pose: Pose, resolution: int = DEFAULT_RESOLUTION, fov: float = DEFAULT_FOV) -> np.ndarray:
    """First-person RGB frame, float32 (R, R, 3) in [0, 1]."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    if not 0 < fov < 180:
        raise ValueError("fov must lie in (0, 180)")
    _check_pose(maze, pose)
    perp, hr, hc, side, along = _cast_rays(maze, pose, resolution, fov)
    half = (WALL_HEIGHT / 2.0) / (perp * math.tan(math.radians(fov) / 2.0))

    v = 1.0 - 2.0 * (np.arange(resolution) + 0.5) / resolution  # +1 at the top row
    wall_rgb = WALL_COLORS[np.maximum(maze.palette[hr, hc], 0)]
    shade = (1.0 - 0.25 * side) / (1.0 + 0.35 * perp)
    edge = np.where((along < 0.06) | (along > 0.94), 0.55, 1.0)
    wall_rgb = wall_rgb * (shade * edge)[:, None]

    img = np.empty((resolution, resolution, 3))
    ceiling = CEILING_COLOR[None, :] * (0.55 + 0.45 * np.abs(v))[:, None]
    floor = FLOOR_COLOR[None, :] * (0.45 + 0.55 * np.abs(v))[:, None]
    background = np.where((v > 0)[:, None], ceiling, floor)
    img[:] = background[:, None, :]
    is_wall = np.abs(v)[:, None] <= half[None, :]
    img = np.where(is_wall[..., None], wall_rgb[None, :, :], img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class EpisodeSpec:
    maze: MazeSpec
    start: Pose
    goal: Pose
    goal_image: np.ndarray
    shortest_length: float
    max_steps: int = 200
    episode_id: str = ""
    resolution: int = DEFAULT_RESOLUTION
    fov: float = DEFAULT_FOV


@dataclass
class StepResult:
    pose: Pose
    observation: np.ndarray
    collided: bool
    done: bool
    success: bool
    geodesic_to_goal: float


def euclidean(a: Pose, b: Pose) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def geodesic_distance(maze: MazeSpec, a: Pose, b: Pose) -> float:
    """Shortest free-cell path length between the cells holding ``a`` and ``b``."""
    _check_pose(maze, a)
    _check_pose(maze, b)
    hops = maze.distance_field(maze.cell_of(b.x, b.y))[maze.cell_of(a.x, a.y)]
    if hops < 0:
        return math.inf
    return float(hops) * maze.cell_size


def path_distance(maze: MazeSpec, x: float, y: float, goal: Pose) -> float:
    """Continuous geodesic refinement: equals geodesic_distance at cell centers.

    Minimum over the point's own cell and its free 4-neighbours of the straight
    line to that cell's center plus the center's hop distance to the goal; the
    segment stays inside the convex union of the two cells.
    """
    gcell = maze.cell_of(goal.x, goal.y)
    dist = maze.distance_field(gcell)
    r, c = maze.cell_of(x, y)
    if not maze.is_free_cell((r, c)) or dist[r, c] < 0:
        return math.inf
    if (r, c) == gcell:
        return math.hypot(x - goal.x, y - goal.y)
    best = math.inf
    for dr, dc in ((0, 0), (0, 1), (1, 0), (0, -1), (-1, 0)):
        n = (r + dr, c + dc)
        if not maze.is_free_cell(n) or dist[n] < 0:
            continue
        if n == gcell:
            cx, cy = goal.x, goal.y
        else:
            cx, cy = maze.cell_center(n)
        best = min(best, math.hypot(x - cx, y - cy) + dist[n] * maze.cell_size)
    return best


def apply_action(maze: MazeSpec, pose: Pose, action: Action) -> tuple[Pose, bool]:
    """Pose transition only. Returns (new_pose, collided)."""
    action = Action(action)
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, pose.heading + TURN_DEGREES), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, pose.heading - TURN_DEGREES), False
    if action == Action.MOVE_FORWARD:
        ux, uy = unit_vector(pose.heading)
        nx, ny = pose.x + FORWARD_METERS * ux, pose.y + FORWARD_METERS * uy
        if not is_clear(maze, nx, ny):
            return pose, True
        return Pose(nx, ny, pose.heading), False
    return pose, False


def step(maze: MazeSpec, state: Pose, action: Action, episode: EpisodeSpec) -> StepResult:
    """One transition. Timeouts are handled by :class:`NavEnv`."""
    _check_pose(maze, state)
    new_pose, collided = apply_action(maze, state, action)
    done = Action(action) == Action.STOP
    success = done and euclidean(new_pose, episode.goal) <= SUCCESS_RADIUS
    obs = render_ego(maze, new_pose, episode.resolution, episode.fov)
    geo = path_distance(maze, new_pose.x, new_pose.y, episode.goal)
    return StepResult(new_pose, obs, collided, done, success, geo)


class NavEnv:
    """Stateful wrapper enforcing the step budget and rejecting steps after termination."""

    def __init__(self, episode: EpisodeSpec):
        self.episode = episode
        self.reset()

    def reset(self) -> np.ndarray:
        ep = self.episode
        self.pose = ep.start
        self.steps = 0
        self.done = False
        self.success = False
        self.path_length = 0.0
        self.observation = render_ego(ep.maze, ep.start, ep.resolution, ep.fov)
        self.geodesic = path_distance(ep.maze, ep.start.x, ep.start.y, ep.goal)
        return self.observation

    def step(self, action: Action) -> StepResult:
        if self.done:
            raise EpisodeOverError(f"episode {self.episode.episode_id} is already done")
        res = step(self.episode.maze, self.pose, action, self.episode)
        if Action(action) == Action.MOVE_FORWARD and not res.collided:
            self.path_length += FORWARD_METERS
        self.steps += 1
        if self.steps >= self.episode.max_steps and not res.done:
            res.done = True
        self.pose = res.pose
        self.observation = res.observation
        self.geodesic = res.geodesic_to_goal
        self.done = res.done
        self.success = res.success
        return res


def make_episode(
    maze: MazeSpec,
    seed: int,
    min_geo: float,
    max_geo: float,
    resolution: int = DEFAULT_RESOLUTION,
    fov: float = DEFAULT_FOV,
    max_steps: int = 200,
) -> EpisodeSpec:
    """Sample a start/goal pair of cell centers uniformly among all valid pairs.

    A pair is valid when its geodesic lies in [min_geo, max_geo] and the start
    is outside the success radius of the goal.
    """
    cells = maze.free_cells()
    cs = maze.cell_size
    pairs = []
    for g in cells:
        dist = maze.distance_field(g)
        for s in cells:
            if s == g or dist[s] < 0:
                continue
            geo = dist[s] * cs
            if not (min_geo <= geo <= max_geo):
                continue
            if math.hypot((s[0] - g[0]) * cs, (s[1] - g[1]) * cs) <= SUCCESS_RADIUS:
                continue
            pairs.append((s, g))
    if not pairs:
        raise EpisodeGenerationError(
            f"no start/goal pair with geodesic in [{min_geo}, {max_geo}] in maze seed {maze.seed}"
        )
    rng = np.random.default_rng([maze.seed, seed, 0xE915])
    s, g = pairs[int(rng.integers(0, len(pairs)))]
    n_head = 360 // TURN_DEGREES
    start = Pose(*maze.cell_center(s), TURN_DEGREES * int(rng.integers(0, n_head)))
    goal = Pose(*maze.cell_center(g), TURN_DEGREES * int(rng.integers(0, n_head)))
    return EpisodeSpec(
        maze=maze,
        start=start,
        goal=goal,
        goal_image=render_ego(maze, goal, resolution, fov),
        shortest_length=geodesic_distance(maze, start, goal),
        max_steps=max_steps,
        episode_id=f"m{maze.seed}-e{seed}",
        resolution=resolution,
        fov=fov,
    )


def to_uint8(obs: np.ndarray) -> np.ndarray:
    return np.round(np.clip(obs, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, obs: np.ndarray) -> None:
    Image.fromarray(to_uint8(obs)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
