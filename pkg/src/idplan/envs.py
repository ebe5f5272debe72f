"""Task generation and expert supervision.

Random connected occupancy mazes, 2-link-arm configuration-space maps, and
breadth-first-search expert action/distance maps, plus a binary dataset
format with a bit-exact roundtrip. Generation is a pure function of
(seed, config): per-sample RNG streams are derived from the dataset seed
and the sample index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "ACTION_NORTH", "ACTION_WEST", "ACTION_SOUTH", "ACTION_EAST", "ACTION_NONE",
    "ACTION_DELTAS", "OBSTACLE_DISTANCE",
    "OccupancyGrid", "PlanningSample", "ArmTask",
    "GenerationError", "CSpaceBlockedError", "DatasetFormatError",
    "generate_maze", "bfs_expert", "random_arm_task", "generate_cspace",
    "make_maze_dataset", "make_cspace_dataset",
    "write_dataset", "read_dataset", "observation",
    "KIND_MAZE", "KIND_CSPACE",
]

# Action codes; the order is also the tie-break priority everywhere.
ACTION_NORTH, ACTION_WEST, ACTION_SOUTH, ACTION_EAST = 0, 1, 2, 3
ACTION_NONE = 255
ACTION_DELTAS = np.array([[-1, 0], [0, -1], [1, 0], [0, 1]], dtype=np.int64)

OBSTACLE_DISTANCE = 0xFFFF

KIND_MAZE = 0
KIND_CSPACE = 1

_MAGIC = b"IDPD"
_VERSION = 1

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# Arm geometry: both links 0.35 in a unit workspace centered on the base.
ARM_LINK = 0.35
ARM_RADIUS_RANGE = (0.05, 0.15)
ARM_SAMPLES_PER_LINK = 32
_BASE_CLEARANCE = 0.05


class GenerationError(RuntimeError):
    """Generator could not produce a usable grid within its retry budget."""


class CSpaceBlockedError(RuntimeError):
    """Every configuration collides; the task needs to be redrawn."""


class DatasetFormatError(IOError):
    """Dataset file is corrupt, truncated, or of an unknown version."""


@dataclass
class OccupancyGrid:
    size: int
    cells: np.ndarray  # (m, m) bool, True = obstacle
    goal: tuple[int, int]


@dataclass
class PlanningSample:
    grid: OccupancyGrid
    expert_action: np.ndarray  # (m, m) uint8; ACTION_NONE on obstacles and the goal
    distance: np.ndarray  # (m, m) int32 hops to goal; OBSTACLE_DISTANCE on obstacles


@dataclass
class ArmTask:
    l1: float
    l2: float
    obstacles: list[tuple[float, float, float]]  # (cx, cy, radius)
    bins: int

    def __post_init__(self):
        if self.bins not in (18, 36):
            raise ValueError("bins must be 18 or 36")
        if not 0 <= len(self.obstacles) <= 5:
            raise ValueError("0 to 5 obstacles supported")


def _largest_free_component(free: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(free, structure=_FOUR_CONN)
    if count == 0:
        return np.zeros_like(free)
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    return labels == sizes.argmax()


def generate_maze(m: int, seed: int, density: float = 0.3, max_retries: int = 64) -> OccupancyGrid:
    """I.i.d. obstacles at ``density``, pruned to the largest free component.

    All free cells of the returned grid are 4-connected to the goal, which
    is drawn uniformly from them. Degenerate draws (fewer than 2 connected
    free cells) retry with seed+1, a bounded number of times.
    """
    if m < 3:
        raise ValueError("m must be >= 3")
    if not 0.0 <= density < 1.0:
        raise ValueError("density must lie in [0, 1)")
    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + attempt)
        obstacles = rng.random((m, m)) < density
        free = _largest_free_component(~obstacles)
        n_free = int(free.sum())
        if n_free < 2:
            continue
        cells = ~free
        rows, cols = np.nonzero(free)
        pick = int(rng.integers(n_free))
        return OccupancyGrid(size=m, cells=cells, goal=(int(rows[pick]), int(cols[pick])))
    raise GenerationError(f"no usable {m}x{m} grid after {max_retries} retries from seed {seed}")


def _bfs_distances(grid: OccupancyGrid) -> np.ndarray:
    m = grid.size
    free = ~grid.cells
    dist = np.full((m, m), OBSTACLE_DISTANCE, dtype=np.int32)
    frontier = np.zeros((m, m), dtype=bool)
    frontier[grid.goal] = True
    d = 0
    while frontier.any():
        dist[frontier] = d
        reached = dist != OBSTACLE_DISTANCE
        grown = np.zeros((m, m), dtype=bool)
        grown[:-1, :] |= frontier[1:, :]
        grown[1:, :] |= frontier[:-1, :]
        grown[:, :-1] |= frontier[:, 1:]
        grown[:, 1:] |= frontier[:, :-1]
        frontier = grown & free & ~reached
        d += 1
    return dist


def bfs_expert(grid: OccupancyGrid) -> PlanningSample:
    """Shortest-path supervision: hop distances and one greedy action per cell.

    The action is the first of (north, west, south, east) that steps to a
    neighbor one hop closer; obstacles and the goal get ACTION_NONE.
    """
    m = grid.size
    dist = _bfs_distances(grid)
    free = ~grid.cells
    if (free & (dist == OBSTACLE_DISTANCE)).any():
        raise GenerationError("grid has free cells unreachable from the goal")

    action = np.full((m, m), ACTION_NONE, dtype=np.uint8)
    needs = free & (dist > 0)
    big = np.int64(OBSTACLE_DISTANCE) + 1
    padded = np.full((m + 2, m + 2), big, dtype=np.int64)
    padded[1:-1, 1:-1] = dist
    for code, (dr, dc) in enumerate(ACTION_DELTAS):
        neighbor = padded[1 + dr : 1 + dr + m, 1 + dc : 1 + dc + m]
        take = needs & (action == ACTION_NONE) & (neighbor == dist - 1)
        action[take] = code
    return PlanningSample(grid=grid, expert_action=action, distance=dist)


def random_arm_task(rng: np.random.Generator, bins: int = 18, max_obstacles: int = 5) -> ArmTask:
    """Random workspace: 0..max_obstacles circles kept clear of the arm base."""
    n = int(rng.integers(0, max_obstacles + 1))
    obstacles = []
    for _ in range(n):
        radius = float(rng.uniform(*ARM_RADIUS_RANGE))
        for _ in range(100):
            cx, cy = rng.uniform(-0.5, 0.5, size=2)
            if np.hypot(cx, cy) > radius + _BASE_CLEARANCE:
                obstacles.append((float(cx), float(cy), radius))
                break
        else:
            raise GenerationError("could not place obstacle clear of the base")
    return ArmTask(l1=ARM_LINK, l2=ARM_LINK, obstacles=obstacles, bins=bins)


def cspace_collision_map(task: ArmTask, samples_per_link: int = ARM_SAMPLES_PER_LINK) -> np.ndarray:
    """Boolean (bins, bins) map: True where any sampled link point collides.

    Joint angles are the cell-center values of a uniform bins x bins
    discretization of [0, 2pi)^2; no angular wrap-around is applied to the
    resulting grid.
    """
    b = task.bins
    theta = (np.arange(b) + 0.5) * (2.0 * np.pi / b)
    t1 = theta[:, None]  # first joint varies over rows
    t2 = theta[None, :]
    elbow_x = task.l1 * np.cos(t1) + 0.0 * t2
    elbow_y = task.l1 * np.sin(t1) + 0.0 * t2
    tip_x = elbow_x + task.l2 * np.cos(t1 + t2)
    tip_y = elbow_y + task.l2 * np.sin(t1 + t2)

    ts = np.linspace(0.0, 1.0, samples_per_link)
    # Link 1 runs base->elbow, link 2 elbow->tip; both sampled densely.
    px1 = elbow_x[..., None] * ts
    py1 = elbow_y[..., None] * ts
    px2 = elbow_x[..., None] + (tip_x - elbow_x)[..., None] * ts
    py2 = elbow_y[..., None] + (tip_y - elbow_y)[..., None] * ts
    px = np.concatenate([px1, px2], axis=-1)
    py = np.concatenate([py1, py2], axis=-1)

    hit = np.zeros((b, b), dtype=bool)
    for cx, cy, radius in task.obstacles:
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        hit |= (d2 <= radius * radius).any(axis=-1)
    return hit


def generate_cspace(task: ArmTask, seed: int) -> OccupancyGrid:
    """Configuration-space occupancy grid for a 2-link arm task.

    Collision cells become obstacles, the free space is pruned to its
    largest 4-connected component, and the goal is drawn uniformly from it.
    Raises CSpaceBlockedError when no usable free space remains, so the
    caller can redraw the task.
    """
    hit = cspace_collision_map(task)
    free = _largest_free_component(~hit)
    n_free = int(free.sum())
    if n_free < 2:
        raise CSpaceBlockedError("configuration space is (nearly) fully blocked")
    rng = np.random.default_rng(seed)
    rows, cols = np.nonzero(free)
    pick = int(rng.integers(n_free))
    return OccupancyGrid(size=task.bins, cells=~free, goal=(int(rows[pick]), int(cols[pick])))


def make_maze_dataset(m: int, count: int, seed: int, density: float = 0.3) -> list[PlanningSample]:
    samples = []
    for i in range(count):
        sub = np.random.default_rng([seed, i]).integers(0, 2**31 - 1)
        samples.append(bfs_expert(generate_maze(m, int(sub), density)))
    return samples


def make_cspace_dataset(bins: int, count: int, seed: int, max_obstacles: int = 5) -> list[PlanningSample]:
    samples = []
    for i in range(count):
        for attempt in range(64):
            rng = np.random.default_rng([seed, i, attempt])
            task = random_arm_task(rng, bins=bins, max_obstacles=max_obstacles)
            try:
                grid = generate_cspace(task, seed=int(rng.integers(0, 2**31 - 1)))
            except CSpaceBlockedError:
                continue
            samples.append(bfs_expert(grid))
            break
        else:
            raise GenerationError(f"no valid arm task for sample {i} after 64 attempts")
    return samples


def observation(grid: OccupancyGrid) -> np.ndarray:
    """Planner input (2, m, m): occupancy in {0,1} and a goal one-hot."""
    obs = np.zeros((2, grid.size, grid.size))
    obs[0] = grid.cells.astype(np.float64)
    obs[1][grid.goal] = 1.0
    return obs


def write_dataset(path, samples: list[PlanningSample], kind: int = KIND_MAZE) -> None:
    """Little-endian binary dump; see read_dataset for the layout."""
    if kind not in (KIND_MAZE, KIND_CSPACE):
        raise ValueError(f"unknown dataset kind {kind}")
    sizes = {s.grid.size for s in samples}
    if len(sizes) > 1:
        raise ValueError(f"mixed map sizes in one dataset: {sorted(sizes)}")
    m = sizes.pop() if sizes else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIHB", _VERSION, len(samples), m, kind))
        for s in samples:
            fh.write(s.grid.cells.astype(np.uint8).tobytes())
            fh.write(struct.pack("<HH", s.grid.goal[0], s.grid.goal[1]))
            fh.write(s.expert_action.astype(np.uint8).tobytes())
            fh.write(s.distance.astype("<u2").tobytes())


def read_dataset(path) -> tuple[list[PlanningSample], int]:
    """Inverse of write_dataset; bit-exact roundtrip.

    Layout: magic "IDPD", u32 version, u32 count, u16 map size, u8 kind;
    then per sample: m*m occupancy bytes, u16 goal row, u16 goal col,
    m*m expert-action bytes, m*m u16 distances (0xFFFF on obstacles).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 4 + struct.calcsize("<IIHB"):
        raise DatasetFormatError(f"{path}: truncated header")
    version, count, m, kind = struct.unpack_from("<IIHB", blob, 4)
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    if kind not in (KIND_MAZE, KIND_CSPACE):
        raise DatasetFormatError(f"{path}: unknown kind {kind}")
    offset = 4 + struct.calcsize("<IIHB")
    cell_bytes = m * m
    sample_bytes = cell_bytes + 4 + cell_bytes + 2 * cell_bytes
    if len(blob) != offset + count * sample_bytes:
        raise DatasetFormatError(
            f"{path}: expected {offset + count * sample_bytes} bytes, found {len(blob)}"
        )
    samples = []
    for _ in range(count):
        cells = np.frombuffer(blob, np.uint8, cell_bytes, offset).reshape(m, m).astype(bool)
        offset += cell_bytes
        goal = struct.unpack_from("<HH", blob, offset)
        offset += 4
        action = np.frombuffer(blob, np.uint8, cell_bytes, offset).reshape(m, m).copy()
        offset += cell_bytes
        dist = np.frombuffer(blob, "<u2", cell_bytes, offset).reshape(m, m).astype(np.int32)
        offset += 2 * cell_bytes
        grid = OccupancyGrid(size=m, cells=cells, goal=(int(goal[0]), int(goal[1])))
        samples.append(PlanningSample(grid=grid, expert_action=action, distance=dist))
    return samples, kind
