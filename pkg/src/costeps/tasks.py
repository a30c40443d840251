"""Synthetic video-reasoning tasks on small grids.

Videos are ``(F, H, W, 4)`` arrays with values in {-1, +1}:

    maze     ch0 walls, ch1 agent (one cell per frame), ch2 goal, ch3 unused
    pattern  ch0 disc occupancy, ch1-ch3 unused

A maze video moves the agent one cell per frame along a shortest path and
then rests it on the goal. A pattern video shows centred discs whose size
cycles large, medium, small; the last frame holds the next size in the cycle.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng, derive_seed

CHANNELS = 4
FAMILY_IDS = {"maze": 1, "pattern": 2}
NEIGHBOURS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W

SIZE_CYCLE = ("L", "M", "S")
# cells within this Chebyshev / Manhattan footprint of the centre
SIZE_CELLS = {"S": 1, "M": 5, "L": 9}


@dataclass
class MazeSpec:
    size: int
    walls: np.ndarray  # (G, G) bool
    start: tuple[int, int]
    goal: tuple[int, int]
    oracle_path: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "size": self.size,
            "walls": self.walls.astype(int).tolist(),
            "start": list(self.start),
            "goal": list(self.goal),
            "oracle_path": [list(c) for c in self.oracle_path],
        }

    @classmethod
    def from_json(cls, d: dict) -> "MazeSpec":
        return cls(
            d["size"],
            np.array(d["walls"], dtype=bool),
            tuple(d["start"]),
            tuple(d["goal"]),
            [tuple(c) for c in d["oracle_path"]],
        )


@dataclass
class PatternSpec:
    size: int
    shown: list[str]
    hidden: str

    def to_json(self) -> dict:
        return {"size": self.size, "shown": list(self.shown), "hidden": self.hidden}

    @classmethod
    def from_json(cls, d: dict) -> "PatternSpec":
        return cls(d["size"], list(d["shown"]), d["hidden"])


@dataclass
class TaskInstance:
    family: str
    condition: np.ndarray  # (k, H, W, C)
    target: np.ndarray  # (F, H, W, C)
    spec: MazeSpec | PatternSpec
    seed: int
    id: str = ""

    def __post_init__(self):
        if not self.id:
            h = hashlib.sha256()
            h.update(self.family.encode())
            h.update(np.ascontiguousarray(self.target).tobytes())
            self.id = h.hexdigest()[:16]

    @property
    def n_cond(self) -> int:
        return self.condition.shape[0]

    @property
    def frames(self) -> int:
        return self.target.shape[0]

    @property
    def family_id(self) -> int:
        return FAMILY_IDS[self.family]

    def sidecar(self) -> dict:
        return {"id": self.id, "family": self.family, "seed": self.seed, "spec": self.spec.to_json()}


@dataclass
class ScoreReport:
    total: float
    components: dict[str, float]
    decoded: list


# --- maze --------------------------------------------------------------------


def bfs_oracle(maze: MazeSpec) -> list[tuple[int, int]] | None:
    """Shortest 4-connected wall-free path, neighbours tried in N, E, S, W order."""
    g = maze.size
    walls = maze.walls
    if walls[maze.start] or walls[maze.goal]:
        return None
    parent = {maze.start: None}
    queue = deque([maze.start])
    while queue:
        cur = queue.popleft()
        if cur == maze.goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = parent[cur]
            return path[::-1]
        r, c = cur
        for dr, dc in NEIGHBOURS:
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < g and 0 <= nxt[1] < g and not walls[nxt] and nxt not in parent:
                parent[nxt] = cur
                queue.append(nxt)
    return None


def path_is_valid(path, walls: np.ndarray, start, goal) -> bool:
    """Independent check: endpoints, 4-adjacency, in bounds, no walls."""
    if not path or tuple(path[0]) != tuple(start) or tuple(path[-1]) != tuple(goal):
        return False
    g = walls.shape[0]
    for r, c in path:
        if not (0 <= r < g and 0 <= c < g) or walls[r, c]:
            return False
    return all(abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1 for a, b in zip(path, path[1:]))


def _random_cell(rng: Rng, size: int, free: np.ndarray) -> tuple[int, int]:
    cells = np.flatnonzero(free.reshape(-1))
    k = int(cells[rng.integers(len(cells))])
    return (k // size, k % size)


def _sample_maze(rng: Rng, size: int, max_len: int, min_len: int, max_density: float, tries: int = 1000):
    for _ in range(tries):
        density = rng.uniform() * max_density
        walls = rng.uniform(size * size).reshape(size, size) < density
        free = ~walls
        if free.sum() < 2:
            continue
        start = _random_cell(rng, size, free)
        free_goal = free.copy()
        free_goal[start] = False
        goal = _random_cell(rng, size, free_goal)
        spec = MazeSpec(size, walls, start, goal)
        path = bfs_oracle(spec)
        if path is not None and min_len <= len(path) - 1 <= max_len:
            spec.oracle_path = path
            return spec
    return None


def make_maze(rng: Rng, size: int = 5, frames: int = 8, min_len: int = 1) -> MazeSpec:
    if size < 3:
        raise ValueError("maze size must be >= 3")
    if frames < 2:
        raise ValueError("maze videos need at least 2 frames")
    max_len = frames - 1
    if min_len > max_len:
        raise ValueError(f"min path length {min_len} cannot fit in {frames} frames")
    spec = _sample_maze(rng, size, max_len, min_len, 0.3)
    if spec is None:
        # relax: open grid always has a Manhattan path; keep drawing endpoints
        spec = _sample_maze(rng, size, max_len, min_len, 0.0, tries=100000)
    return spec


def render_maze(spec: MazeSpec, frames: int) -> np.ndarray:
    path = spec.oracle_path
    if len(path) - 1 > frames - 1:
        raise ValueError(f"path of {len(path) - 1} moves does not fit in {frames} frames")
    g = spec.size
    video = np.zeros((frames, g, g, CHANNELS), dtype=np.float32)
    video[:, :, :, 0] = spec.walls
    video[:, spec.goal[0], spec.goal[1], 2] = 1
    for t in range(frames):
        r, c = path[min(t, len(path) - 1)]
        video[t, r, c, 1] = 1
    return 2 * video - 1


def gen_maze(rng: Rng, size: int = 5, frames: int = 8, min_len: int = 1, seed: int = 0) -> TaskInstance:
    spec = make_maze(rng, size, frames, min_len)
    target = render_maze(spec, frames)
    return TaskInstance("maze", target[:1].copy(), target, spec, seed)


def gen_maze_pair(rng: Rng, size: int = 5, frames: int = 8, seed: int = 0) -> tuple[TaskInstance, TaskInstance]:
    """Two mazes sharing walls and start but with different goals."""
    while True:
        a = make_maze(rng, size, frames)
        free = ~a.walls
        free[a.start] = False
        free[a.goal] = False
        if not free.any():
            continue
        b = MazeSpec(size, a.walls.copy(), a.start, _random_cell(rng, size, free))
        path = bfs_oracle(b)
        if path is not None and len(path) - 1 <= frames - 1:
            b.oracle_path = path
            out = []
            for spec in (a, b):
                target = render_maze(spec, frames)
                out.append(TaskInstance("maze", target[:1].copy(), target, spec, seed))
            return out[0], out[1]


def decode_positions(video: np.ndarray) -> list[tuple[int, int]]:
    """Per-frame argmax of the agent channel; ties go to the lowest flat index."""
    f, h, w, _ = video.shape
    flat = video[..., 1].reshape(f, h * w)
    idx = np.argmax(flat, axis=1)
    return [(int(k // w), int(k % w)) for k in idx]


def score_maze(video: np.ndarray, spec: MazeSpec, weights=(1.0, 1.0, 1.0)) -> ScoreReport:
    cells = decode_positions(video)
    reach = float(cells[-1] == tuple(spec.goal))
    pairs = list(zip(cells, cells[1:]))
    if pairs:
        validity = float(np.mean([abs(a[0] - b[0]) + abs(a[1] - b[1]) <= 1 for a, b in pairs]))
    else:
        validity = 1.0
    avoid = float(np.mean([not spec.walls[c] for c in cells]))
    comps = {"reach_goal": reach, "path_validity": validity, "wall_avoidance": avoid}
    w = np.asarray(weights, dtype=np.float64)
    total = float(np.dot(w, [reach, validity, avoid]) / w.sum())
    return ScoreReport(total, comps, [list(c) for c in cells])


# --- pattern -----------------------------------------------------------------


def disc(size_class: str, g: int) -> np.ndarray:
    c = g // 2
    rr, cc = np.mgrid[0:g, 0:g]
    if size_class == "S":
        return (rr == c) & (cc == c)
    if size_class == "M":
        return np.abs(rr - c) + np.abs(cc - c) <= 1
    if size_class == "L":
        return np.maximum(np.abs(rr - c), np.abs(cc - c)) <= 1
    raise ValueError(f"unknown size class {size_class!r}")


def next_in_cycle(shown: list[str]) -> str:
    """The size that continues a large, medium, small cycle."""
    if not shown:
        raise ValueError("need at least one shown item")
    phase = SIZE_CYCLE.index(shown[0])
    for k, item in enumerate(shown):
        if item != SIZE_CYCLE[(phase + k) % 3]:
            raise ValueError(f"{shown} does not follow the {SIZE_CYCLE} cycle")
    return SIZE_CYCLE[(phase + len(shown)) % 3]


def render_pattern(spec: PatternSpec) -> np.ndarray:
    g = spec.size
    items = list(spec.shown) + [spec.hidden]
    video = np.zeros((len(items), g, g, CHANNELS), dtype=np.float32)
    for t, item in enumerate(items):
        video[t, :, :, 0] = disc(item, g)
    return 2 * video - 1


def gen_pattern(rng: Rng, frames: int = 8, size: int = 5, seed: int = 0) -> TaskInstance:
    if frames < 4:
        raise ValueError("pattern videos need at least 4 frames")
    phase = rng.integers(3)
    shown = [SIZE_CYCLE[(phase + k) % 3] for k in range(frames - 1)]
    spec = PatternSpec(size, shown, next_in_cycle(shown))
    target = render_pattern(spec)
    return TaskInstance("pattern", target[:-1].copy(), target, spec, seed)


def decode_size(frame: np.ndarray) -> str:
    count = int((frame[..., 0] > 0).sum())
    return min(SIZE_CELLS, key=lambda k: (abs(SIZE_CELLS[k] - count), SIZE_CELLS[k]))


def score_pattern(video: np.ndarray, spec: PatternSpec) -> ScoreReport:
    got = decode_size(video[-1])
    ok = float(got == spec.hidden)
    return ScoreReport(ok, {"correct_completion": ok}, [decode_size(f) for f in video])


# --- dispatch ----------------------------------------------------------------


def score(video: np.ndarray, instance: TaskInstance, weights=(1.0, 1.0, 1.0), family: str | None = None) -> ScoreReport:
    """Score a generated ``(F', H, W, C)`` video; ``F'`` may differ from the target's."""
    if family is not None and family != instance.family:
        raise ValueError(f"family mismatch: {family} vs {instance.family}")
    if video.ndim != 4 or video.shape[1:] != instance.target.shape[1:]:
        raise ValueError(f"video shape {video.shape} does not match instance {instance.target.shape}")
    if instance.family == "maze":
        return score_maze(video, instance.spec, weights)
    if instance.family == "pattern":
        return score_pattern(video, instance.spec)
    raise ValueError(f"unknown family {instance.family}")


GENERATORS = {
    "maze": lambda rng, frames, size, seed: gen_maze(rng, size, frames, seed=seed),
    "pattern": lambda rng, frames, size, seed: gen_pattern(rng, frames, size, seed=seed),
}


def make_instances(family: str, count: int, seed: int, frames: int = 8, size: int = 5, offset: int = 0) -> list[TaskInstance]:
    """Deterministic list of instances; instance ``i`` uses seed ``derive(seed, i)``."""
    if family not in GENERATORS:
        raise ValueError(f"unknown task family {family!r}; known: {sorted(GENERATORS)}")
    out = []
    for i in range(offset, offset + count):
        s = derive_seed(seed, i)
        out.append(GENERATORS[family](Rng(s), frames, size, s))
    return out


def instance_from_json(sidecar: dict, frames: int) -> TaskInstance:
    """Rebuild an instance from its JSON sidecar."""
    family = sidecar["family"]
    if family == "maze":
        spec = MazeSpec.from_json(sidecar["spec"])
        target = render_maze(spec, frames)
        return TaskInstance(family, target[:1].copy(), target, spec, sidecar["seed"])
    spec = PatternSpec.from_json(sidecar["spec"])
    target = render_pattern(spec)
    return TaskInstance(family, target[:-1].copy(), target, spec, sidecar["seed"])


def chance_score(instances: list[TaskInstance], seed: int = 0) -> float:
    """Mean total score of i.i.d. Uniform(-1, 1) videos against ``instances``."""
    rng = Rng(seed)
    totals = []
    for inst in instances:
        video = rng.uniform(inst.target.size).reshape(inst.target.shape) * 2 - 1
        totals.append(score(video, inst).total)
    return float(np.mean(totals))
