from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse import lil_matrix
from scipy.sparse.csgraph import shortest_path

from costeps.tasks import (
    MazeSpec,
    bfs_oracle,
    chance_score,
    decode_positions,
    gen_maze,
    gen_maze_pair,
    gen_pattern,
    instance_from_json,
    make_instances,
    next_in_cycle,
    path_is_valid,
    render_maze,
    score,
)
from costeps.tensor import Rng


def graph_distance(walls, start, goal):
    """Oracle: all-pairs shortest path on the free-cell grid graph."""
    g = walls.shape[0]
    adj = lil_matrix((g * g, g * g))
    for r in range(g):
        for c in range(g):
            if walls[r, c]:
                continue
            for dr, dc in ((1, 0), (0, 1)):
                rr, cc = r + dr, c + dc
                if rr < g and cc < g and not walls[rr, cc]:
                    adj[r * g + c, rr * g + cc] = 1
                    adj[rr * g + cc, r * g + c] = 1
    d = shortest_path(adj.tocsr(), unweighted=True, indices=start[0] * g + start[1])
    return d[goal[0] * g + goal[1]]


@given(st.integers(0, 2**32), st.floats(0, 0.5))
def test_bfs_matches_graph_oracle(seed, density):
    r = np.random.default_rng(seed)
    walls = r.random((5, 5)) < density
    free = np.argwhere(~walls)
    if len(free) < 2:
        return
    start, goal = (tuple(int(v) for v in free[i]) for i in r.choice(len(free), 2, replace=False))
    path = bfs_oracle(MazeSpec(5, walls, start, goal))
    dist = graph_distance(walls, start, goal)
    if np.isinf(dist):
        assert path is None
    else:
        assert path is not None and len(path) - 1 == dist
        assert path_is_valid(path, walls, start, goal)


def test_bfs_tie_break_prefers_north_then_east():
    walls = np.zeros((3, 3), dtype=bool)
    path = bfs_oracle(MazeSpec(3, walls, (2, 0), (0, 2)))
    assert path == [(2, 0), (1, 0), (0, 0), (0, 1), (0, 2)]


def test_path_validity_rejects_jumps_and_walls():
    walls = np.zeros((3, 3), dtype=bool)
    walls[1, 1] = True
    assert not path_is_valid([(0, 0), (0, 2)], walls, (0, 0), (0, 2))
    assert not path_is_valid([(0, 1), (1, 1), (2, 1)], walls, (0, 1), (2, 1))


@pytest.mark.parametrize("seed", range(20))
def test_generated_maze_is_solvable_and_renders(seed):
    inst = gen_maze(Rng(seed), 5, 8)
    spec = inst.spec
    assert len(spec.oracle_path) - 1 <= 7
    assert set(np.unique(inst.target)) <= {-1.0, 1.0}
    assert decode_positions(inst.target)[-1] == spec.goal
    rep = score(inst.target, inst)
    assert rep.total == 1.0


def test_render_rejects_long_path():
    inst = gen_maze(Rng(3), 5, 8, min_len=4)
    with pytest.raises(ValueError):
        render_maze(inst.spec, 3)


def test_min_len_respected():
    for s in range(10):
        assert len(gen_maze(Rng(s), 5, 8, min_len=4).spec.oracle_path) - 1 >= 4


def test_decode_tie_break_lowest_index():
    video = np.full((1, 3, 3, 4), -1.0)
    video[0, 1, 2, 1] = 1
    video[0, 2, 0, 1] = 1
    assert decode_positions(video) == [(1, 2)]


def test_maze_score_components():
    inst = gen_maze(Rng(5), 5, 8, min_len=3)
    stay = np.repeat(inst.target[:1], 8, axis=0)
    rep = score(stay, inst)
    assert rep.components == {"reach_goal": 0.0, "path_validity": 1.0, "wall_avoidance": 1.0}
    assert rep.total == pytest.approx(2 / 3)


def test_score_accepts_other_frame_counts():
    inst = gen_maze(Rng(5), 5, 8)
    assert score(inst.target[:1], inst).components["path_validity"] == 1.0
    with pytest.raises(ValueError):
        score(inst.target[:, :3], inst)


def test_pair_shares_walls_and_start():
    a, b = gen_maze_pair(Rng(7), 5, 8)
    assert np.array_equal(a.spec.walls, b.spec.walls) and a.spec.start == b.spec.start
    assert a.spec.goal != b.spec.goal


def test_pattern_cycle_and_score():
    assert next_in_cycle(["L", "M", "S", "L"]) == "M"
    with pytest.raises(ValueError):
        next_in_cycle(["L", "S"])
    inst = gen_pattern(Rng(2), 8, 5)
    assert score(inst.target, inst).total == 1.0
    wrong = inst.target.copy()
    wrong[-1] = inst.target[-2]
    assert score(wrong, inst).total == 0.0


def test_instances_deterministic_and_ids_stable():
    a = make_instances("maze", 5, 42)
    b = make_instances("maze", 5, 42)
    assert [i.id for i in a] == [i.id for i in b]
    assert len({i.id for i in a}) == 5
    assert make_instances("maze", 2, 42, offset=3)[0].id == a[3].id
    with pytest.raises(ValueError):
        make_instances("sudoku", 1, 0)


def test_sidecar_rebuilds_instance():
    for inst in make_instances("maze", 3, 1) + make_instances("pattern", 3, 1):
        again = instance_from_json(inst.sidecar(), inst.frames)
        assert np.array_equal(again.target, inst.target) and again.id == inst.id


def test_chance_score_band():
    c = chance_score(make_instances("maze", 200, 9))
    assert 0.2 < c < 0.5
