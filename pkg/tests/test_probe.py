from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from costeps import probe
from costeps.flowmatch import Schedule, euler_sample, example_seeds
from costeps.model import DiT, HiddenState, HookRegistry
from costeps.probe import (
    EnsembleConfig,
    EnsembleError,
    NoiseAtFrame,
    NoiseAtStep,
    ProbeError,
    cka_matrix,
    energy_map,
    ensemble_sample,
    group_mean,
    linear_cka,
    paper_window,
)
from costeps.tasks import gen_maze_pair, make_instances
from costeps.tensor import Rng

from conftest import tiny_config


# --- CKA ----------------------------------------------------------------------


def cka_loops(x, y):
    """Scalar-loop linear CKA: centre columns, then Frobenius norms of cross-covariances."""
    n = len(x)

    def centre(a):
        out = [[0.0] * len(a[0]) for _ in range(n)]
        for j in range(len(a[0])):
            m = sum(a[i][j] for i in range(n)) / n
            for i in range(n):
                out[i][j] = a[i][j] - m
        return out

    def hsic(a, b):
        total = 0.0
        for p in range(len(a[0])):
            for q in range(len(b[0])):
                s = 0.0
                for i in range(n):
                    s += a[i][p] * b[i][q]
                total += s * s
        return total

    xc, yc = centre(x.tolist()), centre(y.tolist())
    return hsic(xc, yc) / (hsic(xc, xc) * hsic(yc, yc)) ** 0.5


def test_cka_matches_scalar_oracle():
    r = np.random.default_rng(0)
    for d1, d2 in [(3, 3), (4, 2), (2, 5)]:
        x, y = r.standard_normal((7, d1)), r.standard_normal((7, d2))
        assert abs(linear_cka(x, y) - cka_loops(x, y)) <= 1e-12


def test_cka_self_similarity_and_invariances():
    r = np.random.default_rng(1)
    x = r.standard_normal((30, 6))
    q, _ = np.linalg.qr(r.standard_normal((6, 6)))
    assert abs(linear_cka(x, x) - 1) <= 1e-9
    assert abs(linear_cka(x, x @ q) - 1) <= 1e-9
    y = r.standard_normal((30, 4))
    assert abs(linear_cka(x, y) - linear_cka(x @ q * 3.7, y)) <= 1e-9


@given(st.integers(0, 10_000))
def test_cka_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    v = linear_cka(r.standard_normal((6, 3)), r.standard_normal((6, 2)))
    assert -1e-12 <= v <= 1 + 1e-12


def test_cka_constant_input_and_bad_shapes():
    assert linear_cka(np.ones((4, 2)), np.random.default_rng(0).standard_normal((4, 2))) == 0.0
    with pytest.raises(ProbeError):
        linear_cka(np.ones((4, 2)), np.ones((5, 2)))


# --- fixtures ----------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return DiT(tiny_config(layers=3), seed=5)


@pytest.fixture(scope="module")
def instances():
    return make_instances("maze", 3, 17, frames=4)


def cond(instances):
    return probe.conditioning_for(instances)


# --- interventions -------------------------------------------------------------


def test_cka_matrix_zero_block_and_range(model, instances):
    seeds = example_seeds(0, 3)
    sch = Schedule(5)
    clean = euler_sample(model, cond(instances), seeds, sch)
    runs = [euler_sample(model, cond(instances), seeds, sch, None, [NoiseAtStep(s, 1)]) for s in range(5)]
    mat = cka_matrix(clean, runs, list(range(5)))
    for i in range(5):
        assert np.all(mat.values[i, :i] == 0)
        assert mat.values[i, i] > 0
    assert np.all((mat.values >= 0) & (mat.values <= 1))


def test_noise_at_final_boundary_never_fires(model, instances):
    seeds = example_seeds(0, 3)
    sch = Schedule(4)
    clean = euler_sample(model, cond(instances), seeds, sch)
    late = euler_sample(model, cond(instances), seeds, sch, None, [NoiseAtStep(4, 1)])
    assert clean.equals(late)
    with pytest.raises(ProbeError):
        euler_sample(model, cond(instances), seeds, sch, None, [NoiseAtStep(5, 1)])


def test_noise_at_frame_guards_condition(model, instances):
    seeds = example_seeds(0, 3)
    with pytest.raises(ProbeError):
        euler_sample(model, cond(instances), seeds, Schedule(3), None, [NoiseAtFrame(0)])
    tr = euler_sample(model, cond(instances), seeds, Schedule(3), None, [NoiseAtFrame(2, 3)])
    clean = euler_sample(model, cond(instances), seeds, Schedule(3))
    assert not np.array_equal(tr.xs[0][:, 2], clean.xs[0][:, 2])
    assert np.array_equal(tr.xs[0][:, 1], clean.xs[0][:, 1])


def test_noise_unscaled_and_scaled_variants(model, instances):
    seeds = example_seeds(0, 3)
    a = euler_sample(model, cond(instances), seeds, Schedule(4), None, [NoiseAtStep(2, 7)])
    b = euler_sample(model, cond(instances), seeds, Schedule(4), None, [NoiseAtStep(2, 7, scaled=True)])
    # same draw, scaled by the noise level s = 0.5 before the condition clamp
    np.testing.assert_allclose(b.xs[2][:, 1:], 0.5 * a.xs[2][:, 1:], rtol=1e-6)


# --- energy ------------------------------------------------------------------


def test_energy_map_matches_loop_norms(model, instances):
    hooks = HookRegistry().capture([1], range(3))
    euler_sample(model, cond(instances), example_seeds(0, 3), Schedule(3), hooks)
    em = energy_map(hooks.at_step(1), batch_index=1)
    assert em.values.shape == (3, 4, 5, 5) and em.layers == [0, 1, 2]
    tok = hooks.get(1, 2).tokens[1]
    for n in (0, 37, 99):
        f, rem = divmod(n, 25)
        r, c = divmod(rem, 5)
        expected = sum(float(v) ** 2 for v in tok[n]) ** 0.5
        assert em.values[2, f, r, c] == pytest.approx(expected, rel=1e-6)
    assert em.tiled().shape == (15, 20)


def test_energy_map_rejects_mismatched_grid():
    bad = HiddenState(0, 0, np.zeros((1, 10, 4), np.float32), (2, 2, 2))
    with pytest.raises(ValueError):
        energy_map([bad])


# --- swap ---------------------------------------------------------------------


def pairs(n=3, frames=4):
    ps = [gen_maze_pair(Rng(i), 5, frames) for i in range(n)]
    return [p[0] for p in ps], [p[1] for p in ps]


def test_swap_with_own_state_is_noop(model):
    a, _ = pairs()
    seeds = example_seeds(0, 3)
    res = probe.layer_swap(model, a, a, 1, 1, seeds, Schedule(3))
    clean = euler_sample(model, cond(a), seeds, Schedule(3))
    assert np.array_equal(res.outputs, clean.final)


def test_swap_keeps_upstream_layers(model):
    a, b = pairs()
    seeds = example_seeds(0, 3)
    sch = Schedule(3)
    hooks_b = HookRegistry().capture([1], [1])
    src = euler_sample(model, cond(b), seeds, sch, hooks_b)
    clean_hooks = HookRegistry().capture([1], [0])
    euler_sample(model, cond(a), seeds, sch, clean_hooks)
    sw_hooks = HookRegistry().capture([1], [0])
    euler_sample(model, cond(a), seeds, sch, sw_hooks, [probe.LayerSwap(1, 1, src.hooks.get(1, 1))])
    assert np.array_equal(sw_hooks.get(1, 0).tokens, clean_hooks.get(1, 0).tokens)


def test_swap_sweep_one_rate_per_layer(model):
    a, b = pairs()
    rates = probe.swap_sweep(model, a, b, 0, example_seeds(0, 3), Schedule(2))
    assert len(rates) == 3 and all(0 <= r <= 1 for r in rates)


# --- ensemble ---------------------------------------------------------------------


def test_group_mean_identical_inputs_exact():
    v = np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32)
    assert np.array_equal(group_mean([v, v, v]), v)
    np.testing.assert_allclose(group_mean([v, 2 * v]), 1.5 * v, rtol=1e-6)


def test_ensemble_k1_equals_plain(model, instances):
    sch = Schedule(3)
    res = ensemble_sample(model, cond(instances), EnsembleConfig(1, (0, 1), (0, 1), (4,)), sch)
    plain = euler_sample(model, cond(instances), example_seeds(4, 3), sch)
    assert res.traces[0].equals(plain)


@pytest.mark.parametrize("concurrent", [False, True])
def test_ensemble_identical_seeds_equal_plain(model, instances, concurrent):
    sch = Schedule(3)
    res = ensemble_sample(model, cond(instances), EnsembleConfig(3, (1, 2), (0, 1), (4, 4, 4)), sch, concurrent=concurrent)
    plain = euler_sample(model, cond(instances), example_seeds(4, 3), sch)
    assert all(t.equals(plain) for t in res.traces)


def test_ensemble_distinct_seeds_agree_inside_window_only(model, instances):
    sch = Schedule(3)
    cfg = EnsembleConfig(3, (1, 1), (0,), (1, 2, 3))
    hooks = [HookRegistry().capture([0, 1], [0, 1, 2]) for _ in range(3)]
    ensemble_sample(model, cond(instances), cfg, sch, hooks=hooks)
    inside = [h.get(0, 1).tokens for h in hooks]
    assert max(np.abs(x - inside[0]).max() for x in inside) <= 1e-6
    for slot in [(0, 0), (1, 0), (1, 1), (1, 2)]:
        outs = [h.get(*slot).tokens for h in hooks]
        assert not np.array_equal(outs[0], outs[1])
    # later blocks of the same evaluation start from the shared mean
    downstream = [h.get(0, 2).tokens for h in hooks]
    assert all(np.array_equal(d, downstream[0]) for d in downstream)


def test_concurrent_matches_lockstep(model, instances):
    sch = Schedule(3)
    cfg = EnsembleConfig(2, (0, 1), (0, 2), (5, 6))
    a = ensemble_sample(model, cond(instances), cfg, sch)
    b = ensemble_sample(model, cond(instances), cfg, sch, concurrent=True)
    assert all(x.equals(y) for x, y in zip(a.traces, b.traces))


def test_ensemble_config_validation():
    with pytest.raises(ProbeError):
        EnsembleConfig(2, (0, 1), (0,), (1,))
    with pytest.raises(ProbeError):
        EnsembleConfig(0, (0, 1), (0,), ())


def test_lockstep_detects_divergence():
    from costeps.model import Exchange

    def gen(layer):
        yield Exchange(0, layer, "ensemble", np.zeros(2))
        return None

    with pytest.raises(EnsembleError):
        probe._lockstep([gen(0), gen(1)])


def test_window_mapping():
    assert paper_window(20, 29, 12) == (6, 8)
    assert paper_window(0, 9, 12) == (0, 2)
    assert paper_window(0, 39, 12) == (0, 11)


# --- sensitivity -------------------------------------------------------------


def test_sensitivity_curve_alignment():
    clean = np.array([1.0, 1.0])
    curve = probe.sensitivity_curve(clean, {5: ([0.5, 0.5], None), 2: ([1.0, 0.0], None)})
    assert curve.injection_steps == [2, 5]
    assert curve.score_drop == [0.5, 0.5] and curve.counts == [2, 2]
    with pytest.raises(ProbeError):
        probe.sensitivity_curve(clean, {})
