"""Experiment runners behind the CLI verbs.

Each runner takes an :class:`ExperimentConfig` and an output directory,
writes its artifacts there, and returns a report dict (see
:mod:`costeps.report`). Per-instance entries are always listed in instance
order so reports are deterministic.
"""
from __future__ import annotations

import logging
import math
import time
from pathlib import Path

import numpy as np

from . import io, probe
from .config import ExperimentConfig
from .flowmatch import Schedule, TrainBatch, euler_sample, example_seeds, train_step
from .heatmap import colormap, emit_curve, emit_heatmap, write_ppm
from .model import DiT, HookRegistry
from .report import aggregate, build_report, paired_one_sided, write_report
from .tasks import TaskInstance, chance_score, gen_maze, gen_maze_pair, make_instances, score
from .tensor import Adam, Rng, derive_seed

log = logging.getLogger("costeps")

REPORT_NAME = "report.json"
CHECKPOINT_NAME = "model.cosk"


# --- shared helpers ----------------------------------------------------------


def load_model(cfg: ExperimentConfig) -> DiT:
    """Checkpoint if configured, otherwise a freshly initialised model."""
    if cfg.checkpoint:
        model, _ = io.load_checkpoint(cfg.checkpoint)
        return model
    return DiT(cfg.model, seed=cfg.model_seed)


def eval_instances(cfg: ExperimentConfig, count: int | None = None) -> list[TaskInstance]:
    t = cfg.task
    return make_instances(t.family, t.count if count is None else count, t.seed, t.frames, t.size)


def eval_seeds(cfg: ExperimentConfig, count: int) -> list[int]:
    return example_seeds(derive_seed(cfg.seed, 0x5EED), count)


def run_batched(model, instances, seeds, schedule, interventions=(), chunk: int = 100, fork=None):
    """Sample ``instances`` in chunks; returns the list of per-chunk traces."""
    if fork is not None and chunk < len(instances):
        raise ValueError("forking needs the whole batch in one chunk")
    traces = []
    for lo in range(0, len(instances), chunk):
        part = instances[lo : lo + chunk]
        traces.append(
            euler_sample(model, probe.conditioning_for(part), seeds[lo : lo + chunk], schedule, None, interventions, fork)
        )
    return traces


def finals(traces) -> np.ndarray:
    return np.concatenate([t.final for t in traces])


def score_videos(videos, instances, weights=(1.0, 1.0, 1.0)) -> list[dict]:
    out = []
    for v, inst in zip(videos, instances):
        rep = score(v, inst, weights)
        out.append({"id": inst.id, "score": rep.total, "components": rep.components})
    return out


def totals(entries) -> np.ndarray:
    return np.array([e["score"] for e in entries], dtype=np.float64)


def lr_at(step: int, total: int, lr: float, lr_final: float, warmup: int) -> float:
    """Linear warmup, then cosine decay from ``lr`` to ``lr_final``."""
    if warmup > 0 and step < warmup:
        return lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return lr_final + 0.5 * (lr - lr_final) * (1 + math.cos(math.pi * frac))


def _finish(cfg, mode, out: Path, instances, payload, seeds, t0) -> dict:
    rep = build_report(mode, cfg.hash(), seeds, instances, payload, time.time() - t0)
    write_report(out / REPORT_NAME, rep)
    return rep


def _middle_half(n: int) -> list[int]:
    return list(range(n // 4, n - n // 4))


# --- train / eval / sample ---------------------------------------------------


def train(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    tc = cfg.train
    model = model or load_model(cfg)
    opt = Adam(model.parameters(), lr=tc.lr)
    rng = Rng(derive_seed(tc.seed, 1))
    losses, stopped = [], "steps"
    for step in range(tc.steps):
        if time.time() - t0 > tc.time_budget_s:
            stopped = "time_budget"
            break
        family = tc.families[step % len(tc.families)]
        batch = make_instances(family, tc.batch, derive_seed(tc.seed, 2), cfg.task.frames, cfg.task.size, offset=step * tc.batch)
        x0 = np.stack([b.target for b in batch])
        fam = np.array([b.family_id for b in batch], dtype=np.int64)
        opt.state.lr = lr_at(step, tc.steps, tc.lr, tc.lr_final, tc.warmup)
        loss = train_step(model, TrainBatch(x0, fam, batch[0].n_cond), rng, opt, tc.cond_dropout)
        losses.append(loss)
        if step % tc.log_every == 0:
            log.info("step %d loss %.4f lr %.2e %.0fs", step, loss, opt.state.lr, time.time() - t0)
    train_time = time.time() - t0
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    io.save_checkpoint(ckpt, model, {"steps": len(losses), "config_hash": cfg.hash(), "final_loss": losses[-1] if losses else None})
    inst = eval_instances(cfg)
    seeds = eval_seeds(cfg, len(inst))
    entries = score_videos(finals(run_batched(model, inst, seeds, Schedule(cfg.schedule.n_steps))), inst)
    payload = {
        "steps_completed": len(losses),
        "stopped_by": stopped,
        "train_time_s": train_time,
        "losses": losses,
        "checkpoint": str(ckpt),
        "n_params": model.n_params(),
    }
    return _finish(cfg, "train", out, entries, payload, {"train": tc.seed, "eval": cfg.seed, "model": cfg.model_seed}, t0)


def evaluate(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    inst = eval_instances(cfg)
    seeds = eval_seeds(cfg, len(inst))
    entries = score_videos(finals(run_batched(model, inst, seeds, Schedule(cfg.schedule.n_steps))), inst)
    comps = {k: aggregate(e["components"][k] for e in entries) for k in entries[0]["components"]}
    payload = {"chance": chance_score(inst, seed=cfg.seed), "components": comps, "checkpoint": cfg.checkpoint}
    return _finish(cfg, "eval", out, entries, payload, {"eval": cfg.seed, "model": cfg.model_seed}, t0)


def _strip(video: np.ndarray, cell: int = 8) -> np.ndarray:
    """One row of frames; each cell coloured by its agent-channel value."""
    agent = (np.clip(video[..., 1], -1, 1) + 1) / 2  # (F, H, W)
    f, h, w = agent.shape
    tiles = np.zeros((h, f * (w + 1) - 1))
    for k in range(f):
        tiles[:, k * (w + 1) : k * (w + 1) + w] = agent[k]
    rgb = colormap(tiles)
    return np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)


def sample(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    inst = eval_instances(cfg)
    seeds = eval_seeds(cfg, len(inst))
    traces = run_batched(model, inst, seeds, Schedule(cfg.schedule.n_steps))
    videos = finals(traces)
    x0_hats = np.concatenate([np.stack(t.x0_hats, axis=1) for t in traces])  # (B, steps, F, H, W, C)
    out.mkdir(parents=True, exist_ok=True)
    io.save_array_with_axes(out / "x0_hats.cost", x0_hats, ["instance", "step", "frame", "row", "col", "channel"])
    io.save_array_with_axes(out / "final.cost", videos, ["instance", "frame", "row", "col", "channel"])
    for k in range(min(len(inst), 8)):
        write_ppm(out / f"strip_{k:03d}.ppm", _strip(videos[k]))
    entries = score_videos(videos, inst)
    payload = {"artifacts": ["x0_hats.cost", "final.cost"], "seeds": seeds}
    return _finish(cfg, "sample", out, entries, payload, {"eval": cfg.seed}, t0)


# --- perturbation ------------------------------------------------------------


def perturb(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    """Score drop under whole-latent noise at a step vs per-frame noise.

    By default every injection step and every non-conditioning frame is swept.
    The step-vs-frame comparison averages the step sweep over the middle half
    of the schedule. Runs share seeds with the clean run, and step-noise runs
    reuse the clean prefix before their injection step.
    """
    t0 = time.time()
    model = model or load_model(cfg)
    n = cfg.schedule.n_steps
    schedule = Schedule(n)
    iv = cfg.intervention
    inst = eval_instances(cfg)
    seeds = eval_seeds(cfg, len(inst))
    cond = probe.conditioning_for(inst)
    clean = euler_sample(model, cond, seeds, schedule)
    clean_scores = totals(score_videos(clean.final, inst))
    steps = iv.steps if iv.steps is not None else list(range(n))
    frames = iv.frames if iv.frames is not None else list(range(inst[0].n_cond, cfg.task.frames))
    sweep = {}
    for s in steps:
        noise = probe.NoiseAtStep(s, iv.seed, scaled=iv.scaled, clamp_condition=iv.clamp_condition)
        tr = euler_sample(model, cond, seeds, schedule, None, [noise], fork=(clean, s))
        sc = totals(score_videos(tr.final, inst))
        sweep[s] = (sc, tr)
        log.info("noise at step %d: drop %.3f", s, float(np.mean(clean_scores - sc)))
    frame_drops, frame_means = [], {}
    for f in frames:
        tr = euler_sample(model, cond, seeds, schedule, None, [probe.NoiseAtFrame(f, iv.seed)])
        sc = totals(score_videos(tr.final, inst))
        frame_drops.append(clean_scores - sc)
        frame_means[f] = float(np.mean(clean_scores - sc))
        log.info("noise at frame %d: drop %.3f", f, frame_means[f])
    middle = [s for s in _middle_half(n) if s in sweep]
    if not middle or not frame_drops:
        raise ValueError("perturb needs at least one middle-half step and one frame in the sweep")
    step_drop = np.mean([clean_scores - sweep[s][0] for s in middle], axis=0)
    frame_drop = np.mean(frame_drops, axis=0)
    # H1: step drop > 2 x frame drop, paired over instances
    test = paired_one_sided(step_drop - 2 * frame_drop)
    curve = probe.sensitivity_curve(clean_scores, sweep, clean)
    out.mkdir(parents=True, exist_ok=True)
    emit_curve({"score_drop": curve.score_drop, "dissimilarity": curve.final_dissimilarity}, out / "sensitivity.ppm")
    mean_frame = float(frame_drop.mean())
    payload = {
        "clean": aggregate(clean_scores),
        "middle_steps": middle,
        "frame_noise_frames": list(frames),
        "step_drop": aggregate(step_drop),
        "frame_drop": aggregate(frame_drop),
        "frame_drop_by_frame": frame_means,
        "ratio": float(step_drop.mean() / mean_frame) if mean_frame > 0 else None,
        "test_step_gt_2x_frame": test,
        "sensitivity": curve.to_json(),
    }
    entries = score_videos(clean.final, inst)
    return _finish(cfg, "perturb", out, entries, payload, {"eval": cfg.seed, "noise": iv.seed}, t0)


def cka(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    n = cfg.schedule.n_steps
    schedule = Schedule(n)
    iv = cfg.intervention
    inst = eval_instances(cfg)
    seeds = eval_seeds(cfg, len(inst))
    cond = probe.conditioning_for(inst)
    clean = euler_sample(model, cond, seeds, schedule)
    steps = iv.steps if iv.steps is not None else list(range(n))
    runs = []
    for s in steps:
        noise = probe.NoiseAtStep(s, iv.seed, scaled=iv.scaled, clamp_condition=iv.clamp_condition)
        runs.append(euler_sample(model, cond, seeds, schedule, None, [noise], fork=(clean, s)))
    mat = probe.cka_matrix(clean, runs, steps)
    out.mkdir(parents=True, exist_ok=True)
    emit_heatmap(mat.values, out / "cka.ppm", vmin=0.0, vmax=1.0)
    io.save_array_with_axes(out / "cka.cost", mat.values.astype(np.float64), ["injection_step", "measure_step"], {"injection_steps": list(steps)})
    entries = score_videos(clean.final, inst)
    return _finish(cfg, "cka", out, entries, {"cka": mat.to_json()}, {"eval": cfg.seed, "noise": iv.seed}, t0)


def energy(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    schedule = Schedule(cfg.schedule.n_steps)
    inst = eval_instances(cfg)
    seeds = eval_seeds(cfg, len(inst))
    hooks = HookRegistry().capture(cfg.energy.steps, range(model.config.layers))
    trace = euler_sample(model, probe.conditioning_for(inst), seeds, schedule, hooks)
    out.mkdir(parents=True, exist_ok=True)
    maps = {}
    for s in cfg.energy.steps:
        em = probe.energy_map(hooks.at_step(s), cfg.energy.batch_index)
        emit_heatmap(em.tiled(), out / f"energy_step{s:02d}.ppm")
        io.save_array_with_axes(out / f"energy_step{s:02d}.cost", em.values, ["layer", "frame", "row", "col"], {"step": s})
        maps[s] = {"layers": em.layers, "mean_by_layer": em.values.reshape(len(em.layers), -1).mean(axis=1)}
    entries = score_videos(trace.final, inst)
    return _finish(cfg, "energy", out, entries, {"energy": maps}, {"eval": cfg.seed}, t0)


# --- swap / ensemble ---------------------------------------------------------


def swap_pairs(cfg: ExperimentConfig, count: int | None = None):
    t = cfg.task
    pairs = [
        gen_maze_pair(Rng(derive_seed(t.seed, 0x5A, i)), t.size, t.frames, seed=derive_seed(t.seed, 0x5A, i))
        for i in range(t.count if count is None else count)
    ]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def swap(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    schedule = Schedule(cfg.schedule.n_steps)
    a, b = swap_pairs(cfg)
    seeds = eval_seeds(cfg, len(a))
    curves = {}
    for s in cfg.swap.steps:
        rates = probe.swap_sweep(model, a, b, s, seeds, schedule)
        if cfg.swap.layers is not None:
            rates = [rates[l] for l in cfg.swap.layers]
        curves[s] = rates
        log.info("swap at step %d: flip rates %s", s, np.round(rates, 3).tolist())
    out.mkdir(parents=True, exist_ok=True)
    emit_curve({f"step{s}": r for s, r in curves.items()}, out / "flip_rate.ppm")
    clean_a = euler_sample(model, probe.conditioning_for(a), seeds, schedule)
    entries = score_videos(clean_a.final, a)
    layers = cfg.swap.layers if cfg.swap.layers is not None else list(range(model.config.layers))
    payload = {"pairs": len(a), "layers": layers, "flip_rate": curves, "mid_over_early": _mid_over_early(curves, layers, model.config.layers)}
    return _finish(cfg, "swap", out, entries, payload, {"eval": cfg.seed}, t0)


def _mid_over_early(curves: dict, layers: list[int], depth: int) -> dict:
    """Per swap step: does some mid-third layer flip more often than every early-third layer?"""
    third = depth // 3
    out = {}
    for s, rates in curves.items():
        by_layer = dict(zip(layers, rates))
        early = [r for l, r in by_layer.items() if l < third]
        mid = [r for l, r in by_layer.items() if third <= l < depth - third]
        out[s] = bool(early and mid and max(mid) > max(early))
    return out


def _ensemble_cfg(cfg: ExperimentConfig, window) -> probe.EnsembleConfig:
    e = cfg.ensemble
    return probe.EnsembleConfig(e.k, tuple(window), tuple(e.step_window), tuple(e.seeds))


def single_seed_scores(model, inst, cfg: ExperimentConfig, schedule) -> np.ndarray:
    """(K, B) scores of plain sampling with each ensemble seed."""
    cond = probe.conditioning_for(inst)
    rows = []
    for base in cfg.ensemble.seeds:
        tr = euler_sample(model, cond, example_seeds(base, len(inst)), schedule)
        rows.append(totals(score_videos(tr.final, inst)))
    return np.array(rows)


def ensemble_scores(model, inst, cfg: ExperimentConfig, schedule, window) -> probe.EnsembleResult:
    return probe.ensemble_sample(model, probe.conditioning_for(inst), _ensemble_cfg(cfg, window), schedule, inst)


def ensemble(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    """Mid-window latent ensemble vs the average single-seed run, paired per instance."""
    t0 = time.time()
    model = model or load_model(cfg)
    schedule = Schedule(cfg.schedule.n_steps)
    inst = eval_instances(cfg)
    base = single_seed_scores(model, inst, cfg, schedule).mean(axis=0)
    res = ensemble_scores(model, inst, cfg, schedule, cfg.ensemble.layer_window)
    ens = res.mean_scores
    diff = ens - base
    payload = {
        "single_seed": aggregate(base),
        "ensemble": aggregate(ens),
        "layer_window": list(cfg.ensemble.layer_window),
        "step_window": list(cfg.ensemble.step_window),
        "non_inferiority": paired_one_sided(diff, cfg.ensemble.margin),
        "superiority": paired_one_sided(diff, 0.0),
    }
    entries = [{"id": i.id, "score": float(s)} for i, s in zip(inst, ens)]
    return _finish(cfg, "ensemble", out, entries, payload, {"ensemble": list(cfg.ensemble.seeds)}, t0)


def ablate_window(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    schedule = Schedule(cfg.schedule.n_steps)
    inst = eval_instances(cfg)
    base = single_seed_scores(model, inst, cfg, schedule).mean(axis=0)
    windows, per = {}, {}
    for name, win in cfg.ablation.windows.items():
        ens = ensemble_scores(model, inst, cfg, schedule, win).mean_scores
        per[name] = ens
        windows[name] = {
            "window": list(win),
            "score": aggregate(ens),
            "vs_single": paired_one_sided(ens - base, 0.0),
            "non_inferiority": paired_one_sided(ens - base, cfg.ensemble.margin),
        }
        log.info("window %s %s: %.4f", name, win, float(ens.mean()))
    ordering = sorted(windows, key=lambda k: -windows[k]["score"]["mean"])
    payload = {"single_seed": aggregate(base), "windows": windows, "ordering": ordering}
    if "mid" in per and "early" in per:
        holds = bool(per["mid"].mean() >= per["early"].mean())
        payload["mid_ge_early"] = holds
        payload["deviation"] = None if holds else "mid-window ensemble scored below the early window on this model"
    best = ordering[0]
    entries = [{"id": i.id, "score": float(s)} for i, s in zip(inst, per[best])]
    return _finish(cfg, "ablate-window", out, entries, payload, {"ensemble": list(cfg.ensemble.seeds)}, t0)


def frame_instances(cfg: ExperimentConfig, frames: int, count: int | None = None) -> list[TaskInstance]:
    """Matched mazes (same spec for every F) whose oracle path needs >= min_path moves.

    The spec is drawn with the default frame count; shorter videos simply
    cannot show the whole path, which is the point of the ablation.
    """
    t = cfg.task
    n = t.count if count is None else count
    out = []
    for i in range(n):
        s = derive_seed(t.seed, 0xF4, i)
        base = gen_maze(Rng(s), t.size, t.frames, min_len=cfg.ablation.min_path, seed=s)
        out.append(TaskInstance("maze", base.condition, base.target[:frames].copy(), base.spec, s))
    return out


def ablate_frames(cfg: ExperimentConfig, out: Path, model: DiT | None = None) -> dict:
    t0 = time.time()
    model = model or load_model(cfg)
    schedule = Schedule(cfg.schedule.n_steps)
    results, per = {}, {}
    for f in sorted(cfg.ablation.frames):
        inst = frame_instances(cfg, f)
        seeds = eval_seeds(cfg, len(inst))
        if f == 1:
            # nothing to generate: the only frame is the clamped condition
            videos = np.stack([i.condition for i in inst])
        else:
            videos = finals(run_batched(model, inst, seeds, schedule))
        entries = score_videos(videos, inst)
        per[f] = entries
        results[f] = aggregate(totals(entries))
        log.info("F=%d: %.4f", f, results[f]["mean"])
    fs = sorted(results)
    means = [results[f]["mean"] for f in fs]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    payload = {
        "frames": fs,
        "scores": {f: results[f] for f in fs},
        "monotone_nondecreasing": monotone,
        "min_path": cfg.ablation.min_path,
        "max_ge_min": bool(means[-1] >= means[0]),
    }
    return _finish(cfg, "ablate-frames", out, per[fs[-1]], payload, {"eval": cfg.seed}, t0)


RUNNERS = {
    "train": train,
    "eval": evaluate,
    "sample": sample,
    "perturb": perturb,
    "cka": cka,
    "energy": energy,
    "swap": swap,
    "ensemble": ensemble,
    "ablate-window": ablate_window,
    "ablate-frames": ablate_frames,
}


def run_experiment(cfg: ExperimentConfig, out: Path | str | None = None, model: DiT | None = None) -> dict:
    out = Path(out or cfg.out_dir)
    return RUNNERS[cfg.mode](cfg, out, model)
