"""Experiment reports: aggregation with sample sizes, schema validation, paired tests."""
from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

SCHEMA_VERSION = 1


def aggregate(values) -> dict:
    """Mean, count and standard error of the mean (ddof=1)."""
    v = np.asarray(list(values), dtype=np.float64)
    n = int(v.size)
    if n == 0:
        return {"mean": None, "count": 0, "stderr": None}
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": float(v.mean()), "count": n, "stderr": se}


def paired_one_sided(diffs, margin: float = 0.0) -> dict:
    """One-sided paired t-test of ``mean(diffs) > -margin``.

    With ``margin = 0`` this is a superiority test; a positive margin makes it
    a non-inferiority test.
    """
    d = np.asarray(diffs, dtype=np.float64) + margin
    out = aggregate(diffs)
    if d.size < 2 or np.all(d == d[0]):
        # degenerate: no spread, decide on the sign alone
        p = 0.0 if d.size and d[0] > 0 else 1.0
        out.update({"margin": margin, "t": None, "p": p})
        return out
    res = stats.ttest_1samp(d, 0.0, alternative="greater")
    out.update({"margin": margin, "t": float(res.statistic), "p": float(res.pvalue)})
    return out


def schema() -> dict:
    return json.loads(resources.files("costeps").joinpath("schemas/report.schema.json").read_text())


def validate(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, schema())
    check_aggregate(report)


def check_aggregate(report: dict, tol: float = 1e-12) -> None:
    """Raise if the aggregate does not match the per-instance entries."""
    again = aggregate(e["score"] for e in report["instances"])
    agg = report["aggregate"]
    if agg["count"] != again["count"]:
        raise ValueError(f"aggregate count {agg['count']} != {again['count']} instances")
    for k in ("mean", "stderr"):
        a, b = agg[k], again[k]
        if (a is None) != (b is None) or (a is not None and abs(a - b) > tol):
            raise ValueError(f"aggregate {k} {a} does not match recomputation {b}")


def build_report(mode: str, config_hash: str, seeds: dict, instances: list[dict], payload: dict, wall_clock_s: float) -> dict:
    from . import __version__

    return {
        "schema_version": SCHEMA_VERSION,
        "mode": mode,
        "version": __version__,
        "config_hash": config_hash,
        "seeds": seeds,
        "instances": instances,
        "aggregate": aggregate(e["score"] for e in instances),
        "payload": _jsonable(payload),
        "wall_clock_s": float(wall_clock_s),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(path, report: dict) -> None:
    validate(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))


def read_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    validate(report)
    return report
