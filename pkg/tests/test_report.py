from __future__ import annotations

import json
import math

import jsonschema
import pytest

from costeps.report import aggregate, build_report, check_aggregate, paired_one_sided, read_report, write_report

HASH = "0" * 64


def entries(scores):
    return [{"id": f"i{k}", "score": s} for k, s in enumerate(scores)]


def test_aggregate_values():
    agg = aggregate([0.0, 1.0, 1.0, 0.0])
    assert agg["mean"] == 0.5 and agg["count"] == 4
    assert agg["stderr"] == pytest.approx(math.sqrt(1 / 3) / 2)
    assert aggregate([]) == {"mean": None, "count": 0, "stderr": None}
    assert aggregate([0.3])["stderr"] == 0.0


def test_roundtrip_and_reaggregation(tmp_path):
    rep = build_report("eval", HASH, {"eval": 0}, entries([0.2, 0.9, 0.4]), {"x": 1}, 1.5)
    write_report(tmp_path / "r.json", rep)
    back = read_report(tmp_path / "r.json")
    assert back["aggregate"] == aggregate([0.2, 0.9, 0.4])


def test_tampered_aggregate_detected(tmp_path):
    rep = build_report("eval", HASH, {}, entries([0.2, 0.9]), {}, 0.1)
    rep["aggregate"]["mean"] = 0.6
    with pytest.raises(ValueError):
        check_aggregate(rep)
    (tmp_path / "r.json").write_text(json.dumps(rep))
    with pytest.raises(ValueError):
        read_report(tmp_path / "r.json")


def test_schema_rejects_missing_fields():
    rep = build_report("eval", HASH, {}, entries([0.5]), {}, 0.1)
    del rep["config_hash"]
    with pytest.raises(jsonschema.ValidationError):
        write_report("/dev/null", rep)


def test_paired_test_direction():
    up = paired_one_sided([0.1, 0.2, 0.15, 0.12, 0.3])
    down = paired_one_sided([-0.1, -0.2, -0.15, -0.12, -0.3])
    assert up["p"] < 0.01 < down["p"]
    # a small margin turns a tie into non-inferiority
    assert paired_one_sided([0.01, -0.01, 0.0, 0.02, -0.02], margin=0.05)["p"] < 0.01


def test_non_finite_payload_becomes_null():
    rep = build_report("eval", HASH, {}, entries([0.5]), {"r": float("nan")}, 0.1)
    assert rep["payload"]["r"] is None
