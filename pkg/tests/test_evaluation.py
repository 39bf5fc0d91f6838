import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pairwise_auc
from trendseg.evaluation import (
    ConfusionCounts,
    MetricsReport,
    accuracy_map,
    auc_roc,
    binarize,
    build_report,
    confusion,
    emit_report,
    metrics,
    per_day_metrics,
    pgm_bytes,
)


def random_pair(seed, S=30, T_out=10):
    rng = np.random.default_rng(seed)
    return rng.random((S, T_out, 4)), (rng.random((S, T_out, 4)) > 0.5).astype(np.uint8)


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize([0.49, 0.51, 0.5]), [0, 1, 1])


def test_perfect_prediction():
    t = np.array([[1, 0], [0, 1]])
    m = metrics(confusion(t, t))
    assert m["accuracy"] == 1 and m["f1"] == 1 and m["flags"] == []


def test_all_positive_on_half_positive():
    t = np.array([1, 0, 1, 0])
    m = metrics(confusion(np.ones(4), t))
    assert m["recall"] == 1 and m["precision"] == 0.5
    assert m["f1"] == pytest.approx(2 / 3)


def test_zero_denominator_rule():
    m = metrics(confusion(np.zeros(4), np.array([1, 0, 1, 0])))
    assert m["precision"] == 0 and m["recall"] == 0 and m["f1"] == 0
    assert "precision_undefined" in m["flags"] and "f1_undefined" in m["flags"]
    assert "recall_undefined" not in m["flags"]


def test_confusion_sum_and_errors():
    c = confusion(np.array([1, 1, 0, 0, 1]), np.array([1, 0, 0, 1, 1]))
    assert c == ConfusionCounts(tp=2, fp=1, tn=1, fn=1)
    assert c.total == 5
    with pytest.raises(ValueError):
        confusion(np.ones(3), np.ones(4))
    with pytest.raises(ValueError, match="binary"):
        confusion(np.ones(2), np.array([0, 2]))


def test_auc_examples():
    assert auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc_roc([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert auc_roc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class():
    with pytest.raises(ValueError, match="single class"):
        auc_roc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=80))
def test_auc_matches_pairwise_oracle(pairs):
    scores = [s / 20 for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    assert auc_roc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_per_day_perfect():
    _, t = random_pair(0)
    for row in per_day_metrics(t.astype(float), t):
        assert row["accuracy"] == 1 and row["auc"] == 1


def test_per_day_partition_identity():
    p, t = random_pair(1)
    rows = per_day_metrics(p, t)
    # equal pixel counts per day, so the plain mean is the weighted mean
    overall = build_report(p, t).overall["accuracy"]
    assert np.mean([r["accuracy"] for r in rows]) == pytest.approx(overall, abs=1e-12)
    assert [r["day"] for r in rows] == list(range(1, 11))


def test_random_predictions_near_half():
    p, t = random_pair(2, S=500, T_out=20)
    n = 500 * 20 * 4
    acc = build_report(p, t).overall["accuracy"]
    assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_accuracy_map_rows_match_per_day():
    p, t = random_pair(3)
    amap = accuracy_map(p, t)
    assert amap.shape == (10, 4)
    assert np.all((amap >= 0) & (amap <= 1))
    np.testing.assert_allclose(amap.mean(axis=1), [r["accuracy"] for r in per_day_metrics(p, t)], atol=1e-12)


def test_accuracy_map_perfect_and_single_sample():
    _, t = random_pair(4)
    np.testing.assert_array_equal(accuracy_map(t.astype(float), t), np.ones((10, 4)))
    p, t = random_pair(5, S=1)
    assert set(np.unique(accuracy_map(p, t))) <= {0.0, 1.0}


def test_confusion_accuracy_cross_check():
    p, t = random_pair(6)
    r = build_report(p, t)
    c = r.overall["confusion"]
    assert (c["tp"] + c["tn"]) / sum(c.values()) == pytest.approx(np.mean(r.accuracy_map), abs=1e-12)
    assert r.overall["accuracy"] == pytest.approx(np.mean((p >= 0.5) == t), abs=1e-12)


def test_permutation_invariance():
    p, t = random_pair(7)
    perm = np.random.default_rng(0).permutation(len(p))
    a, b = build_report(p, t), build_report(p[perm], t[perm])
    assert a.to_json() == b.to_json()


def test_single_class_auc_flagged():
    p = np.full((3, 2, 4), 0.7)
    t = np.ones((3, 2, 4), dtype=np.uint8)
    r = build_report(p, t)
    assert r.overall["auc"] is None and "auc_undefined" in r.overall["flags"]
    assert all(row["auc"] is None for row in r.per_day)


def test_report_json_roundtrip():
    p, t = random_pair(8)
    r = build_report(p, t, {"model": "proposed"})
    back = MetricsReport.from_json(r.to_json())
    assert back == r
    assert set(json.loads(r.to_json())) == {"overall", "per_day", "accuracy_map", "metadata"}


def test_pgm_header_and_pixels():
    amap = np.zeros((20, 4))
    amap[0] = 1.0
    raw = pgm_bytes(amap)
    header = b"P5 4 20 255\n"
    assert raw.startswith(header)
    body = raw[len(header):]
    assert len(body) == 80
    assert body[:4] == b"\xff" * 4 and body[4:] == b"\x00" * 76


def test_emit_report_files(tmp_path):
    p, t = random_pair(9, T_out=20)
    r = build_report(p, t)
    paths = emit_report(r, tmp_path, figures=True)
    names = {x.name for x in paths}
    assert {"metrics.json", "per_day.csv", "accuracy_map.csv", "accuracy_map.pgm",
            "accuracy_map.png", "per_day.png"} == names
    per_day = (tmp_path / "per_day.csv").read_text().splitlines()
    assert per_day[0] == "day,auc,accuracy,precision,recall,f1"
    assert len(per_day) == 1 + 20
    assert len((tmp_path / "accuracy_map.csv").read_text().splitlines()) == 1 + 20
    assert MetricsReport.from_json((tmp_path / "metrics.json").read_text()) == r
    assert (tmp_path / "accuracy_map.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_emit_report_is_deterministic(tmp_path):
    p, t = random_pair(10)
    r = build_report(p, t)
    emit_report(r, tmp_path / "a")
    emit_report(r, tmp_path / "b")
    for name in ("metrics.json", "per_day.csv", "accuracy_map.csv", "accuracy_map.pgm", "accuracy_map.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
