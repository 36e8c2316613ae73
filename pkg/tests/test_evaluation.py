import csv

import numpy as np
import pytest

from itmn.anchors import iou
from itmn.evaluation import (
    REPORT_FIELDS,
    Detections,
    average_precision,
    decision_agreement,
    evaluate_detections,
    log_average_mr,
    match_detections,
    miss_rate,
    mr_at_fppi,
    nms,
    reference_fppi,
    sweep,
)
from itmn.synthdata import generate_dataset

from oracles import DETS, GTS, brute_ap, brute_counts, brute_lamr, brute_sweep, nms_oracle


def test_instance_has_mixed_ious():
    ious = [iou(d, g) for ds, gs in zip(DETS, GTS) for d in ds.boxes for g in gs]
    assert any(0 < v <= 0.5 for v in ious) and any(0.5 < v < 1 for v in ious) and max(ious) == 1.0
    assert sum(len(d) for d in DETS) == 10 and sum(len(g) for g in GTS) == 5


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------


def test_nms_duplicates_and_disjoint():
    b = np.array([[0, 0, 1, 1], [0, 0, 1, 1]], float)
    assert list(nms(b, np.array([0.8, 0.9]))) == [1]
    d = np.array([[0, 0, 0.1, 0.1], [0.5, 0.5, 0.6, 0.6], [0.8, 0.8, 0.9, 0.9]])
    assert sorted(nms(d, np.array([0.5, 0.7, 0.6]))) == [0, 1, 2]


@pytest.mark.parametrize("seed", range(5))
def test_nms_against_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.3, 0.7, (5, 2))
    wh = rng.uniform(0.1, 0.3, (5, 2))
    boxes = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    scores = rng.uniform(0, 1, 5)
    assert set(nms(boxes, scores).tolist()) == nms_oracle(boxes, scores)


def test_nms_score_threshold():
    b = np.array([[0, 0, 0.1, 0.1], [0.5, 0.5, 0.6, 0.6]])
    assert list(nms(b, np.array([0.005, 0.5]))) == [1]


# ---------------------------------------------------------------------------
# matching and miss rate
# ---------------------------------------------------------------------------


def test_match_cases():
    g = np.array([[0.1, 0.1, 0.5, 0.5]])
    assert match_detections(g, g) == (1, 0, 0)
    two = np.array([[0.12, 0.1, 0.52, 0.5], [0.1, 0.1, 0.5, 0.52]])
    assert match_detections(two, g) == (1, 1, 0)
    assert match_detections(np.zeros((0, 4)), np.array([[0, 0, 0.1, 0.1], [0.5, 0.5, 0.6, 0.6]])) == (0, 0, 2)


def test_highest_iou_detection_is_the_true_positive():
    g = np.array([[0.1, 0.1, 0.5, 0.5]])
    weak, strong = [0.15, 0.1, 0.55, 0.5], [0.1, 0.1, 0.5, 0.49]
    d = Detections(np.array([weak, strong]), np.array([0.9, 0.8]))
    curve = sweep([d], [g])
    assert list(curve.tp) == [1, 1] and list(curve.fp) == [0, 1]


def test_match_counts_match_oracle_on_instance():
    for d, g in zip(DETS, GTS):
        assert match_detections(d.boxes, g) == brute_counts(d.boxes, g)


def test_miss_rate():
    assert miss_rate(3, 1) == 0.25 and miss_rate(3, 0) == 0 and miss_rate(0, 5) == 1.0
    with pytest.raises(ValueError):
        miss_rate(0, 0)


# ---------------------------------------------------------------------------
# curves and scalars
# ---------------------------------------------------------------------------


def test_reference_points():
    want = [0.01, 0.017783, 0.031623, 0.056234, 0.1, 0.177828, 0.316228, 0.562341, 1.0]
    assert np.allclose(reference_fppi(), want, atol=1e-6)
    assert np.max(np.abs(reference_fppi() - 10 ** (-2 + 0.25 * np.arange(9)))) <= 1e-12


def test_sweep_matches_brute_force():
    curve = sweep(DETS, GTS)
    pts = brute_sweep(DETS, GTS)[1:]
    assert len(curve) == len(pts)
    assert np.allclose(curve.fppi, [p[0] for p in pts], atol=0)
    assert np.allclose(curve.miss_rate, [p[1] for p in pts], atol=0)


@pytest.mark.parametrize("mode", ["log", "arith"])
def test_lamr_matches_brute_force(mode):
    assert log_average_mr(sweep(DETS, GTS), mode) == pytest.approx(brute_lamr(brute_sweep(DETS, GTS), mode), abs=1e-12)


def test_ap_matches_brute_force():
    assert average_precision(sweep(DETS, GTS)) == pytest.approx(brute_ap(brute_sweep(DETS, GTS)), abs=1e-12)


def test_constant_half_miss_rate():
    # one hit and one miss, never a false positive
    gts = [np.array([[0.1, 0.1, 0.3, 0.3], [0.6, 0.6, 0.8, 0.8]])]
    dets = [Detections(gts[0][:1], np.array([0.9]))]
    curve = sweep(dets, gts)
    assert np.allclose(mr_at_fppi(curve, reference_fppi()), 0.5)
    assert log_average_mr(curve, "log") == pytest.approx(0.5) and log_average_mr(curve, "arith") == pytest.approx(0.5)


def test_perfect_and_useless_detectors():
    g = [np.array([[0.1, 0.1, 0.3, 0.3]]), np.array([[0.5, 0.5, 0.9, 0.9]])]
    perfect = [Detections(x, np.ones(1)) for x in g]
    assert average_precision(sweep(perfect, g)) == 1.0 and log_average_mr(sweep(perfect, g)) == pytest.approx(1e-4)
    useless = [Detections(np.array([[0.0, 0.0, 0.05, 0.05]]), np.ones(1)) for _ in g]
    assert average_precision(sweep(useless, g)) == 0.0


def test_decision_agreement():
    a = [Detections(np.zeros((2, 4)), np.array([0.9, 0.6]), index=np.array([3, 7]))]
    b = [Detections(np.zeros((2, 4)), np.array([0.9, 0.4]), index=np.array([3, 7]))]
    assert decision_agreement(a, a) == 1.0
    assert decision_agreement(a, b) == 0.5
    empty = [Detections(np.zeros((0, 4)), np.zeros(0))]
    assert decision_agreement(empty, empty) == 1.0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_set():
    return generate_dataset(12, seed=3, resolution=32)


def test_report_fields_and_oracle_detector(small_set, tmp_path):
    dets = [Detections(p.boxes, np.ones(len(p.boxes))) for p in small_set]
    rep = evaluate_detections(dets, small_set)
    assert tuple(rep.fields) == REPORT_FIELDS
    assert rep.fields["AP (All)"] == 1.0
    assert rep.fields["MR (All)"] == pytest.approx(1e-4)
    assert rep.counts["all"][2] == 0
    assert evaluate_detections(dets, small_set, mode="arith").fields["MR (All)"] == 0.0
    text = rep.to_text()
    for f in REPORT_FIELDS:
        assert text.count(f + ":") == 1


def test_split_counts_add_up(small_set):
    rng = np.random.default_rng(0)
    dets = []
    for p in small_set:
        noise = rng.normal(0, 0.03, p.boxes.shape)
        boxes = np.clip(np.concatenate([p.boxes + noise, rng.uniform(0, 1, (2, 4))]), 0, 1)
        dets.append(Detections(boxes, rng.uniform(0, 1, len(boxes))))
    rep = evaluate_detections(dets, small_set)
    tp, fp, fn = rep.counts["all"]
    assert tp == rep.counts["day"][0] + rep.counts["night"][0]
    assert fn == rep.counts["day"][2] + rep.counts["night"][2]


def test_curve_csv(small_set, tmp_path):
    rng = np.random.default_rng(1)
    dets = []
    for p in small_set:
        boxes = np.clip(np.concatenate([p.boxes + rng.normal(0, 0.02, p.boxes.shape), rng.uniform(0, 1, (3, 4))]), 0, 1)
        dets.append(Detections(boxes, rng.uniform(0, 1, len(boxes))))
    curve = evaluate_detections(dets, small_set).curves["all"]
    path = curve.to_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["threshold", "fppi", "miss_rate"]
    vals = np.array(rows[1:], dtype=float)
    assert vals.shape[1] == 3 and np.all(np.diff(vals[:, 1]) >= 0)
    assert np.all((vals[:, 1] >= 1e-3) & (vals[:, 1] <= 1))
