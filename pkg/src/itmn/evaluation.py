"""Post-processing (decode + NMS) and miss-rate / FPPI / AP metrology."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import center_to_corner, decode, generate_default_boxes, iou_matrix
from .synthdata import to_model_input
from .tensor import Tensor, no_grad

NMS_IOU = 0.45
CONF_THRESHOLD = 0.01
TOP_K = 100
MATCH_IOU = 0.5
MR_FLOOR = 1e-4
CURVE_FPPI_RANGE = (1e-3, 1.0)
REPORT_FIELDS = ("MR (All)", "MR (Day)", "MR (Night)", "AP (All)", "AP (Day)", "AP (Night)")


def reference_fppi() -> np.ndarray:
    """Nine FPPI reference points evenly spaced in log space over [0.01, 1]."""
    return 10.0 ** (-2.0 + 0.25 * np.arange(9))


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------


@dataclass
class Detections:
    """Detections of one image: corner boxes [K, 4] and confidences [K], best first."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray | None = None
    index: np.ndarray | None = None  # default box each detection was decoded from, -1 if unknown

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.labels is None:
            self.labels = np.ones(len(self.scores), dtype=np.int64)
        if self.index is None:
            self.index = np.full(len(self.scores), -1, dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        if not len(self.boxes) == len(self.scores) == len(self.index):
            raise ValueError("boxes, scores and index differ in length")

    def __len__(self):
        return len(self.scores)


def confidence_order(scores) -> np.ndarray:
    """Indices by descending confidence; ties keep the original (box ordering) index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes, scores, iou_threshold: float = NMS_IOU, score_threshold: float = CONF_THRESHOLD,
        top_k: int | None = None) -> np.ndarray:
    """Greedy suppression; returns kept indices, best first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = confidence_order(scores)
    order = order[scores[order] >= score_threshold]
    keep = []
    while len(order):
        i = order[0]
        keep.append(int(i))
        if top_k is not None and len(keep) >= top_k:
            break
        if len(order) == 1:
            break
        ov = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def postprocess(loc: np.ndarray, cls_logits: np.ndarray, priors, conf_threshold: float = CONF_THRESHOLD,
                nms_iou: float = NMS_IOU, top_k: int = TOP_K) -> Detections:
    """One image's raw head outputs -> person detections after decoding and NMS."""
    scores = softmax(np.asarray(cls_logits, dtype=np.float64))[:, 1]
    cand = np.flatnonzero(scores >= conf_threshold)
    if len(cand) == 0:
        return Detections(np.zeros((0, 4)), np.zeros(0))
    boxes = np.clip(center_to_corner(decode(loc[cand], priors.boxes[cand])), 0.0, 1.0)
    keep = nms(boxes, scores[cand], nms_iou, conf_threshold, top_k)
    return Detections(boxes[keep], scores[cand][keep], index=cand[keep])


def raw_outputs(model, pairs, batch_size: int = 1) -> list:
    """(loc, cls) numpy arrays per image, with the model in inference mode."""
    model.eval()
    dtype = next(iter(model.parameters())).dtype
    out = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = [pairs[i] for i in range(start, min(start + batch_size, len(pairs)))]
            v, t = to_model_input(chunk, dtype)
            res = model(Tensor(v), Tensor(t))
            out.extend(zip(res.loc.data, res.cls.data))
    return out


def detect(model, pairs, batch_size: int = 1, **kwargs) -> list:
    priors = generate_default_boxes(model.config.box)
    return [postprocess(loc, cls, priors, **kwargs) for loc, cls in raw_outputs(model, pairs, batch_size)]


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def _candidate_pairs(det_boxes, gt_boxes, iou_threshold):
    """(det, gt) pairs above the IoU threshold, strongest overlap first (ties: det index, gt index)."""
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return []
    ov = iou_matrix(np.asarray(det_boxes).reshape(-1, 4), np.asarray(gt_boxes).reshape(-1, 4))
    d, g = np.nonzero(ov > iou_threshold)
    order = sorted(range(len(d)), key=lambda k: (-ov[d[k], g[k]], d[k], g[k]))
    return [(int(d[k]), int(g[k])) for k in order]


def _greedy(pairs, n_det: int) -> dict:
    """One-to-one assignment over pre-sorted pairs restricted to detections < n_det: det -> gt."""
    used_d, used_g, match = set(), set(), {}
    for d, g in pairs:
        if d < n_det and d not in used_d and g not in used_g:
            used_d.add(d)
            used_g.add(g)
            match[d] = g
    return match


def match_detections(det_boxes, gt_boxes, iou_threshold: float = MATCH_IOU) -> tuple:
    """(TP, FP, FN) for one image.

    Each ground truth is credited to at most one detection: overlaps above the
    threshold are taken strongest first, one-to-one.  Every other detection is
    a false positive and every unmatched ground truth a false negative.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    tp = len(_greedy(_candidate_pairs(det_boxes, gt_boxes, iou_threshold), len(det_boxes)))
    return tp, len(det_boxes) - tp, len(gt_boxes) - tp


def miss_rate(tp: int, fn: int) -> float:
    if tp + fn <= 0:
        raise ValueError("miss rate is undefined without ground truths")
    return fn / (tp + fn)


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


@dataclass
class EvalCurve:
    """Operating points at every distinct confidence, highest threshold first."""

    threshold: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_images: int
    n_gt: int

    @property
    def fppi(self) -> np.ndarray:
        return self.fp / self.n_images

    @property
    def miss_rate(self) -> np.ndarray:
        return self.fn / self.n_gt

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.n_gt

    @property
    def precision(self) -> np.ndarray:
        det = self.tp + self.fp
        return np.where(det > 0, self.tp / np.maximum(det, 1), 1.0)

    def __len__(self):
        return len(self.threshold)

    def to_csv(self, path, fppi_range=CURVE_FPPI_RANGE) -> Path:
        """``threshold,fppi,miss_rate`` rows within the FPPI range, FPPI ascending."""
        path = Path(path)
        lo, hi = fppi_range
        f, m = self.fppi, self.miss_rate
        sel = np.flatnonzero((f >= lo) & (f <= hi))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fppi", "miss_rate"])
            for i in sel:  # thresholds descend, so FPPI already ascends
                w.writerow([repr(float(self.threshold[i])), repr(float(f[i])), repr(float(m[i]))])
        return path


def sweep(detections, gts, iou_threshold: float = MATCH_IOU) -> EvalCurve:
    """Exact threshold sweep: TP/FP/FN summed over images at each distinct confidence."""
    if len(detections) != len(gts):
        raise ValueError("need one detection set per image")
    if len(gts) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    n_gt = int(sum(len(np.asarray(g).reshape(-1, 4)) for g in gts))
    if n_gt == 0:
        raise ValueError("miss rate is undefined without ground truths")
    per_image = []
    events = []  # (score, image, rank)
    for i, (det, gt) in enumerate(zip(detections, gts)):
        order = confidence_order(det.scores)
        boxes, scores = det.boxes[order], det.scores[order]
        per_image.append(_candidate_pairs(boxes, gt, iou_threshold))
        events.extend((float(s), i, r + 1) for r, s in enumerate(scores))
    thresholds = sorted({e[0] for e in events}, reverse=True)
    # prefix length per image once all detections scoring >= t are admitted
    events.sort(key=lambda e: -e[0])
    active = [0] * len(gts)
    tp_img = [0] * len(gts)
    total_tp = total_det = 0
    out_t, out_tp, out_fp = [], [], []
    k = 0
    for t in thresholds:
        changed = set()
        while k < len(events) and events[k][0] >= t:
            _, i, r = events[k]
            active[i] = max(active[i], r)
            changed.add(i)
            total_det += 1
            k += 1
        for i in changed:
            new = len(_greedy(per_image[i], active[i]))
            total_tp += new - tp_img[i]
            tp_img[i] = new
        out_t.append(t)
        out_tp.append(total_tp)
        out_fp.append(total_det - total_tp)
    tp = np.array(out_tp, dtype=np.int64)
    return EvalCurve(np.array(out_t, dtype=np.float64), tp, np.array(out_fp, dtype=np.int64), n_gt - tp, len(gts), n_gt)


def mr_at_fppi(curve: EvalCurve, reference) -> np.ndarray:
    """MR of the operating point with the largest FPPI not above each reference (1 if none)."""
    f, m = curve.fppi, curve.miss_rate
    out = []
    for ref in np.atleast_1d(reference):
        ok = np.flatnonzero(f <= ref)
        out.append(float(m[ok].min()) if len(ok) else 1.0)
    return np.array(out)


def log_average_mr(curve: EvalCurve, mode: str = "log") -> float:
    """Average MR over the nine reference FPPI points: geometric ("log") or arithmetic ("arith")."""
    if curve.n_gt <= 0:
        raise ValueError("curve has no ground truths")
    mrs = mr_at_fppi(curve, reference_fppi())
    if mode == "log":
        return float(np.exp(np.mean(np.log(np.maximum(mrs, MR_FLOOR)))))
    if mode == "arith":
        return float(np.mean(mrs))
    raise ValueError(f"unknown averaging mode {mode!r}")


def average_precision(curve: EvalCurve) -> float:
    """All-point interpolated area under the precision/recall sweep."""
    if curve.n_gt <= 0:
        raise ValueError("curve has no ground truths")
    if len(curve) == 0:
        return 0.0
    rec = np.concatenate([[0.0], curve.recall, [1.0]])
    prec = np.concatenate([[0.0], curve.precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    fields: dict = field(default_factory=dict)  # Table-style field name -> value
    curves: dict = field(default_factory=dict)  # split -> EvalCurve
    counts: dict = field(default_factory=dict)  # split -> (TP, FP, FN) at the default threshold
    mode: str = "log"

    def to_text(self) -> str:
        lines = [f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.fields.items()]
        for split, (tp, fp, fn) in self.counts.items():
            lines.append(f"TP ({split.title()}): {tp}")
            lines.append(f"FP ({split.title()}): {fp}")
            lines.append(f"FN ({split.title()}): {fn}")
        lines.append(f"averaging: {self.mode}")
        return "\n".join(lines) + "\n"


def counts_at(curve: EvalCurve, threshold: float) -> tuple:
    """(TP, FP, FN) of the lowest operating point at or above ``threshold``."""
    ok = np.flatnonzero(curve.threshold >= threshold)
    if len(ok) == 0:
        return 0, 0, curve.n_gt
    i = ok[-1]
    return int(curve.tp[i]), int(curve.fp[i]), int(curve.fn[i])


def evaluate_detections(detections, dataset, splits=("all", "day", "night"), mode: str = "log",
                        count_threshold: float = 0.5) -> EvalReport:
    report = EvalReport(mode=mode)
    for split in splits:
        idx = [i for i, p in enumerate(dataset) if split == "all" or p.tag == split]
        gts = [dataset[i].boxes for i in idx]
        if not idx or sum(len(g) for g in gts) == 0:
            report.fields[f"MR ({split.title()})"] = float("nan")
            report.fields[f"AP ({split.title()})"] = float("nan")
            continue
        curve = sweep([detections[i] for i in idx], gts)
        report.curves[split] = curve
        report.fields[f"MR ({split.title()})"] = log_average_mr(curve, mode)
        report.fields[f"AP ({split.title()})"] = average_precision(curve)
        report.counts[split] = counts_at(curve, count_threshold)
    order = [k for k in REPORT_FIELDS if k in report.fields]
    report.fields = {k: report.fields[k] for k in order}
    return report


def evaluate(model, dataset, splits=("all", "day", "night"), mode: str = "log", batch_size: int = 1) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return evaluate_detections(detect(model, dataset, batch_size), dataset, splits, mode)


def decision_agreement(dets_a, dets_b, threshold: float = 0.5) -> float:
    """Share of post-NMS box decisions on which two detectors agree.

    A decision is "default box i survives NMS with confidence >= threshold".
    Over all images, agreement is |kept by both| / |kept by either|; a set
    where neither detector keeps anything counts as full agreement.
    """
    both = either = 0
    for a, b in zip(dets_a, dets_b, strict=True):
        ka = set(a.index[a.scores >= threshold].tolist())
        kb = set(b.index[b.scores >= threshold].tolist())
        both += len(ka & kb)
        either += len(ka | kb)
    return 1.0 if either == 0 else both / either


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(report.to_text())
    return path


def head_nms_macs(model_config, candidates_per_image: int = TOP_K) -> dict:
    """Per-image multiply-accumulates of the prediction heads, decoding and NMS.

    Heads: the 3x3 location and class convolutions.  Decoding: a fixed 8
    MACs per default box.  NMS: an IoU costs about 8 MACs, and in the worst
    case every surviving candidate is compared to every other.
    """
    from .fusion import Detector

    model = Detector(model_config, seed=0)
    head = sum(h.macs(e)["head"] for h, e in zip(model.heads, model_config.pyramid.level_extents))
    n_boxes = len(generate_default_boxes(model_config.box))
    decode_cost = 8 * n_boxes
    score_cost = model_config.num_classes * n_boxes
    k = min(candidates_per_image, n_boxes)
    nms_cost = 8 * k * (k - 1) // 2
    return {"head": head, "decode": decode_cost, "scores": score_cost, "nms": nms_cost,
            "total": head + decode_cost + score_cost + nms_cost}
