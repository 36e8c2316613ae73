"""Default-box (prior) generation, IoU, training assignment and box coding.

Boxes are normalized to the unit square.  Center form is ``(cx, cy, w, h)``;
corner form is ``(x1, y1, x2, y2)``.  The ordering of a generated set is
level-major, then row-major cell (``y`` outer, ``x`` inner), then aspect
ratio in configuration order; the prediction heads flatten their outputs in
exactly this order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMPROVED_RATIOS = (1.0, 1.0 / 2.0, 1.0 / 3.0)
SSD300_BOXES_PER_CELL = (4, 6, 6, 6, 4, 4)
VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class BoxConfig:
    """Default-box schedule.

    ``variant="improved"`` places one box per aspect ratio per cell at scale
    ``s_k``.  ``variant="original-ssd"`` reproduces the SSD-300 layout:
    ratios {1, 2, 1/2} (plus {3, 1/3} on six-box levels) and an extra square
    of scale ``sqrt(s_k * s_{k+1})``.
    """

    extents: tuple = (38, 19, 10, 5, 3, 1)
    s_min: float = 0.2
    s_max: float = 0.9
    aspect_ratios: tuple = IMPROVED_RATIOS
    variant: str = "improved"
    boxes_per_cell: tuple = SSD300_BOXES_PER_CELL
    clip: bool = True

    def __post_init__(self):
        if not 0 < self.s_min < self.s_max <= 1:
            raise ValueError(f"need 0 < s_min < s_max <= 1, got {self.s_min}, {self.s_max}")
        if self.variant not in ("improved", "original-ssd"):
            raise ValueError(f"unknown box variant {self.variant!r}")
        if any(int(f) < 1 for f in self.extents):
            raise ValueError(f"invalid level extents {self.extents}")
        if self.variant == "original-ssd" and len(self.boxes_per_cell) != len(self.extents):
            raise ValueError("boxes_per_cell must list one entry per level")
        if any(a <= 0 for a in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")

    @property
    def m(self) -> int:
        return len(self.extents)

    def per_cell(self) -> list:
        if self.variant == "improved":
            return [len(self.aspect_ratios)] * self.m
        return list(self.boxes_per_cell)

    @property
    def max_per_cell(self) -> int:
        return max(self.per_cell())


def box_scale(k: int, m: int = 6, s_min: float = 0.2, s_max: float = 0.9) -> float:
    """Scale of the k-th (1-based) of m pyramid levels, linear from s_min to s_max."""
    if m < 2:
        raise ValueError(f"need at least two feature maps, got m={m}")
    if not 1 <= k <= m:
        raise ValueError(f"level index k={k} outside 1..{m}")
    return s_min + (s_max - s_min) / (m - 1) * (k - 1)


def box_dims(s_k: float, a_r: float) -> tuple:
    """(width, height) with width / height == a_r and geometric mean s_k."""
    if s_k <= 0 or a_r <= 0:
        raise ValueError(f"scale and aspect ratio must be positive, got {s_k}, {a_r}")
    root = math.sqrt(a_r)
    return s_k * root, s_k / root


@dataclass
class DefaultBoxSet:
    boxes: np.ndarray  # [N, 4] center form
    level: np.ndarray  # [N] level index (0-based)
    cell_x: np.ndarray
    cell_y: np.ndarray
    ratio: np.ndarray  # aspect ratio; 0 marks the extra geometric-mean square
    offsets: list = field(default_factory=list)  # start index of each level, plus total

    def __len__(self):
        return len(self.boxes)

    def corners(self) -> np.ndarray:
        return center_to_corner(self.boxes)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "cell_x", "cell_y", "ratio", "cx", "cy", "w", "h"])
            for i in range(len(self.boxes)):
                writer.writerow([int(self.level[i]), int(self.cell_x[i]), int(self.cell_y[i]), repr(float(self.ratio[i])),
                                 *(repr(float(v)) for v in self.boxes[i])])


def _level_shapes(config: BoxConfig, k: int):
    """List of (ratio tag, w, h) for level k (1-based)."""
    s_k = box_scale(k, config.m, config.s_min, config.s_max)
    if config.variant == "improved":
        return [(a, *box_dims(s_k, a)) for a in config.aspect_ratios]
    n = config.boxes_per_cell[k - 1]
    ratios = [1.0, 2.0, 0.5] if n == 4 else [1.0, 2.0, 0.5, 3.0, 1.0 / 3.0]
    if n not in (4, 6):
        raise ValueError(f"original-ssd levels carry 4 or 6 boxes per cell, got {n}")
    s_next = box_scale(k + 1, config.m, config.s_min, config.s_max) if k < config.m else 1.0
    shapes = [(a, *box_dims(s_k, a)) for a in ratios]
    extra = math.sqrt(s_k * s_next)
    shapes.insert(1, (0.0, extra, extra))
    return shapes


def generate_default_boxes(config: BoxConfig) -> DefaultBoxSet:
    boxes, level, cx_idx, cy_idx, ratio, offsets = [], [], [], [], [], [0]
    for li, f in enumerate(config.extents):
        f = int(f)
        shapes = _level_shapes(config, li + 1)
        ys, xs = np.meshgrid(np.arange(f), np.arange(f), indexing="ij")
        ys, xs = ys.ravel(), xs.ravel()
        n_cells, n_shapes = len(ys), len(shapes)
        cx = np.repeat((xs + 0.5) / f, n_shapes)
        cy = np.repeat((ys + 0.5) / f, n_shapes)
        w = np.tile([s[1] for s in shapes], n_cells)
        h = np.tile([s[2] for s in shapes], n_cells)
        boxes.append(np.stack([cx, cy, w, h], axis=1))
        level.append(np.full(n_cells * n_shapes, li))
        cx_idx.append(np.repeat(xs, n_shapes))
        cy_idx.append(np.repeat(ys, n_shapes))
        ratio.append(np.tile([s[0] for s in shapes], n_cells))
        offsets.append(offsets[-1] + n_cells * n_shapes)
    out = np.concatenate(boxes).astype(np.float64)
    if config.clip:
        out = corner_to_center(np.clip(center_to_corner(out), 0.0, 1.0))
    return DefaultBoxSet(out, np.concatenate(level), np.concatenate(cx_idx), np.concatenate(cy_idx),
                         np.concatenate(ratio).astype(np.float64), offsets)


def count_default_boxes(config: BoxConfig) -> int:
    return sum(n * int(f) ** 2 for n, f in zip(config.per_cell(), config.extents))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def center_to_corner(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def corner_to_center(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def box_area(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou(a, b, return_flag: bool = False):
    """IoU of two corner-form boxes; degenerate (zero-area) input gives 0.

    With ``return_flag`` the result is ``(value, degenerate)``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    area_a, area_b = float(box_area(a)), float(box_area(b))
    degenerate = area_a <= 0 or area_b <= 0
    if degenerate:
        return (0.0, True) if return_flag else 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    value = inter / (area_a + area_b - inter)
    return (value, False) if return_flag else value


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form boxes a [N,4] and b [M,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    degenerate = (box_area(a)[:, None] <= 0) | (box_area(b)[None, :] <= 0)
    return np.where(degenerate, 0.0, out)


# ---------------------------------------------------------------------------
# training assignment and coding
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    gt_index: np.ndarray  # [N] matched ground-truth index, -1 for background
    iou: np.ndarray  # [N] IoU with the matched ground truth (0 for background)

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def labels(self) -> np.ndarray:
        """Class label per default box (0 background, 1 person)."""
        return self.positive.astype(np.int64)

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match_for_training(priors: DefaultBoxSet | np.ndarray, gts, threshold: float = 0.5) -> MatchResult:
    """Assign ground truths to default boxes.

    Every box whose best IoU with any ground truth is >= ``threshold`` takes
    that ground truth.  Independently, each ground truth claims its single
    highest-IoU box unconditionally; when two ground truths claim the same box
    the one with the higher IoU keeps it (lower index on ties).
    """
    corners = priors.corners() if isinstance(priors, DefaultBoxSet) else center_to_corner(priors)
    n = len(corners)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(gts) == 0:
        return MatchResult(np.full(n, -1, dtype=np.int64), np.zeros(n))
    ov = iou_matrix(gts, corners)  # [G, N]
    best_gt = ov.argmax(axis=0)
    best_iou = ov[best_gt, np.arange(n)]
    gt_index = np.where(best_iou >= threshold, best_gt, -1)
    matched_iou = np.where(best_iou >= threshold, best_iou, 0.0)
    forced_box = ov.argmax(axis=1)
    order = sorted(range(len(gts)), key=lambda g: (ov[g, forced_box[g]], -g))
    for g in order:  # ascending, so the strongest claim is written last
        b = forced_box[g]
        gt_index[b] = g
        matched_iou[b] = ov[g, b]
    return MatchResult(gt_index.astype(np.int64), matched_iou)


def encode(gt, prior, variances=VARIANCES) -> np.ndarray:
    """SSD offsets of center-form ground truth(s) relative to center-form prior(s)."""
    gt, prior = np.asarray(gt, dtype=np.float64), np.asarray(prior, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth boxes need positive width and height")
    v1, v2 = variances
    d_center = (gt[..., :2] - prior[..., :2]) / (prior[..., 2:] * v1)
    d_size = np.log(gt[..., 2:] / prior[..., 2:]) / v2
    return np.concatenate([d_center, d_size], axis=-1)


def decode(offsets, prior, variances=VARIANCES) -> np.ndarray:
    """Inverse of :func:`encode`; returns center-form boxes."""
    offsets, prior = np.asarray(offsets, dtype=np.float64), np.asarray(prior, dtype=np.float64)
    v1, v2 = variances
    center = prior[..., :2] + offsets[..., :2] * v1 * prior[..., 2:]
    size = prior[..., 2:] * np.exp(np.clip(offsets[..., 2:] * v2, -10, 10))
    return np.concatenate([center, size], axis=-1)


def build_targets(priors: DefaultBoxSet, gts, threshold: float = 0.5):
    """(labels [N], loc targets [N,4], MatchResult) for one image's corner-form gts."""
    match = match_for_training(priors, gts, threshold)
    targets = np.zeros((len(priors), 4))
    pos = match.positive
    if pos.any():
        gt_center = corner_to_center(np.asarray(gts, dtype=np.float64).reshape(-1, 4))
        targets[pos] = encode(gt_center[match.gt_index[pos]], priors.boxes[pos])
    return match.labels, targets, match


def write_boxes_csv(boxes: DefaultBoxSet, path) -> Path:
    path = Path(path)
    boxes.to_csv(path)
    return path
