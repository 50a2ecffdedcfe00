"""Zero-shot segmentation from grouping assignments, and the scores used to judge it.

Label convention: masks hold class indices with 0 = background and 255 =
ignore. A :class:`ClassEmbeddingTable` lists foreground classes only; its row
``r`` corresponds to mask index ``r + 1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .grouping import AssignmentMatrix

BACKGROUND = 0
IGNORE = 255
EXHAUSTIVE_LIMIT = 100_000


def _values(a) -> np.ndarray:
    if isinstance(a, AssignmentMatrix):
        return a.values.data
    if isinstance(a, ag.Tensor):
        return a.data
    return np.asarray(a, dtype=np.float64)


def is_column_onehot(m: np.ndarray) -> bool:
    m = np.asarray(m)
    return bool(np.all((m == 0.0) | (m == 1.0)) and np.all(m.sum(axis=-2) == 1.0))


@dataclass
class ComposedAssignment:
    values: np.ndarray  # (M_L, N), one-hot columns
    patch_grid: tuple[int, int]

    def __post_init__(self):
        rows, cols = self.patch_grid
        if rows * cols != self.values.shape[1]:
            raise ag.DimensionError(f"patch grid {self.patch_grid} does not cover {self.values.shape[1]} patches")

    @property
    def num_groups(self) -> int:
        return self.values.shape[0]

    def patch_groups(self) -> np.ndarray:
        """Final-group index of every patch, shaped like the patch grid."""
        return np.argmax(self.values, axis=0).reshape(self.patch_grid)


def compose_assignments(assignments: Sequence, patch_grid: tuple[int, int] | None = None) -> ComposedAssignment:
    """Product A_L ... A_1 of per-stage hard assignments for one image.

    Stage l maps M_{l-1} inputs to M_l outputs, so A_l is (M_l, M_{l-1}).
    """
    mats = [_values(a) for a in assignments]
    if not mats:
        raise ValueError("no assignments to compose")
    for i, m in enumerate(mats):
        if m.ndim != 2:
            raise ag.DimensionError(f"stage {i}: expected a 2-D assignment, got shape {m.shape}")
        if not is_column_onehot(m):
            raise ValueError(f"stage {i}: assignment columns are not one-hot (hard mode required)")
    out = mats[0]
    for i, m in enumerate(mats[1:], 1):
        if m.shape[1] != out.shape[0]:
            raise ag.DimensionError(f"stage {i} has shape {m.shape}, cannot follow {out.shape}")
        out = m @ out
    if patch_grid is None:
        side = int(round(np.sqrt(out.shape[1])))
        patch_grid = (side, out.shape[1] // side)
    return ComposedAssignment(out, tuple(patch_grid))


@dataclass
class ClassEmbeddingTable:
    class_names: list[str]
    embeddings: np.ndarray  # (C, P), unit rows


def label_segments(
    segment_embeddings: np.ndarray,
    classes: ClassEmbeddingTable,
    tau: float,
    threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-group mask label and confidence.

    Confidence is the largest softmax(similarity / tau) over classes. A group
    whose confidence is below ``threshold`` becomes background.
    """
    if len(classes.class_names) == 0:
        raise ValueError("empty class table")
    seg = _values(segment_embeddings)
    logits = seg @ classes.embeddings.T / tau
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    conf = probs.max(axis=-1)
    labels = np.where(conf >= threshold, probs.argmax(axis=-1) + 1, BACKGROUND)
    return labels.astype(np.int64), conf


@dataclass
class SegmentationResult:
    labels: np.ndarray  # (H, W) mask indices
    group_map: np.ndarray  # (H, W) final-group indices
    confidences: np.ndarray  # (M_L,)


def rasterize(
    composed: ComposedAssignment,
    group_labels: np.ndarray,
    image_size: tuple[int, int],
    confidences: np.ndarray | None = None,
) -> SegmentationResult:
    """Nearest-neighbour upsampling of the patch-level group map to pixels."""
    h, w = image_size
    rows, cols = composed.patch_grid
    if h % rows or w % cols:
        raise ag.DimensionError(f"image {h}x{w} is not a whole multiple of the {rows}x{cols} patch grid")
    group_labels = np.asarray(group_labels)
    if group_labels.shape != (composed.num_groups,):
        raise ag.DimensionError(f"{group_labels.shape[0]} labels for {composed.num_groups} groups")
    groups = np.repeat(np.repeat(composed.patch_groups(), h // rows, axis=0), w // cols, axis=1)
    if confidences is None:
        confidences = np.ones(composed.num_groups)
    return SegmentationResult(group_labels[groups], groups, np.asarray(confidences))


# ---------------------------------------------------------------- scoring


def iou_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int, ignore: int = IGNORE):
    """Per-class (intersection, union) pixel counts, ignoring ``ignore`` pixels in truth."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ag.DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    valid = truth != ignore
    p, t = pred[valid].astype(np.int64), truth[valid].astype(np.int64)
    inter = np.bincount(t[p == t], minlength=num_classes)[:num_classes]
    area_p = np.bincount(p, minlength=num_classes)[:num_classes]
    area_t = np.bincount(t, minlength=num_classes)[:num_classes]
    return inter, area_p + area_t - inter


def mean_iou(pred, truth, num_classes: int, ignore: int = IGNORE) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where a class is absent from both) and their mean."""
    if isinstance(pred, SegmentationResult):
        pred = pred.labels
    inter, union = iou_counts(pred, truth, num_classes, ignore)
    return _finish(inter, union)


def _finish(inter: np.ndarray, union: np.ndarray) -> tuple[np.ndarray, float]:
    iou = np.full(len(inter), np.nan)
    seen = union > 0
    iou[seen] = inter[seen] / union[seen]
    return iou, float(np.nanmean(iou)) if seen.any() else float("nan")


class IoUAccumulator:
    """Dataset-level IoU: intersections and unions summed over images in a fixed order."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred, truth) -> None:
        i, u = iou_counts(pred, truth, self.num_classes)
        self.inter += i
        self.union += u

    def result(self) -> tuple[np.ndarray, float]:
        return _finish(self.inter, self.union)


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def mask_probe(composed: ComposedAssignment, truth_mask: np.ndarray) -> float:
    """Best Jaccard index between any single final group and a binary truth mask."""
    truth = np.asarray(truth_mask, dtype=bool)
    if not truth.any():
        raise ValueError("empty ground-truth mask")
    groups = rasterize(composed, np.arange(composed.num_groups), truth.shape).group_map
    return max(jaccard(groups == g, truth) for g in range(composed.num_groups))


def _group_class_counts(group_map, truth, num_groups, num_classes, ignore=IGNORE):
    valid = truth != ignore
    g, t = group_map[valid].astype(np.int64), truth[valid].astype(np.int64)
    counts = np.zeros((num_groups, num_classes), dtype=np.int64)
    np.add.at(counts, (g, t), 1)
    return counts


def _labeling_miou(labelings: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Image mIoU of each labeling (rows of ``labelings``) from group-by-class counts."""
    num_classes = counts.shape[1]
    onehot = np.eye(num_classes)[labelings]  # (L, G, C)
    sizes = counts.sum(axis=1)
    area_t = counts.sum(axis=0)
    inter = np.einsum("lgc,gc->lc", onehot, counts)
    area_p = np.einsum("lgc,g->lc", onehot, sizes)
    union = area_p + area_t - inter
    seen = union > 0
    iou = np.where(seen, inter / np.where(seen, union, 1), 0.0)
    return iou.sum(axis=1) / np.maximum(seen.sum(axis=1), 1)


def oracle_assign(composed: ComposedAssignment, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Label each group with ground truth in hand: the upper bound for text-based labeling.

    Starts from the per-group choice (class whose mask has the highest IoU
    with the group's mask). When the search space is small, every labeling
    over the classes present in the image (plus one absent class, standing in
    for all of them) is scored and the best image mIoU is kept, so the result
    is never worse than any other labeling of the same groups. Larger problems
    refine the per-group choice by coordinate ascent.
    """
    truth = np.asarray(truth)
    groups = rasterize(composed, np.arange(composed.num_groups), truth.shape).group_map
    counts = _group_class_counts(groups, truth, composed.num_groups, num_classes)
    sizes = counts.sum(axis=1, keepdims=True)
    area_t = counts.sum(axis=0, keepdims=True)
    union = sizes + area_t - counts
    iou = np.where(union > 0, counts / np.maximum(union, 1), 0.0)
    greedy = iou.argmax(axis=1)

    present = [c for c in range(num_classes) if area_t[0, c] > 0]
    absent = [c for c in range(num_classes) if area_t[0, c] == 0]
    candidates = present + absent[:1]
    n_groups = composed.num_groups
    best, best_score = greedy, _labeling_miou(greedy[None], counts)[0]
    if len(candidates) ** n_groups <= EXHAUSTIVE_LIMIT:
        labelings = np.array(list(itertools.product(candidates, repeat=n_groups)), dtype=np.int64)
        scores = _labeling_miou(labelings, counts)
        top = int(np.argmax(scores))
        if scores[top] > best_score + 1e-12:
            best, best_score = labelings[top], scores[top]
        return best
    improved = True
    while improved:
        improved = False
        for g in range(n_groups):
            trial = np.repeat(best[None], len(candidates), axis=0)
            trial[:, g] = candidates
            scores = _labeling_miou(trial, counts)
            top = int(np.argmax(scores))
            if scores[top] > best_score + 1e-12:
                best, best_score, improved = trial[top], scores[top], True
    return best


def random_labels(num_groups: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform labels over background and all foreground classes (the chance baseline)."""
    return rng.integers(num_classes, size=num_groups)
