"""Model-level zero-shot segmentation: class tables, per-image segmentation, split evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .encoders import GroupViT
from .objectives import class_prompts
from .synthetic import Dataset
from .text import Vocabulary, tokenize_batch
from .zeroshot import (
    ClassEmbeddingTable,
    ComposedAssignment,
    IoUAccumulator,
    SegmentationResult,
    compose_assignments,
    label_segments,
    mask_probe,
    mean_iou,
    oracle_assign,
    random_labels,
    rasterize,
)


def encode_texts(model: GroupViT, texts: Sequence[str], vocab: Vocabulary) -> ag.Tensor:
    ids, ends = tokenize_batch(texts, vocab, model.config.max_text_length)
    return model.text(ids, ends)


def build_class_table(
    model: GroupViT, class_names: Sequence[str], templates: Sequence[str], vocab: Vocabulary
) -> ClassEmbeddingTable:
    """Each class embedding is the normalized mean of its prompted-sentence embeddings."""
    rows = []
    with ag.no_grad():
        for name in class_names:
            z = encode_texts(model, class_prompts(name, templates), vocab).data.mean(axis=0)
            rows.append(z / np.linalg.norm(z))
    return ClassEmbeddingTable(list(class_names), np.stack(rows))


@dataclass
class ImageSegmentation:
    result: SegmentationResult
    composed: ComposedAssignment
    segment_embeddings: np.ndarray
    stage_assignments: list[np.ndarray]


def segment_images(
    model: GroupViT,
    images: np.ndarray,
    table: ClassEmbeddingTable,
    threshold: float,
    tau: float | None = None,
) -> list[ImageSegmentation]:
    tau = model.tau if not tau else tau
    cfg = model.config
    with ag.no_grad():
        seg, state = model.image.encode_segments(images)
    out = []
    h, w = np.shape(images)[-3:-1]
    grid = (h // cfg.patch_size, w // cfg.patch_size)
    for b in range(seg.shape[0]):
        stages = [a.values.data[b] for a in state.assignments]
        composed = compose_assignments(stages, grid)
        labels, conf = label_segments(seg.data[b], table, tau, threshold)
        out.append(ImageSegmentation(rasterize(composed, labels, (h, w), conf), composed, seg.data[b], stages))
    return out


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_iou: np.ndarray
    miou: float
    oracle_miou: float
    probe_jaccard: float
    random_baseline_miou: float
    image_miou: list[float] = field(default_factory=list)
    image_oracle_miou: list[float] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"class\t{name}\t{iou:.4f}" for name, iou in zip(self.class_names, self.per_class_iou)]
        out += [
            f"mIoU\t{self.miou:.4f}",
            f"oracle_mIoU\t{self.oracle_miou:.4f}",
            f"mask_probe_jaccard\t{self.probe_jaccard:.4f}",
            f"random_baseline_mIoU\t{self.random_baseline_miou:.4f}",
        ]
        return out


def evaluate(
    model: GroupViT,
    data: Dataset,
    class_names: Sequence[str],
    templates: Sequence[str],
    vocab: Vocabulary,
    threshold: float,
    tau: float | None = None,
    baseline_trials: int = 100,
    baseline_seed: int = 0,
    batch_size: int = 64,
) -> EvalReport:
    """Score zero-shot segmentation on a split.

    ``class_names[0]`` is background; the rest are the foreground classes
    offered to the text encoder. Images are processed in order and all
    dataset-level sums are accumulated in that order.
    """
    num_classes = len(class_names)
    table = build_class_table(model, class_names[1:], templates, vocab)
    text_acc, oracle_acc = IoUAccumulator(num_classes), IoUAccumulator(num_classes)
    baseline_accs = [IoUAccumulator(num_classes) for _ in range(baseline_trials)]
    rng = np.random.default_rng(baseline_seed)
    probes, image_miou, image_oracle = [], [], []
    for start in range(0, len(data), batch_size):
        segs = segment_images(model, data.images[start : start + batch_size], table, threshold, tau)
        for offset, s in enumerate(segs):
            truth = data.masks[start + offset]
            text_acc.update(s.result.labels, truth)
            oracle = oracle_assign(s.composed, truth, num_classes)
            oracle_pred = oracle[s.result.group_map]
            oracle_acc.update(oracle_pred, truth)
            image_miou.append(mean_iou(s.result.labels, truth, num_classes)[1])
            image_oracle.append(mean_iou(oracle_pred, truth, num_classes)[1])
            for acc in baseline_accs:
                acc.update(random_labels(s.composed.num_groups, num_classes, rng)[s.result.group_map], truth)
            fg = (truth != 0) & (truth != 255)
            if fg.any():
                probes.append(mask_probe(s.composed, fg))
    per_class, miou = text_acc.result()
    baseline = float(np.mean([acc.result()[1] for acc in baseline_accs])) if baseline_accs else float("nan")
    return EvalReport(
        list(class_names),
        per_class,
        miou,
        oracle_acc.result()[1],
        float(np.mean(probes)) if probes else float("nan"),
        baseline,
        image_miou,
        image_oracle,
    )
