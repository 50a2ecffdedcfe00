"""Image-text contrastive objectives and noun-prompt generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .text import DEFAULT_TEMPLATES, NOUN_PLACEHOLDER, words


def _check_tau(tau) -> Tensor:
    t = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=np.float64))
    if not np.all(t.data > 0):
        raise ValueError(f"temperature must be positive, got {t.data}")
    return t


def _diag(x: Tensor) -> Tensor:
    n = x.shape[-1]
    idx = np.arange(n)
    return x[..., idx, idx]


def contrastive_components(z_images: Tensor, z_texts: Tensor, tau) -> tuple[Tensor, Tensor]:
    """(image->text, text->image) cross-entropy terms over the batch; positives on the diagonal."""
    tau = _check_tau(tau)
    if z_images.shape != z_texts.shape:
        raise ag.DimensionError(f"image batch {z_images.shape} != text batch {z_texts.shape}")
    logits = ag.matmul(z_images, z_texts.transpose()) / tau  # [i, j] = z_i^I . z_j^T / tau
    pos = _diag(logits)
    i2t = ag.mean(ag.logsumexp(logits, axis=1) - pos)
    t2i = ag.mean(ag.logsumexp(logits, axis=0) - pos)
    return i2t, t2i


def contrastive_loss(z_images: Tensor, z_texts: Tensor, tau) -> Tensor:
    i2t, t2i = contrastive_components(z_images, z_texts, tau)
    return i2t + t2i


def multilabel_components(z_images: Tensor, z_prompted: Tensor, tau) -> tuple[Tensor, Tensor]:
    """Multi-label terms for K prompted texts per image.

    ``z_prompted`` is (K, B, P). Image->texts pools the K positives inside one
    softmax over all K*B texts; texts->image averages K*B ordinary
    text->image terms.
    """
    tau = _check_tau(tau)
    if z_prompted.ndim != 3 or z_prompted.shape[1:] != z_images.shape:
        raise ag.DimensionError(f"prompted {z_prompted.shape} does not match images {z_images.shape}")
    logits = ag.matmul(z_images, z_prompted.transpose()) / tau  # [k, i, j] = z_i^I . z_j^{T_k} / tau
    pos = _diag(logits)  # [k, i]
    i2t = ag.mean(ag.logsumexp(logits, axis=(0, 2)) - ag.logsumexp(pos, axis=0))
    t2i = ag.mean(ag.logsumexp(logits, axis=1) - pos)
    return i2t, t2i


def multilabel_contrastive_loss(z_images: Tensor, z_prompted: Tensor, tau) -> Tensor:
    i2t, t2i = multilabel_components(z_images, z_prompted, tau)
    return i2t + t2i


@dataclass
class ContrastiveBatch:
    z_images: Tensor  # (B, P)
    z_texts: Tensor  # (B, P)
    z_prompted: Tensor | None  # (K, B, P)
    tau: Tensor | float


def total_loss(batch: ContrastiveBatch) -> Tensor:
    loss = contrastive_loss(batch.z_images, batch.z_texts, batch.tau)
    if batch.z_prompted is not None:
        loss = loss + multilabel_contrastive_loss(batch.z_images, batch.z_prompted, batch.tau)
    return loss


def loss_terms(batch: ContrastiveBatch) -> dict[str, Tensor]:
    """All directional components plus the total, for logging."""
    i2t, t2i = contrastive_components(batch.z_images, batch.z_texts, batch.tau)
    terms = {"i2t": i2t, "t2i": t2i}
    total = i2t + t2i
    if batch.z_prompted is not None:
        mi2t, mt2i = multilabel_components(batch.z_images, batch.z_prompted, batch.tau)
        terms.update(ml_i2t=mi2t, ml_t2i=mt2i)
        total = total + mi2t + mt2i
    terms["total"] = total
    return terms


@dataclass(frozen=True)
class PromptSet:
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    noun_lexicon: frozenset[str] = frozenset()
    k: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.templates:
            raise ValueError("at least one template is required")


def caption_nouns(caption: str, lexicon) -> list[str]:
    """Distinct lexicon nouns in order of first appearance."""
    return list(dict.fromkeys(w for w in words(caption) if w in lexicon))


def fill_template(template: str, noun: str) -> str:
    return template.replace(NOUN_PLACEHOLDER, noun)


def generate_prompts(caption: str, prompts: PromptSet, rng: np.random.Generator) -> list[str]:
    """K prompted sentences from the caption's nouns.

    With at least K distinct nouns, K are drawn without replacement. With
    fewer, every noun is used once and the rest are drawn with replacement.
    A caption with no known noun is repeated K times unchanged.
    """
    nouns = caption_nouns(caption, prompts.noun_lexicon)
    k = prompts.k
    if not nouns:
        return [caption] * k
    if len(nouns) >= k:
        picked = [nouns[i] for i in rng.choice(len(nouns), size=k, replace=False)]
    else:
        picked = [nouns[i] for i in rng.permutation(len(nouns))]
        picked += [nouns[i] for i in rng.integers(len(nouns), size=k - len(nouns))]
    return [fill_template(prompts.templates[int(rng.integers(len(prompts.templates)))], n) for n in picked]


def class_prompts(class_name: str, templates: Sequence[str]) -> list[str]:
    return [fill_template(t, class_name) for t in templates]
