"""Grouping Block: Gumbel-softmax assignment of segments to groups and the weighted merge.

Shapes carry optional leading batch dims: groups are (..., M, D), segments
(..., S, D), assignments (..., M, S). Softmax normalizes over the group axis,
so every column (one per segment) of an assignment is a distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LayerNorm, Module, parameter, trunc_normal

MERGE_EPS = 1e-6
# Hard-mode group mass is a non-negative integer, so any guard in (0, 1) gives
# the same forward value. 0.5 keeps the straight-through gradient of an empty
# group near the scale of a one-member group instead of 1 / MERGE_EPS, and
# stays clear of the kink at mass 1.
HARD_MERGE_EPS = 0.5

SOFT = "soft"
HARD = "hard"


@dataclass
class AssignmentMatrix:
    values: Tensor  # (..., M, S)
    mode: str

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


@dataclass
class GumbelNoise:
    """One Gumbel(0, 1) draw per group token, or nothing when disabled."""

    samples: np.ndarray | None = None

    @property
    def enabled(self) -> bool:
        return self.samples is not None

    @classmethod
    def disabled(cls) -> GumbelNoise:
        return cls(None)

    @classmethod
    def draw(cls, rng: np.random.Generator, shape) -> GumbelNoise:
        """``shape`` is (..., M): batch dims followed by the number of groups."""
        u = rng.random(shape)
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
        return cls(-np.log(-np.log(u)))


class GroupingBlockParams(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.norm_groups = LayerNorm(dim)
        self.norm_segments = LayerNorm(dim)
        self.w_q = parameter(trunc_normal(rng, (dim, dim)))
        self.w_k = parameter(trunc_normal(rng, (dim, dim)))
        self.w_v = parameter(trunc_normal(rng, (dim, dim)))
        self.w_o = parameter(trunc_normal(rng, (dim, dim)))


def assign_soft(
    groups: Tensor,
    segments: Tensor,
    params: GroupingBlockParams,
    noise: GumbelNoise | None = None,
    temperature: float = 1.0,
) -> AssignmentMatrix:
    """A[i, j] = softmax_i((W_q g_i . W_k s_j + gamma_i) / temperature)."""
    if groups.shape[-1] != segments.shape[-1]:
        raise ag.DimensionError(f"group width {groups.shape} != segment width {segments.shape}")
    q = ag.matmul(groups, params.w_q)
    k = ag.matmul(segments, params.w_k)
    logits = ag.matmul(q, k.transpose())
    if noise is not None and noise.enabled:
        if noise.samples.shape[-1] != groups.shape[-2]:
            raise ag.DimensionError(f"noise {noise.samples.shape} does not match {groups.shape[-2]} groups")
        logits = logits + noise.samples[..., :, None]
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return AssignmentMatrix(ag.softmax(logits, axis=-2), SOFT)


def assign_hard(a: AssignmentMatrix, onehot: np.ndarray | None = None) -> AssignmentMatrix:
    """Straight-through one-hot of the per-column argmax.

    ``onehot`` freezes the forward value; with it, the output is exactly
    ``onehot + A - sg(A)`` evaluated around a fixed argmax.
    """
    if a.mode != SOFT:
        raise ValueError("assign_hard expects a soft assignment")
    return AssignmentMatrix(ag.straight_through_onehot(a.values, axis=-2, onehot=onehot), HARD)


def merge_segments(
    groups: Tensor,
    segments: Tensor,
    a: AssignmentMatrix,
    params: GroupingBlockParams,
    eps: float = MERGE_EPS,
) -> Tensor:
    """new_i = g_i + W_o (sum_j A[i,j] W_v s_j) / max(sum_j A[i,j], eps)."""
    values = ag.matmul(segments, params.w_v)
    pooled = ag.matmul(a.values, values)
    mass = ag.clamp_min(a.values.sum(axis=-1, keepdims=True), eps)
    return groups + ag.matmul(pooled / mass, params.w_o)


def grouping_block(
    groups: Tensor,
    segments: Tensor,
    params: GroupingBlockParams,
    noise: GumbelNoise | None = None,
    mode: str = HARD,
    temperature: float = 1.0,
    frozen_onehot: np.ndarray | None = None,
) -> tuple[Tensor, AssignmentMatrix]:
    """Merge ``segments`` into one new segment per group token.

    Both token sets are layer-normalized before the projections; the residual
    uses the raw group tokens. Returns the new segments and the assignment
    that produced them (one-hot in hard mode).
    """
    if mode not in (SOFT, HARD):
        raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
    g_norm = params.norm_groups(groups)
    s_norm = params.norm_segments(segments)
    a = assign_soft(g_norm, s_norm, params, noise, temperature)
    if mode == HARD:
        a = assign_hard(a, frozen_onehot)
    eps = HARD_MERGE_EPS if mode == HARD else MERGE_EPS
    return merge_segments(groups, s_norm, a, params, eps), a
