"""GroupViT image encoder, text encoder, and the dual-encoder model around them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ConfigError, ModelConfig
from .grouping import HARD, AssignmentMatrix, GroupingBlockParams, GumbelNoise, grouping_block
from .nn import LayerNorm, Linear, MixerConnector, Mlp, Module, TransformerLayer, parameter, trunc_normal
from .text import PAD_ID

MASK_BIAS = -1e9


@dataclass
class EncoderState:
    segment_tokens: Tensor | None = None
    group_tokens: list[Tensor] = field(default_factory=list)
    assignments: list[AssignmentMatrix] = field(default_factory=list)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, patch_size * patch_size * C), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError("patch_size", f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def _interp_matrix(n_old: int, n_new: int) -> np.ndarray:
    # 1-D linear interpolation with half-pixel centers, edges clamped
    m = np.zeros((n_new, n_old))
    for i in range(n_new):
        src = min(max((i + 0.5) * n_old / n_new - 0.5, 0.0), n_old - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_old - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def resize_positions(pos: Tensor, grid_old: tuple[int, int], grid_new: tuple[int, int]) -> Tensor:
    """Bilinearly resample a (rows*cols, D) positional grid; differentiable."""
    if grid_old == grid_new:
        return pos
    m = np.kron(_interp_matrix(grid_old[0], grid_new[0]), _interp_matrix(grid_old[1], grid_new[1]))
    return ag.matmul(Tensor(m), pos)


class ImageEncoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.hidden_width
        self.patch_proj = Linear(rng, config.patch_size**2 * config.in_channels, d)
        self.pos_embed = parameter(trunc_normal(rng, (config.num_patches, d)))
        self.group_tokens = []
        self.connectors = []
        self.output_mixers = []
        prev_out = None
        for i, st in enumerate(config.stages):
            if i > 0 and st.mixer_connector:
                self.group_tokens.append(None)
                self.connectors.append(MixerConnector(rng, prev_out, st.num_group_tokens, d, config.mlp_ratio))
            else:
                self.group_tokens.append(parameter(trunc_normal(rng, (st.num_group_tokens, d))))
                self.connectors.append(None)
            if st.output_tokens != st.num_group_tokens:
                self.output_mixers.append(
                    MixerConnector(rng, st.num_group_tokens, st.output_tokens, d, config.mlp_ratio)
                )
            else:
                self.output_mixers.append(None)
            prev_out = st.output_tokens
        self.layers = [TransformerLayer(rng, d, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers)]
        self.grouping = [GroupingBlockParams(rng, d) for _ in config.stages]
        self.norm = LayerNorm(d)
        self.proj = Mlp(rng, d, config.projection_hidden, config.projection_width)

    def embed_patches(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        patches = patchify(images, cfg.patch_size)
        h, w = np.shape(images)[-3:-1]
        grid = (h // cfg.patch_size, w // cfg.patch_size)
        pos = resize_positions(self.pos_embed, (cfg.grid_size, cfg.grid_size), grid)
        return self.patch_proj(Tensor(patches)) + pos

    def forward_segments(
        self,
        images: np.ndarray,
        mode: str = HARD,
        noise_rng: np.random.Generator | None = None,
        frozen_onehots: list[np.ndarray] | None = None,
    ) -> tuple[Tensor, EncoderState]:
        """Run all grouping stages and the trailing layers; returns normalized final segments (B, M_L, D)."""
        cfg = self.config
        segments = self.embed_patches(images)
        batch = segments.shape[0]
        state = EncoderState()
        layer = 0
        prev_groups = None
        for i, st in enumerate(cfg.stages):
            if self.connectors[i] is not None:
                groups = self.connectors[i](prev_groups)
            else:
                groups = ag.broadcast_to(self.group_tokens[i], (batch,) + self.group_tokens[i].shape)
            state.group_tokens.append(groups)
            tokens = ag.concat([groups, segments], axis=1)
            while layer < st.insert_after_layer:
                tokens = self.layers[layer](tokens)
                layer += 1
            m = st.num_group_tokens
            groups, segments = tokens[:, :m], tokens[:, m:]
            if self.output_mixers[i] is not None:
                groups = self.output_mixers[i](groups)
            noise = GumbelNoise.draw(noise_rng, (batch, st.output_tokens)) if noise_rng is not None else None
            frozen = None if frozen_onehots is None else frozen_onehots[i]
            segments, a = grouping_block(
                groups, segments, self.grouping[i], noise, mode, cfg.gumbel_temperature, frozen
            )
            state.assignments.append(a)
            prev_groups = groups
        while layer < cfg.num_layers:
            segments = self.layers[layer](segments)
            layer += 1
        segments = self.norm(segments)
        state.segment_tokens = segments
        return segments, state

    def __call__(self, images, mode: str = HARD, noise_rng=None, frozen_onehots=None) -> tuple[Tensor, EncoderState]:
        """Global image embedding: project the average of the final segments, then l2-normalize."""
        segments, state = self.forward_segments(images, mode, noise_rng, frozen_onehots)
        return ag.l2_normalize(self.proj(segments.mean(axis=1)), axis=-1), state

    def encode_segments(self, images) -> tuple[Tensor, EncoderState]:
        """Per-segment embeddings (B, M_L, P) for zero-shot segmentation; hard assignment, no noise."""
        segments, state = self.forward_segments(images, HARD, None)
        return ag.l2_normalize(self.proj(segments), axis=-1), state


class TextEncoder(Module):
    """Non-causal Transformer over word ids; the <eos> position carries the sentence embedding.

    Padding positions are masked out as attention keys.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        w = config.text_width
        self.token_embed = parameter(trunc_normal(rng, (config.vocab_size, w)))
        self.pos_embed = parameter(trunc_normal(rng, (config.max_text_length, w)))
        self.layers = [TransformerLayer(rng, w, config.text_heads, config.mlp_ratio) for _ in range(config.text_layers)]
        self.norm = LayerNorm(w)
        self.proj = Mlp(rng, w, config.projection_hidden, config.projection_width)

    def __call__(self, token_ids: np.ndarray, end_positions: np.ndarray) -> Tensor:
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        ends = np.atleast_1d(np.asarray(end_positions, dtype=np.int64))
        if ids.shape[1] != self.config.max_text_length:
            raise ag.DimensionError(f"text length {ids.shape[1]} != max_text_length {self.config.max_text_length}")
        x = ag.embedding_lookup(self.token_embed, ids) + self.pos_embed
        key_bias = np.where(ids == PAD_ID, MASK_BIAS, 0.0)
        for layer in self.layers:
            x = layer(x, key_bias)
        x = self.norm(ag.gather_rows(x, ends))
        return ag.l2_normalize(self.proj(x), axis=-1)


class GroupViT(Module):
    """Image and text encoders plus the learnable contrastive temperature.

    The temperature is stored as ``logit_scale`` with tau = exp(-logit_scale).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, tau_init: float = 0.07):
        rng = np.random.default_rng(seed)
        self.config = config
        self.image = ImageEncoder(config, rng)
        self.text = TextEncoder(config, rng)
        self.logit_scale = parameter(np.array(np.log(1.0 / tau_init)))

    @property
    def tau(self) -> float:
        return float(np.exp(-self.logit_scale.data))

    def tau_tensor(self) -> Tensor:
        return ag.exp(ag.neg(self.logit_scale))
