"""Parameter containers and the standard layers the encoders are built from."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Holds parameters and sub-modules as attributes.

    Names come from attribute paths ("layers.0.attn.qkv.weight"), in
    attribute-assignment order, so every parameter appears exactly once.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ag.DimensionError(f"{name}: checkpoint shape {value.shape} != parameter {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, prefix: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{prefix}.{i}")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias)


class Mlp(Module):
    """Linear, GELU, Linear."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product self-attention over the token axis."""

    def __init__(self, rng, dim: int, num_heads: int):
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        # x: (B, T, D); key_bias: (B, T) additive logits bias, -inf-like for masked keys
        b, t, d = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(b, t, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = ag.matmul(q, k.transpose()) * (1.0 / np.sqrt(d // h))
        if key_bias is not None:
            logits = logits + key_bias[:, None, None, :]
        out = ag.matmul(ag.softmax(logits, axis=-1), v)
        return self.proj(out.transpose(0, 2, 1, 3).reshape(b, t, d))


class TransformerLayer(Module):
    """Pre-norm block: x + attn(norm(x)), then + mlp(norm(x))."""

    def __init__(self, rng, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio), dim)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_bias)
        return x + self.mlp(self.norm2(x))


class MixerConnector(Module):
    """MLP-Mixer layer that maps ``n_in`` tokens to ``n_out`` tokens.

    Token mixing runs an MLP along the token axis (residual only when the token
    count is preserved), then a residual channel MLP runs along the width.
    """

    def __init__(self, rng, n_in: int, n_out: int, dim: int, mlp_ratio: float = 4.0):
        self.n_in, self.n_out = n_in, n_out
        self.norm_tokens = LayerNorm(dim)
        self.token_mlp = Mlp(rng, n_in, max(int(n_in * mlp_ratio / 2), n_out), n_out)
        self.norm_channels = LayerNorm(dim)
        self.channel_mlp = Mlp(rng, dim, int(dim * mlp_ratio), dim)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] != self.n_in:
            raise ag.DimensionError(f"mixer expects {self.n_in} tokens, got {tokens.shape[-2]}")
        mixed = self.token_mlp(self.norm_tokens(tokens).transpose()).transpose()
        if self.n_in == self.n_out:
            mixed = tokens + mixed
        return mixed + self.channel_mlp(self.norm_channels(mixed))
