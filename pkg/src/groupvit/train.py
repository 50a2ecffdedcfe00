"""Training loop: AdamW, warm-up + cosine schedule, JSON-lines metrics, resumable checkpoints.

All randomness is derived from ``(seed, step)`` or ``(seed, epoch)``, so the
generator state of a run is fully described by its step counter. A checkpoint
therefore stores parameters, Adam moments, the step, and the seed; resuming
from it replays the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from . import tensorfile
from .config import RunConfig
from .encoders import GroupViT
from .objectives import ContrastiveBatch, PromptSet, generate_prompts, loss_terms
from .synthetic import Dataset
from .text import DEFAULT_TEMPLATES, Vocabulary, tokenize_batch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
TAU_MIN, TAU_MAX = 0.01, 100.0
_EPOCH_STREAM = 1
_STEP_STREAM = 2


class AdamW:
    """Adam with decoupled weight decay, applied to matrices only."""

    def __init__(self, named_params, lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            if p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up to ``base_lr``, then cosine decay to zero at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResources:
    vocab: Vocabulary
    prompts: PromptSet
    templates: tuple[str, ...] = DEFAULT_TEMPLATES


class Trainer:
    def __init__(self, cfg: RunConfig, data: Dataset, resources: TrainResources):
        cfg.validate()
        if len(resources.vocab) > cfg.model.vocab_size:
            raise ValueError(f"vocabulary has {len(resources.vocab)} tokens but vocab_size is {cfg.model.vocab_size}")
        self.cfg = cfg
        self.data = data
        self.res = resources
        self.model = GroupViT(cfg.model, seed=cfg.seed, tau_init=cfg.tau_init)
        self.optimizer = AdamW(self.model.named_parameters(), cfg.lr, cfg.weight_decay)
        self.step = 0
        self.steps_per_epoch = max(len(data) // cfg.batch_size, 1)
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self.warmup_steps = self.steps_per_epoch * cfg.warmup_epochs

    # ------------------------------------------------------------ batches

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, _EPOCH_STREAM, epoch]).permutation(len(self.data))
        b = self.cfg.batch_size
        return order[offset * b : (offset + 1) * b]

    def compute_loss(self, step: int) -> dict[str, ag.Tensor]:
        cfg, model = self.cfg, self.model
        rng = np.random.default_rng([cfg.seed, _STEP_STREAM, step])
        idx = self.batch_indices(step)
        images = self.data.images[idx]
        captions = [self.data.captions[i] for i in idx]
        z_img, _ = model.image(images, mode=cfg.mode, noise_rng=rng)
        texts = list(captions)
        if cfg.multilabel:
            prompted = [generate_prompts(c, self.res.prompts, rng) for c in captions]
            texts += [p[k] for k in range(cfg.k_nouns) for p in prompted]
        # prompts repeat often; encode each distinct sentence once
        unique, inverse = np.unique(np.array(texts, dtype=object), return_inverse=True)
        ids, ends = tokenize_batch(list(unique), self.res.vocab, cfg.model.max_text_length)
        z_txt = ag.embedding_lookup(model.text(ids, ends), inverse)
        b = len(idx)
        z_prompted = None
        if cfg.multilabel:
            z_prompted = z_txt[b:].reshape(cfg.k_nouns, b, z_txt.shape[-1])
        return loss_terms(ContrastiveBatch(z_img, z_txt[:b], z_prompted, model.tau_tensor()))

    # ------------------------------------------------------------ loop

    def train_step(self) -> dict:
        step = self.step
        lr = lr_at(step, self.cfg.lr, self.warmup_steps, self.total_steps)
        self.model.zero_grad()
        terms = self.compute_loss(step)
        loss = terms["total"]
        if not np.isfinite(loss.data):
            raise ag.NumericError(f"non-finite loss at step {step}")
        loss.backward()
        grad_norm = clip_grad_norm(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step(lr)
        ls = self.model.logit_scale
        ls.data = np.clip(ls.data, -np.log(TAU_MAX), -np.log(TAU_MIN))
        self.step += 1
        record = {"step": step, "epoch": step // self.steps_per_epoch, "lr": lr}
        record.update({k: float(v.data) for k, v in terms.items()})
        record.update(grad_norm=grad_norm, tau=self.model.tau)
        return record

    def run(
        self,
        until: int | None = None,
        log_path: str | Path | None = None,
        checkpoint_dir: str | Path | None = None,
        callback: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        """Train up to step ``until`` (default: the whole schedule); append one JSON line per step."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        records = []
        log = open(log_path, "a") if log_path else None
        try:
            while self.step < until:
                rec = self.train_step()
                records.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if callback:
                    callback(rec)
                every = self.cfg.checkpoint_every
                if checkpoint_dir and every and self.step % every == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"step{self.step:06d}.ckpt")
                if rec["step"] % max(self.steps_per_epoch, 1) == 0:
                    logger.info("step %d loss %.4f tau %.4f", rec["step"], rec["total"], rec["tau"])
        finally:
            if log:
                log.close()
        if checkpoint_dir:
            self.save_checkpoint(Path(checkpoint_dir) / "last.ckpt")
        return records

    # ------------------------------------------------------------ persistence

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "meta/format": np.array(float(CHECKPOINT_FORMAT)),
            "meta/step": np.array(float(self.step)),
            "meta/seed": np.array(float(self.cfg.seed)),
            "meta/adam_t": np.array(float(self.optimizer.t)),
        }
        for name, p in self.model.named_parameters():
            out[f"param/{name}"] = p.data
        for name in self.optimizer.params:
            out[f"adam_m/{name}"] = self.optimizer.m[name]
            out[f"adam_v/{name}"] = self.optimizer.v[name]
        return out

    def save_checkpoint(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tensorfile.save(path, self.state_tensors())

    def load_checkpoint(self, path: str | Path) -> None:
        state = tensorfile.load(path)
        if int(state["meta/format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format")
        if int(state["meta/seed"]) != self.cfg.seed:
            raise ValueError(f"{path}: checkpoint seed {int(state['meta/seed'])} != config seed {self.cfg.seed}")
        self.model.load_state_dict(model_state(state))
        for name in self.optimizer.params:
            self.optimizer.m[name] = state[f"adam_m/{name}"].copy()
            self.optimizer.v[name] = state[f"adam_v/{name}"].copy()
        self.optimizer.t = int(state["meta/adam_t"])
        self.step = int(state["meta/step"])


def model_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter entries of a checkpoint, with the ``param/`` prefix removed."""
    return {k[len("param/") :]: v for k, v in state.items() if k.startswith("param/")}


def load_model(path: str | Path, cfg: RunConfig) -> GroupViT:
    model = GroupViT(cfg.model, seed=cfg.seed, tau_init=cfg.tau_init)
    model.load_state_dict(model_state(tensorfile.load(path)))
    return model
