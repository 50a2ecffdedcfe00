"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 to 8 train desk-preset models (hard and soft assignment, with
and without the multi-label loss, three seeds each). Those runs are shared
through a session fixture and marked slow; expect tens of minutes on one CPU.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from groupvit import autograd as ag
from groupvit import config, grouping, synthetic, tensorfile
from groupvit.autograd import Tensor
from groupvit.config import GroupingStageConfig, ModelConfig
from groupvit.encoders import GroupViT, TextEncoder
from groupvit.gradcheck import check_gradients
from groupvit.grouping import HARD, SOFT, AssignmentMatrix, GroupingBlockParams, assign_hard, assign_soft
from groupvit.nn import MixerConnector, TransformerLayer
from groupvit.objectives import (
    PromptSet,
    contrastive_components,
    contrastive_loss,
    multilabel_components,
    multilabel_contrastive_loss,
)
from groupvit.pipeline import evaluate
from groupvit.text import DEFAULT_TEMPLATES, tokenize_batch
from groupvit.train import Trainer, TrainResources
from groupvit.zeroshot import compose_assignments, is_column_onehot

SEEDS = (0, 1, 2)
TRAIN_SAMPLES = 512
VAL_SAMPLES = 128
DATA_SEED = 0


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def mini_config() -> ModelConfig:
    return ModelConfig(
        image_size=8, patch_size=2, hidden_width=8, num_layers=3, num_heads=2, mlp_ratio=2.0,
        stages=(GroupingStageConfig(4, 1), GroupingStageConfig(2, 2, mixer_connector=True)),
        projection_width=6, projection_hidden=10, text_layers=2, text_width=8, text_heads=2,
        vocab_size=40, max_text_length=8,
    ).validate()


# ---------------------------------------------------------------- 1


def _frozen_hard_loss(model, imgs, w, monkeypatch):
    """Image loss in hard mode with the argmax pinned and a smooth stand-in for the estimator.

    Around a fixed argmax, one-hot + A(x) - A(x0) is differentiable and its
    derivative is exactly what the straight-through estimator reports.
    """
    _, state = model.image(imgs, mode=HARD)
    frozen = [a.numpy().copy() for a in state.assignments]
    soft0 = []

    def record(a, onehot=None):
        soft0.append(a.values.data.copy())
        return AssignmentMatrix(ag.straight_through_onehot(a.values, onehot=onehot), HARD)

    monkeypatch.setattr(grouping, "assign_hard", record)
    model.image(imgs, mode=HARD, frozen_onehots=frozen)
    calls = iter(range(10**9))

    def surrogate(a, onehot=None):
        i = next(calls) % len(frozen)
        return AssignmentMatrix(Tensor(onehot) + a.values - Tensor(soft0[i]), HARD)

    monkeypatch.setattr(grouping, "assign_hard", surrogate)
    return lambda: (model.image(imgs, mode=HARD, frozen_onehots=frozen)[0] * w).sum()


def test_criterion_1_gradient_integrity(monkeypatch):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = {}

    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    primitives = {
        "matmul": lambda: (ag.matmul(a, b.transpose()) * w[:, :3]).sum(),
        "add_mul_div": lambda: (((a + b) * a / (b * b + 1.0)) * w).sum(),
        "exp_log": lambda: (ag.log(ag.exp(a) + ag.exp(b)) * w).sum(),
        "softmax": lambda: (ag.softmax(a, axis=0) * w).sum(),
        "logsumexp": lambda: ag.logsumexp(a * b, axis=(0, 1)),
        "layer_norm": lambda: (ag.layer_norm(a, b[0], b[1]) * w).sum(),
        "gelu": lambda: (ag.gelu(a) * w).sum(),
        "l2_normalize": lambda: (ag.l2_normalize(a, axis=-1) * w).sum(),
        "concat_slice": lambda: (ag.concat([a, b], axis=1)[:, 2:6] * w).sum(),
        "reshape_transpose": lambda: (a.reshape(4, 3).transpose() * b).sum(),
        "mean_broadcast": lambda: (ag.broadcast_to(ag.mean(a, axis=0), (3, 4)) * b).sum(),
    }
    for name, f in primitives.items():
        errors[name] = check_gradients(f, [a, b], rng=rng)

    layer = TransformerLayer(rng, 8, 2)
    x = leaf(rng.standard_normal((2, 5, 8)))
    wx = rng.standard_normal((2, 5, 8))
    errors["transformer_layer"] = check_gradients(lambda: (layer(x) * wx).sum(), [x] + layer.parameters(), rng=rng)
    mixer = MixerConnector(rng, 5, 3, 8)
    wm = rng.standard_normal((2, 3, 8))
    errors["mixer"] = check_gradients(lambda: (mixer(x) * wm).sum(), [x] + mixer.parameters(), rng=rng)

    params = GroupingBlockParams(rng, 6)
    g, s = leaf(rng.standard_normal((3, 6))), leaf(rng.standard_normal((10, 6)))
    wg = rng.standard_normal((3, 6))
    noise = grouping.GumbelNoise.draw(rng, (3,))
    block_inputs = [g, s] + params.parameters()
    errors["grouping_soft"] = check_gradients(
        lambda: (grouping.grouping_block(g, s, params, noise, SOFT)[0] * wg).sum(), block_inputs, rng=rng
    )
    onehot = grouping.grouping_block(g, s, params, noise, HARD)[1].numpy().copy()
    a0 = assign_soft(params.norm_groups(g), params.norm_segments(s), params, noise).values.data.copy()
    with monkeypatch.context() as mp:
        mp.setattr(grouping, "assign_hard", lambda a, oh=None: AssignmentMatrix(Tensor(oh) + a.values - Tensor(a0), HARD))
        errors["grouping_hard"] = check_gradients(
            lambda: (grouping.grouping_block(g, s, params, noise, HARD, frozen_onehot=onehot)[0] * wg).sum(),
            block_inputs,
            rng=rng,
        )

    model = GroupViT(mini_config(), seed=3)
    imgs = rng.random((2, 8, 8, 3))
    wi = rng.standard_normal((2, 6))
    image_params = model.image.parameters()
    errors["mini_encoder_soft"] = check_gradients(
        lambda: (model.image(imgs, mode=SOFT)[0] * wi).sum(), image_params, rng=rng
    )
    with monkeypatch.context() as mp:
        f = _frozen_hard_loss(model, imgs, wi, mp)
        errors["mini_encoder_hard"] = check_gradients(f, image_params, rng=rng)

    vocab = synthetic.vocabulary()
    text = TextEncoder(mini_config(), rng)
    ids, ends = tokenize_batch(["a red circle", "a photo of a blue ring"], vocab, 8)
    wt = rng.standard_normal((2, 6))
    errors["text_encoder"] = check_gradients(lambda: (text(ids, ends) * wt).sum(), text.parameters(), rng=rng)

    zi, zt, zp = leaf(unit_rows(rng, 4, 5)), leaf(unit_rows(rng, 4, 5)), leaf(unit_rows(rng, 3, 4, 5))
    tau = leaf(0.3)
    errors["contrastive_loss"] = check_gradients(lambda: contrastive_loss(zi, zt, tau), [zi, zt, tau], rng=rng)
    errors["multilabel_loss"] = check_gradients(
        lambda: multilabel_contrastive_loss(zi, zp, tau), [zi, zp, tau], rng=rng
    )

    elapsed = time.perf_counter() - start
    encoder_keys = {"mini_encoder_soft", "mini_encoder_hard"}
    bad = {k: v for k, v in errors.items() if v >= (1e-3 if k in encoder_keys else 1e-4)}
    ok = not bad and elapsed < 120
    worst = max(errors, key=errors.get)
    verdict(1, "gradient integrity", ok, f"{len(errors)} checks, worst {worst} {errors[worst]:.2e}, {elapsed:.0f}s")
    assert ok, (bad, elapsed)


# ---------------------------------------------------------------- 2


def test_criterion_2_straight_through_identity():
    rng = np.random.default_rng(7)
    worst, all_differ = 0.0, True
    for _ in range(50):
        m, s, d = int(rng.integers(2, 6)), int(rng.integers(3, 12)), 4
        logits = leaf(rng.standard_normal((m, s)) * 2.0)
        segs = rng.standard_normal((s, d))
        w = rng.standard_normal((m, d))

        def downstream(assign):
            # a nonlinear merge-like readout of the assignment
            pooled = ag.matmul(assign, Tensor(segs))
            return (ag.gelu(pooled / ag.clamp_min(assign.sum(axis=-1, keepdims=True), 0.5)) * w).sum()

        def grad_at_soft(loss_of, through_hard):
            """Gradient that reaches the soft matrix, on a freshly built graph."""
            soft = ag.softmax(logits, axis=0)
            out = assign_hard(AssignmentMatrix(soft, SOFT)).values if through_hard else soft
            loss_of(out).backward()
            return soft.grad, out.data

        g_hard, hard = grad_at_soft(downstream, True)
        soft_values = ag.softmax(logits, axis=0).data
        all_differ &= not np.allclose(hard, soft_values)
        # the same loss with the one-hot matrix fed in as a plain input
        onehot = leaf(hard)
        downstream(onehot).backward()
        worst = max(worst, float(np.max(np.abs(g_hard - onehot.grad))))
        # a loss linear in the assignment has the same gradient on both paths
        lin = rng.standard_normal((m, s))
        g_lin_hard, _ = grad_at_soft(lambda t: (t * lin).sum(), True)
        g_lin_soft, _ = grad_at_soft(lambda t: (t * lin).sum(), False)
        worst = max(worst, float(np.max(np.abs(g_lin_hard - g_lin_soft))))
    ok = worst <= 1e-10 and all_differ
    verdict(2, "straight-through identity", ok, f"max gradient gap {worst:.1e}, forwards differ: {all_differ}")
    assert worst <= 1e-10
    assert all_differ


# ---------------------------------------------------------------- 3


def test_criterion_3_onehot_and_composition():
    rng = np.random.default_rng(3)
    agree = total = 0
    all_onehot = True
    for _ in range(1000):
        grid = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        n, d = grid[0] * grid[1], 6
        params = GroupingBlockParams(rng, d)
        segments = Tensor(rng.standard_normal((n, d)))
        chain, owners = [], []
        for _ in range(int(rng.integers(1, 4))):
            m = int(rng.integers(1, 7))
            groups = Tensor(rng.standard_normal((m, d)))
            noise = grouping.GumbelNoise.draw(rng, (m,))
            segments, a = grouping.grouping_block(groups, segments, params, noise, HARD)
            all_onehot &= is_column_onehot(a.numpy())
            chain.append(a)
            owners.append(np.argmax(a.numpy(), axis=0))
        composed = compose_assignments(chain, grid)
        all_onehot &= is_column_onehot(composed.values)
        got = composed.patch_groups().ravel()
        for p in range(n):
            idx = p
            for o in owners:
                idx = o[idx]
            agree += int(got[p] == idx)
            total += 1
    ok = all_onehot and agree == total
    verdict(3, "one-hot and composition invariants", ok, f"one-hot: {all_onehot}, oracle agreement {agree}/{total}")
    assert all_onehot
    assert agree == total


# ---------------------------------------------------------------- 4


def _brute_contrastive(zi, zt, tau):
    b = len(zi)
    s = [[float(np.dot(zi[i], zt[j])) / tau for j in range(b)] for i in range(b)]
    i2t = sum(-math.log(math.exp(s[i][i]) / sum(math.exp(s[i][j]) for j in range(b))) for i in range(b)) / b
    t2i = sum(-math.log(math.exp(s[i][i]) / sum(math.exp(s[j][i]) for j in range(b))) for i in range(b)) / b
    return i2t, t2i


def _brute_multilabel(zi, zp, tau):
    k, b = zp.shape[0], zp.shape[1]
    s = lambda i, kk, j: float(np.dot(zi[i], zp[kk, j])) / tau  # noqa: E731
    i2t = 0.0
    for i in range(b):
        den = sum(math.exp(s(i, kk, j)) for kk in range(k) for j in range(b))
        i2t -= math.log(sum(math.exp(s(i, kk, i)) for kk in range(k)) / den)
    t2i = 0.0
    for kk in range(k):
        for i in range(b):
            t2i -= math.log(math.exp(s(i, kk, i)) / sum(math.exp(s(j, kk, i)) for j in range(b)))
    return i2t / b, t2i / (k * b)


def test_criterion_4_loss_identities():
    rng = np.random.default_rng(4)
    checks = {}
    zi, zt = unit_rows(rng, 1, 8), unit_rows(rng, 1, 8)
    checks["B=1 zero"] = (
        float(contrastive_loss(Tensor(zi), Tensor(zt), 0.07).data) == 0.0
        and float(multilabel_contrastive_loss(Tensor(zi), Tensor(unit_rows(rng, 3, 1, 8)), 0.07).data) == 0.0
    )
    uniform = True
    for b in (2, 5, 9):
        z = np.zeros((b, 4))
        z[:, 0] = 1.0
        comps = list(contrastive_components(Tensor(z), Tensor(z), 0.5))
        comps += list(multilabel_components(Tensor(z), Tensor(np.stack([z] * 3)), 0.5))
        # the image-to-texts multi-label term has K positives among K*B texts: log B as well
        uniform &= all(abs(float(c.data) - math.log(b)) <= 1e-9 for c in comps)
    checks["uniform log B"] = uniform
    k1 = True
    for b in (2, 4, 7):
        zi, zp = unit_rows(rng, b, 6), unit_rows(rng, 1, b, 6)
        k1 &= abs(float(multilabel_contrastive_loss(Tensor(zi), Tensor(zp), 0.2).data)
                  - float(contrastive_loss(Tensor(zi), Tensor(zp[0]), 0.2).data)) <= 1e-12
    checks["K=1 equals standard"] = k1
    brute = 0.0
    for b in range(1, 5):
        for k in range(1, 4):
            for _ in range(5):
                zi, zt, zp = unit_rows(rng, b, 5), unit_rows(rng, b, 5), unit_rows(rng, k, b, 5)
                tau = float(rng.uniform(0.05, 2.0))
                got = [float(t.data) for t in contrastive_components(Tensor(zi), Tensor(zt), tau)]
                brute = max(brute, *np.abs(np.subtract(got, _brute_contrastive(zi, zt, tau))))
                got = [float(t.data) for t in multilabel_components(Tensor(zi), Tensor(zp), tau)]
                brute = max(brute, *np.abs(np.subtract(got, _brute_multilabel(zi, zp, tau))))
    checks["brute force"] = brute <= 1e-10
    ok = all(checks.values())
    verdict(4, "loss identities", ok, ", ".join(f"{k}: {v}" for k, v in checks.items()) + f", brute gap {brute:.1e}")
    assert ok, checks


# ---------------------------------------------------------------- desk-scale training runs


@dataclass
class RunResult:
    miou: float
    oracle_miou: float
    probe: float
    baseline: float
    image_miou: list
    image_oracle: list
    seconds: float


def _resources(cfg):
    return TrainResources(synthetic.vocabulary(), PromptSet(noun_lexicon=frozenset(synthetic.SHAPES), k=cfg.k_nouns))


def _score(model, cfg, val, trials=100):
    return evaluate(model, val, synthetic.CLASS_NAMES, DEFAULT_TEMPLATES, synthetic.vocabulary(), cfg.threshold,
                    baseline_trials=trials)


@pytest.fixture(scope="session")
def desk_data():
    return (synthetic.in_memory_split(TRAIN_SAMPLES, DATA_SEED, "train"),
            synthetic.in_memory_split(VAL_SAMPLES, DATA_SEED, "val"))


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    """Trained desk-preset variants keyed by (variant, seed)."""
    train, val = desk_data
    variants = {
        "hard": {},
        "soft": {"mode": SOFT},
        "single_loss": {"multilabel": False},
    }
    out = {}
    for name, changes in variants.items():
        for seed in SEEDS:
            cfg = config.desk_preset().replace(seed=seed, **changes)
            start = time.perf_counter()
            trainer = Trainer(cfg, train, _resources(cfg))
            trainer.run()
            seconds = time.perf_counter() - start
            rep = _score(trainer.model, cfg, val)
            out[name, seed] = RunResult(rep.miou, rep.oracle_miou, rep.probe_jaccard, rep.random_baseline_miou,
                                        rep.image_miou, rep.image_oracle_miou, seconds)
    return out


def _wins(runs, a, b):
    return [runs[a, s].miou > runs[b, s].miou for s in SEEDS]


def _mious(runs, name):
    return " ".join(f"{runs[name, s].miou:.3f}" for s in SEEDS)


@pytest.mark.slow
def test_criterion_5_hard_beats_soft(desk_runs):
    wins = _wins(desk_runs, "hard", "soft")
    ok = sum(wins) >= 2
    detail = f"hard mIoU {_mious(desk_runs, 'hard')} vs soft {_mious(desk_runs, 'soft')}, wins {sum(wins)}/3"
    verdict(5, "hard beats soft assignment", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_6_multilabel_helps(desk_runs):
    wins = _wins(desk_runs, "hard", "single_loss")
    ok = sum(wins) >= 2
    detail = f"with mIoU {_mious(desk_runs, 'hard')} vs without {_mious(desk_runs, 'single_loss')}, wins {sum(wins)}/3"
    verdict(6, "multi-label loss helps", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_7_emergent_grouping(desk_runs):
    r = desk_runs["hard", SEEDS[0]]
    target = max(0.35, 3 * r.baseline)
    dominated = all(o >= t for o, t in zip(r.image_oracle, r.image_miou))
    ok = r.miou >= target and dominated and r.seconds < 30 * 60
    detail = (f"mIoU {r.miou:.3f} vs target {target:.3f} (random {r.baseline:.3f}), oracle {r.oracle_miou:.3f}, "
              f"oracle dominates every image: {dominated}, trained in {r.seconds:.0f}s")
    verdict(7, "emergent grouping", ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_8_mask_probe(desk_runs, desk_data):
    _, val = desk_data
    cfg = config.desk_preset()
    untrained = _score(GroupViT(cfg.model, seed=SEEDS[0], tau_init=cfg.tau_init), cfg, val, trials=0).probe_jaccard
    r = desk_runs["hard", SEEDS[0]]
    ok = r.probe >= 0.5 and r.probe > untrained
    detail = f"best-group Jaccard {r.probe:.3f} trained vs {untrained:.3f} untrained"
    verdict(8, "mask probing", ok, detail)
    assert ok, detail


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism_and_persistence(tmp_path):
    cfg = config.desk_preset().replace(epochs=2, warmup_epochs=1)
    data = synthetic.in_memory_split(64, DATA_SEED, "train")
    for name in ("a", "b"):
        Trainer(cfg, data, _resources(cfg)).run(log_path=tmp_path / f"{name}.jsonl")
    identical = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    full = Trainer(cfg, data, _resources(cfg))
    full.run(log_path=tmp_path / "full.jsonl")
    first = Trainer(cfg, data, _resources(cfg))
    first.run(until=3, log_path=tmp_path / "resumed.jsonl", checkpoint_dir=tmp_path / "ck")
    second = Trainer(cfg, data, _resources(cfg))
    second.load_checkpoint(tmp_path / "ck" / "last.ckpt")
    second.run(log_path=tmp_path / "resumed.jsonl")
    resumed = (tmp_path / "full.jsonl").read_bytes() == (tmp_path / "resumed.jsonl").read_bytes() and (
        tensorfile.dumps(full.state_tensors()) == tensorfile.dumps(second.state_tensors())
    )

    full.save_checkpoint(tmp_path / "x.ckpt")
    other = Trainer(cfg, data, _resources(cfg))
    other.load_checkpoint(tmp_path / "x.ckpt")
    other.save_checkpoint(tmp_path / "y.ckpt")
    stable = (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()

    ok = identical and resumed and stable
    verdict(9, "determinism and persistence", ok,
            f"identical logs: {identical}, resume matches: {resumed}, save-load-save stable: {stable}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_config_fidelity(tmp_path):
    path = tmp_path / "full.cfg"
    config.save(path, config.full_preset())
    text = path.read_text()
    cfg = config.load(path)
    m = cfg.model
    expected = {
        "num_layers": (m.num_layers, 12),
        "hidden_width": (m.hidden_width, 384),
        "group tokens": (tuple(st.num_group_tokens for st in m.stages), (64, 8)),
        "stages after layers": (tuple(st.insert_after_layer for st in m.stages), (6, 9)),
        "k_nouns": (cfg.k_nouns, 3),
        "thresholds": ((cfg.threshold_voc, cfg.threshold_context), (0.9, 0.5)),
        "weight_decay": (cfg.weight_decay, 0.05),
        "epochs": (cfg.epochs, 30),
        "warmup_epochs": (cfg.warmup_epochs, 5),
    }
    mismatched = {k: v for k, v in expected.items() if v[0] != v[1]}
    verbatim = all(
        line in text.splitlines()
        for line in (
            "num_layers = 12", "hidden_width = 384", "stage_group_tokens = 64, 8", "stage_insert_after = 6, 9",
            "k_nouns = 3", "threshold_voc = 0.9", "threshold_context = 0.5", "weight_decay = 0.05",
            "epochs = 30", "warmup_epochs = 5",
        )
    )
    same = cfg == config.full_preset() and config.dumps(cfg) == text
    ok = not mismatched and verbatim and same
    verdict(10, "config fidelity", ok, f"mismatches: {sorted(mismatched) or 'none'}, verbatim lines: {verbatim}")
    assert ok, mismatched
