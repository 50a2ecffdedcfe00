import numpy as np
import pytest

from groupvit import autograd as ag
from groupvit import config, grouping, tensorfile
from groupvit.autograd import Tensor
from groupvit.config import ConfigError, GroupingStageConfig, ModelConfig
from groupvit.encoders import GroupViT, ImageEncoder, TextEncoder, patchify, resize_positions
from groupvit.gradcheck import check_gradients
from groupvit.nn import MixerConnector, TransformerLayer
from groupvit.text import EOS_ID, PAD_ID, UNK_ID, Vocabulary, decode, tokenize, tokenize_batch


def narrow_full_config(**kw):
    """Full-scale token layout (224px, 16px patches, 12 layers, 64 then 8 groups) at a tiny width."""
    base = dict(hidden_width=24, num_heads=6, projection_width=8, projection_hidden=16,
                text_layers=1, text_width=8, text_heads=2, vocab_size=16, max_text_length=6)
    base.update(kw)
    return ModelConfig(**base).validate()


def tiny_config(**kw):
    base = dict(
        image_size=8, patch_size=2, hidden_width=8, num_layers=3, num_heads=2, mlp_ratio=2.0,
        stages=(GroupingStageConfig(4, 1), GroupingStageConfig(2, 2, mixer_connector=True)),
        projection_width=6, projection_hidden=10, text_layers=1, text_width=8, text_heads=2,
        vocab_size=10, max_text_length=5,
    )
    base.update(kw)
    return ModelConfig(**base).validate()


# ---------------------------------------------------------------- patches


def test_patch_counts():
    assert patchify(np.zeros((1, 224, 224, 3)), 16).shape == (1, 196, 768)
    assert patchify(np.zeros((2, 32, 32, 3)), 16).shape == (2, 4, 768)


def test_patch_order_is_row_major():
    img = np.arange(4 * 4).reshape(1, 4, 4, 1).astype(float)
    p = patchify(img, 2)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 2], [8, 9, 12, 13])


def test_patch_size_must_divide():
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 10, 10, 3)), 4)


def test_zero_image_embeds_to_position_plus_bias():
    enc = ImageEncoder(tiny_config(), np.random.default_rng(0))
    emb = enc.embed_patches(np.zeros((1, 8, 8, 3)))
    np.testing.assert_allclose(emb.data[0], enc.pos_embed.data + enc.patch_proj.bias.data, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- positions


def test_resize_same_grid_is_identity():
    pos = Tensor(np.random.default_rng(0).standard_normal((16, 3)))
    assert resize_positions(pos, (4, 4), (4, 4)) is pos


def test_resize_keeps_constants_and_linear_ramps():
    ones = Tensor(np.ones((9, 2)))
    np.testing.assert_allclose(resize_positions(ones, (3, 3), (6, 6)).data, 1.0, atol=1e-14)
    rows = np.repeat(np.arange(4.0), 4)[:, None]  # value = row index on a 4x4 grid
    up = resize_positions(Tensor(rows), (4, 4), (8, 8)).data.reshape(8, 8)
    # interior rows interpolate the ramp linearly; half-pixel centers
    np.testing.assert_allclose(up[2:6, 0], [0.75, 1.25, 1.75, 2.25], atol=1e-14)
    np.testing.assert_allclose(up[0], 0.0, atol=1e-14)


def test_resize_is_differentiable():
    pos = Tensor(np.random.default_rng(1).standard_normal((4, 3)), requires_grad=True)
    w = np.random.default_rng(2).standard_normal((9, 3))
    assert check_gradients(lambda: (resize_positions(pos, (2, 2), (3, 3)) * w).sum(), [pos]) < 1e-6


def test_encoder_accepts_other_resolutions():
    enc = ImageEncoder(tiny_config(), np.random.default_rng(0))
    segs, state = enc.forward_segments(np.random.default_rng(1).random((1, 12, 12, 3)))
    assert state.assignments[0].shape == (1, 4, 36)
    assert segs.shape == (1, 2, 8)


# ---------------------------------------------------------------- layers


def test_transformer_layer_gradients():
    rng = np.random.default_rng(3)
    layer = TransformerLayer(rng, 8, 2, 2.0)
    x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
    w = rng.standard_normal((2, 5, 8))
    params = [x] + layer.parameters()
    assert check_gradients(lambda: (layer(x) * w).sum(), params, rng=rng) < 1e-4


def test_attention_key_mask_hides_keys():
    rng = np.random.default_rng(4)
    layer = TransformerLayer(rng, 8, 2)
    x = rng.standard_normal((1, 4, 8))
    bias = np.array([[0.0, 0.0, -1e9, -1e9]])
    a = layer(Tensor(x), bias).data
    x2 = x.copy()
    x2[0, 2:] = rng.standard_normal((2, 8))  # change only the masked positions
    b = layer(Tensor(x2), bias).data
    np.testing.assert_allclose(a[0, :2], b[0, :2], rtol=1e-12, atol=1e-14)


def test_mixer_shapes_and_identity_residual():
    rng = np.random.default_rng(5)
    m = MixerConnector(rng, 64, 8, 16)
    assert m(Tensor(rng.standard_normal((2, 64, 16)))).shape == (2, 8, 16)
    same = MixerConnector(rng, 6, 6, 16)
    for p in same.token_mlp.parameters() + same.channel_mlp.parameters():
        p.data = np.zeros_like(p.data)
    x = rng.standard_normal((6, 16))
    np.testing.assert_array_equal(same(Tensor(x)).data, x)
    with pytest.raises(ag.DimensionError):
        m(Tensor(np.zeros((1, 7, 16))))


def test_mixer_gradients():
    rng = np.random.default_rng(6)
    m = MixerConnector(rng, 5, 3, 4)
    x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    assert check_gradients(lambda: (m(x) * w).sum(), [x] + m.parameters(), rng=rng) < 1e-4


# ---------------------------------------------------------------- image encoder


def test_full_layout_assignment_shapes():
    enc = ImageEncoder(narrow_full_config(), np.random.default_rng(0))
    img = np.random.default_rng(1).random((1, 224, 224, 3))
    _, state = enc.forward_segments(img)
    assert [a.shape for a in state.assignments] == [(1, 64, 196), (1, 8, 64)]
    for a in state.assignments:
        assert np.all(a.numpy().sum(axis=-2) == 1.0)


def test_one_stage_layout():
    stages = config.full_one_stage_preset().model.stages
    enc = ImageEncoder(narrow_full_config(stages=stages), np.random.default_rng(0))
    segs, state = enc.forward_segments(np.random.default_rng(1).random((1, 224, 224, 3)))
    assert [a.shape for a in state.assignments] == [(1, 8, 196)]
    assert segs.shape == (1, 8, 24)


def test_stage_two_tokens_come_from_the_mixer():
    enc = ImageEncoder(tiny_config(), np.random.default_rng(0))
    assert enc.group_tokens[1] is None and enc.connectors[1] is not None
    fresh = ImageEncoder(tiny_config(stages=(GroupingStageConfig(4, 1), GroupingStageConfig(2, 2))), np.random.default_rng(0))
    assert fresh.group_tokens[1].shape == (2, 8) and fresh.connectors[1] is None


def test_outputs_are_unit_vectors_and_segments_agree():
    model = GroupViT(tiny_config(), seed=0)
    imgs = np.random.default_rng(2).random((3, 8, 8, 3))
    z, state = model.image(imgs)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=-1), 1.0, atol=1e-12)
    seg, state2 = model.image.encode_segments(imgs)
    assert seg.shape == (3, 2, 6)
    np.testing.assert_allclose(np.linalg.norm(seg.data, axis=-1), 1.0, atol=1e-12)
    for a, b in zip(state.assignments, state2.assignments):
        np.testing.assert_array_equal(a.numpy(), b.numpy())


def test_batch_members_are_independent():
    model = GroupViT(tiny_config(), seed=0)
    imgs = np.random.default_rng(3).random((3, 8, 8, 3))
    batched = model.image(imgs)[0].data
    for i in range(3):
        np.testing.assert_allclose(batched[i], model.image(imgs[i : i + 1])[0].data[0], rtol=1e-12, atol=1e-14)


def test_noise_changes_training_assignment_only_when_drawn():
    model = GroupViT(tiny_config(), seed=0)
    imgs = np.random.default_rng(4).random((2, 8, 8, 3))
    a = model.image(imgs)[1].assignments[0].numpy()
    b = model.image(imgs)[1].assignments[0].numpy()
    np.testing.assert_array_equal(a, b)
    c = model.image(imgs, noise_rng=np.random.default_rng(0))[1].assignments[0].numpy()
    d = model.image(imgs, noise_rng=np.random.default_rng(0))[1].assignments[0].numpy()
    np.testing.assert_array_equal(c, d)


def _encoder_loss(model, imgs, w, mode, frozen=None):
    z, _ = model.image(imgs, mode=mode, frozen_onehots=frozen)
    return (z * w).sum()


def test_mini_encoder_soft_gradients():
    model = GroupViT(tiny_config(), seed=1)
    rng = np.random.default_rng(7)
    imgs = rng.random((2, 8, 8, 3))
    w = rng.standard_normal((2, 6))
    params = model.image.parameters()
    assert check_gradients(lambda: _encoder_loss(model, imgs, w, "soft"), params, n_points=10, rng=rng) < 1e-3


def test_mini_encoder_hard_gradients_with_frozen_argmax(monkeypatch):
    # Around a fixed argmax, one-hot + A(x) - A(x0) is smooth and its derivative
    # is what the straight-through estimator reports.
    model = GroupViT(tiny_config(), seed=2)
    rng = np.random.default_rng(8)
    imgs = rng.random((2, 8, 8, 3))
    w = rng.standard_normal((2, 6))
    _, state = model.image(imgs, mode="hard")
    frozen = [a.numpy().copy() for a in state.assignments]
    soft0 = []

    def record(a, onehot=None):
        soft0.append(a.values.data.copy())
        return grouping.AssignmentMatrix(ag.straight_through_onehot(a.values, onehot=onehot), grouping.HARD)

    monkeypatch.setattr(grouping, "assign_hard", record)
    model.image(imgs, mode="hard", frozen_onehots=frozen)
    calls = iter(range(10**9))

    def surrogate(a, onehot=None):
        i = next(calls) % len(frozen)
        return grouping.AssignmentMatrix(Tensor(onehot) + a.values - Tensor(soft0[i]), grouping.HARD)

    monkeypatch.setattr(grouping, "assign_hard", surrogate)
    params = model.image.parameters()
    assert check_gradients(lambda: _encoder_loss(model, imgs, w, "hard", frozen), params, rng=rng) < 1e-3

    # and backward through the real estimator gives the same gradients
    monkeypatch.undo()
    model.zero_grad()
    _encoder_loss(model, imgs, w, "hard", frozen).backward()
    st = [p.grad.copy() for p in params]
    model.zero_grad()
    monkeypatch.setattr(grouping, "assign_hard", surrogate)
    _encoder_loss(model, imgs, w, "hard", frozen).backward()
    for g1, p in zip(st, params):
        np.testing.assert_allclose(g1, p.grad, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- text


VOCAB = Vocabulary.from_words(["a", "photo", "of", "red", "circle"])


def test_tokenize_basic():
    t = tokenize("A photo of a red circle!", VOCAB, 8)
    assert list(t.token_ids) == [3, 4, 5, 3, 6, 7, EOS_ID, PAD_ID]
    assert t.end_position == 6
    assert decode(t, VOCAB) == "a photo of a red circle"


def test_tokenize_unknown_and_truncation():
    t = tokenize("a zebra", VOCAB, 4)
    assert list(t.token_ids) == [3, UNK_ID, EOS_ID, PAD_ID]
    long = tokenize("a a a a a a", VOCAB, 4)
    assert list(long.token_ids) == [3, 3, 3, EOS_ID] and long.end_position == 3
    empty = tokenize("", VOCAB, 3)
    assert list(empty.token_ids) == [EOS_ID, PAD_ID, PAD_ID]


def test_vocabulary_round_trip(tmp_path):
    VOCAB.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == VOCAB.tokens
    with pytest.raises(ValueError):
        Vocabulary(["a", "b", "c"])


def test_text_encoder_unit_norm_and_batch_independence():
    cfg = tiny_config()
    enc = TextEncoder(cfg, np.random.default_rng(0))
    ids, ends = tokenize_batch(["a red circle", "photo", "a photo of a"], VOCAB, cfg.max_text_length)
    z = enc(ids, ends).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=-1), 1.0, atol=1e-12)
    for i in range(3):
        np.testing.assert_allclose(z[i], enc(ids[i : i + 1], ends[i : i + 1]).data[0], rtol=1e-12, atol=1e-14)
    with pytest.raises(ag.DimensionError):
        enc(ids[:, :3], ends)


def test_text_encoder_gradients():
    cfg = tiny_config()
    enc = TextEncoder(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(9)
    ids, ends = tokenize_batch(["a red circle", "photo of"], VOCAB, cfg.max_text_length)
    w = rng.standard_normal((2, cfg.projection_width))
    assert check_gradients(lambda: (enc(ids, ends) * w).sum(), enc.parameters(), rng=rng) < 1e-4


# ---------------------------------------------------------------- persistence


def test_state_dict_round_trip(tmp_path):
    a, b = GroupViT(tiny_config(), seed=0), GroupViT(tiny_config(), seed=1)
    tensorfile.save(tmp_path / "m.bin", a.state_dict())
    b.load_state_dict(tensorfile.load(tmp_path / "m.bin"))
    imgs = np.random.default_rng(5).random((2, 8, 8, 3))
    np.testing.assert_array_equal(a.image(imgs)[0].data, b.image(imgs)[0].data)
    assert tensorfile.dumps(a.state_dict()) == tensorfile.dumps(b.state_dict())


def test_state_dict_mismatch_is_rejected():
    a = GroupViT(tiny_config(), seed=0)
    state = a.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises((KeyError, ValueError)):
        GroupViT(tiny_config(), seed=0).load_state_dict(state)


def test_tau_parameterization():
    m = GroupViT(tiny_config(), tau_init=0.07)
    assert abs(m.tau - 0.07) < 1e-15
    assert abs(float(m.tau_tensor().data) - 0.07) < 1e-15
