import numpy as np
import pytest

from ctc import ctc_loss_grad
from models.codec import Codec
from models.network import (
    ArchSpec,
    adam_step,
    backward,
    ema_update,
    forward,
    init_params,
    output_frames,
)
from utils.exceptions import CodecMismatchError, ConfigError, ShapeMismatchError

CODEC = Codec.from_chars("ab")


def gradcheck_ckpt(seed=0):
    arch = ArchSpec.preset("gradcheck", CODEC.size)
    return init_params(arch, seed, CODEC, dtype=np.float64)


def test_presets():
    desk = ArchSpec.preset("desk", 10)
    assert (desk.input_height, desk.conv_filters, desk.lstm_hidden) == (32, (8, 16), 64)
    assert ArchSpec.preset("default", 10).conv_filters == (40, 60)
    with pytest.raises(ConfigError):
        ArchSpec.preset("huge", 10)
    with pytest.raises(ConfigError):
        ArchSpec(input_height=30)


def test_init_is_deterministic_per_seed_and_voter():
    arch = ArchSpec.preset("gradcheck", CODEC.size)
    a, b = init_params(arch, 1, CODEC), init_params(arch, 1, CODEC)
    assert a.same_weights(b)
    assert not a.same_weights(init_params(arch, 2, CODEC))
    assert not a.same_weights(init_params(arch, 1, CODEC, voter=1))
    assert np.all(a.tensors["lstm_fw.b"][4:8] == 1.0)
    assert np.all(a.tensors["conv1.b"] == 0.0)


def test_init_requires_matching_codec():
    with pytest.raises(CodecMismatchError):
        init_params(ArchSpec.preset("gradcheck", 7), 0, CODEC)


def test_zero_weights_give_uniform_rows():
    ckpt = gradcheck_ckpt()
    for tensors in (ckpt.tensors, ckpt.ema_tensors):
        for value in tensors.values():
            value[...] = 0.0
    probs, _, _ = forward(ckpt, np.random.default_rng(0).random((1, 8, 100)))
    assert probs[0].shape == (25, CODEC.size)
    assert np.allclose(probs[0], 1.0 / CODEC.size)


def test_frame_count():
    assert output_frames(100) == 25
    assert output_frames(7) == 1


def test_wrong_height_rejected():
    with pytest.raises(ShapeMismatchError):
        forward(gradcheck_ckpt(), np.ones((1, 9, 20)))


def test_padding_does_not_change_true_frames():
    ckpt = init_params(ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=4, num_classes=CODEC.size), 3, CODEC)
    rng = np.random.default_rng(1)
    line = rng.random((8, 20))
    alone, _, _ = forward(ckpt, line[None])
    padded = np.ones((2, 8, 44))
    padded[0, :, :20] = line
    padded[1] = rng.random((8, 44))
    together, _, _ = forward(ckpt, padded, widths=[20, 44])
    assert together[0].shape == alone[0].shape
    assert np.allclose(together[0], alone[0], rtol=1e-5, atol=1e-6)


def test_rows_are_distributions():
    probs, _, _ = forward(gradcheck_ckpt(), np.random.default_rng(2).random((2, 8, 32)))
    for p in probs:
        assert np.allclose(p.sum(axis=1), 1.0)
        assert np.all(p >= 0)


def total_loss(ckpt, batch, widths, labels):
    probs, logits, cache = forward(ckpt, batch, widths, training=True)
    loss = 0.0
    grad = np.zeros_like(logits)
    for i, label in enumerate(labels):
        value, g = ctc_loss_grad(probs[i], label)
        loss += value
        grad[i, : g.shape[0]] = g
    return loss, grad, cache


def test_backward_matches_central_differences():
    ckpt = gradcheck_ckpt(seed=5)
    rng = np.random.default_rng(7)
    batch = np.ones((2, 8, 24))
    batch[0] = rng.random((8, 24))
    batch[1, :, :20] = rng.random((8, 20))
    widths = [24, 20]
    labels = [[1, 2], [2, 1]]

    _, grad_logits, cache = total_loss(ckpt, batch, widths, labels)
    analytic = backward(cache, grad_logits)

    eps = 1e-6
    for name, tensor in sorted(ckpt.tensors.items()):
        flat = tensor.reshape(-1)
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        numeric = np.empty(len(picks))
        for j, index in enumerate(picks):
            saved = flat[index]
            flat[index] = saved + eps
            plus, _, _ = total_loss(ckpt, batch, widths, labels)
            flat[index] = saved - eps
            minus, _, _ = total_loss(ckpt, batch, widths, labels)
            flat[index] = saved
            numeric[j] = (plus - minus) / (2 * eps)
        got = analytic[name].reshape(-1)[picks]
        # relative 1e-4 with an absolute floor for the finite-difference noise
        assert np.all(np.abs(got - numeric) <= 1e-4 * (np.abs(got) + np.abs(numeric)) + 1e-8), (name, got, numeric)


def test_zero_upstream_gradient():
    ckpt = gradcheck_ckpt()
    _, logits, cache = forward(ckpt, np.random.default_rng(3).random((2, 8, 16)), training=True)
    grads = backward(cache, np.zeros_like(logits))
    assert set(grads) == set(ckpt.tensors)
    assert all(np.all(g == 0) for g in grads.values())


def test_dropout_stream_is_reproducible():
    ckpt = init_params(ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=4, dropout=0.5, num_classes=CODEC.size), 0, CODEC)
    batch = np.random.default_rng(4).random((1, 8, 32))
    a, _, _ = forward(ckpt, batch, training=True, dropout_stream=(0, 0, "s", 1))
    b, _, _ = forward(ckpt, batch, training=True, dropout_stream=(0, 0, "s", 1))
    c, _, _ = forward(ckpt, batch, training=True, dropout_stream=(0, 0, "s", 2))
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


class TestUpdates:
    def grads_like(self, ckpt, value):
        return {k: np.full_like(v, value) for k, v in ckpt.tensors.items()}

    def test_zero_lr_keeps_parameters(self):
        ckpt = gradcheck_ckpt()
        before = {k: v.copy() for k, v in ckpt.tensors.items()}
        adam_step(ckpt, self.grads_like(ckpt, 0.3), lr=0.0, weight_decay=1e-5)
        assert all(np.array_equal(before[k], ckpt.tensors[k]) for k in before)

    def test_decay_only(self):
        ckpt = gradcheck_ckpt()
        before = {k: v.copy() for k, v in ckpt.tensors.items()}
        adam_step(ckpt, self.grads_like(ckpt, 0.0), lr=1.0, weight_decay=1e-5)
        for k in before:
            assert np.allclose(ckpt.tensors[k], before[k] * (1 - 1e-5), rtol=1e-12, atol=0)

    def test_first_step_moves_by_lr(self):
        ckpt = gradcheck_ckpt()
        before = ckpt.tensors["out.b"].copy()
        adam_step(ckpt, self.grads_like(ckpt, 2.0), lr=0.01, eps=0.0)
        assert np.allclose(ckpt.tensors["out.b"], before - 0.01)
        assert ckpt.opt_state["step"] == 1

    def test_shape_mismatch(self):
        ckpt = gradcheck_ckpt()
        grads = self.grads_like(ckpt, 0.0)
        grads["out.b"] = np.zeros(99)
        with pytest.raises(ShapeMismatchError):
            adam_step(ckpt, grads, lr=0.1)
        del grads["out.b"]
        with pytest.raises(ShapeMismatchError):
            adam_step(ckpt, grads, lr=0.1)

    def test_ema_fixed_point(self):
        ckpt = gradcheck_ckpt()
        before = {k: v.copy() for k, v in ckpt.ema_tensors.items()}
        ema_update(ckpt, 0.99)
        assert all(np.array_equal(before[k], ckpt.ema_tensors[k]) for k in before)

    def test_ema_formula(self):
        ckpt = gradcheck_ckpt()
        for k in ckpt.tensors:
            ckpt.tensors[k][...] = 1.0
            ckpt.ema_tensors[k][...] = 0.0
        ema_update(ckpt, 0.99)
        assert all(np.allclose(v, 0.01) for v in ckpt.ema_tensors.values())
