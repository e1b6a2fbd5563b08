import math

import numpy as np
import pytest

from ktcf.errors import FormatError, InputError
from ktcf.kt_core import (KtModel, LearningHistory, TrainConfig, _init_model,
                          encode_interaction, forward, grad_responses, load_model,
                          predict_target, roc_auc, save_model, train)


def zero_model(k=3, h=2):
    return KtModel(k=k, h=h,
                   w_x=np.zeros((2 * k, 4 * h)), w_h=np.zeros((h, 4 * h)),
                   b=np.zeros(4 * h), w_y=np.zeros((h, k)), b_y=np.zeros(k))


def random_model(rng, k, h, scale=1.0):
    m = _init_model(k, h, rng)
    m.w_x = rng.uniform(-scale, scale, m.w_x.shape)
    m.w_h = rng.uniform(-scale, scale, m.w_h.shape)
    m.b = rng.uniform(-scale, scale, m.b.shape)
    m.w_y = rng.uniform(-scale, scale, m.w_y.shape)
    m.b_y = rng.uniform(-scale, scale, m.b_y.shape)
    return m


def neg_log_loss(p):
    return -np.log(p), -1.0 / p


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_encode_correct_binary():
    x = encode_interaction(1, 1.0, 3)
    want = np.zeros(6)
    want[4] = 1.0
    np.testing.assert_array_equal(x, want)


def test_encode_incorrect_binary():
    x = encode_interaction(1, 0.0, 3)
    want = np.zeros(6)
    want[1] = 1.0
    np.testing.assert_array_equal(x, want)


def test_encode_fractional():
    np.testing.assert_array_equal(encode_interaction(0, 0.25, 2),
                                  [0.75, 0.0, 0.25, 0.0])


def test_encode_kc_out_of_range():
    with pytest.raises(InputError):
        encode_interaction(3, 0.5, 3)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_zero_weights_predict_half():
    m = zero_model()
    kcs = np.array([0, 1, 2, 1])
    preds = forward(m, kcs, np.array([1.0, 0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(preds, [0.5, 0.5, 0.5])


def test_forward_rejects_short_sequences():
    m = zero_model()
    with pytest.raises(InputError):
        forward(m, np.array([0]), np.array([1.0]))


def test_forward_rejects_out_of_range_responses():
    m = zero_model()
    with pytest.raises(InputError):
        forward(m, np.array([0, 1]), np.array([0.5, 1.2]))


def test_forward_matches_scalar_reference():
    # step-by-step reference computation of the gate equations in plain
    # python floats, no shared code with the implementation
    rng = np.random.default_rng(2)
    k, h = 2, 2
    m = random_model(rng, k, h, scale=0.7)
    kcs = [0, 1, 1, 0]
    r = [1.0, 0.0, 0.5, 0.0]

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    hs = [0.0] * h
    cs = [0.0] * h
    expected = []
    for t in range(len(kcs) - 1):
        x = [0.0] * (2 * k)
        x[kcs[t]] = 1.0 - r[t]
        x[kcs[t] + k] = r[t]
        a = [0.0] * (4 * h)
        for j in range(4 * h):
            a[j] = m.b[j] + sum(x[i] * m.w_x[i, j] for i in range(2 * k)) \
                + sum(hs[i] * m.w_h[i, j] for i in range(h))
        new_h, new_c = [0.0] * h, [0.0] * h
        for j in range(h):
            ig, fg = sig(a[j]), sig(a[h + j])
            gg, og = math.tanh(a[2 * h + j]), sig(a[3 * h + j])
            new_c[j] = fg * cs[j] + ig * gg
            new_h[j] = og * math.tanh(new_c[j])
        hs, cs = new_h, new_c
        kc_next = kcs[t + 1]
        logit = m.b_y[kc_next] + sum(hs[i] * m.w_y[i, kc_next] for i in range(h))
        expected.append(sig(logit))

    got = forward(m, np.array(kcs), np.array(r))
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_binary_relaxed_equals_hard_onehot():
    # at binary endpoints the relaxed encoding IS the hard one-hot encoding,
    # so predictions must agree bit for bit
    rng = np.random.default_rng(3)
    m = random_model(rng, 4, 3)
    kcs = rng.integers(0, 4, 9)
    resp = rng.integers(0, 2, 9)
    via_relaxed = forward(m, kcs, resp.astype(np.float64))

    for t in range(9):
        hard = encode_interaction(int(kcs[t]), float(resp[t]), 4)
        relaxed = encode_interaction(int(kcs[t]), float(resp[t]) + 0.0, 4)
        np.testing.assert_array_equal(hard, relaxed)

    shifted = forward(m, kcs, resp.astype(np.float64).copy())
    np.testing.assert_array_equal(via_relaxed, shifted)


def test_batched_forward_matches_rowwise():
    # matmul accumulation order differs with batch shape, so agreement is
    # to rounding, not bitwise
    rng = np.random.default_rng(4)
    m = random_model(rng, 5, 4)
    kcs = rng.integers(0, 5, 12)
    r = rng.uniform(0, 1, (6, 12))
    batched = forward(m, kcs, r)
    for row in range(6):
        np.testing.assert_allclose(batched[row], forward(m, kcs, r[row]),
                                   rtol=1e-12, atol=1e-15)


def test_target_prediction_ignores_final_response():
    rng = np.random.default_rng(5)
    m = random_model(rng, 4, 3)
    kcs = rng.integers(0, 4, 10)
    r = rng.uniform(0, 1, 10)
    p = predict_target(m, kcs, r)
    for value in (0.0, 0.33, 1.0):
        r2 = r.copy()
        r2[-1] = value
        assert predict_target(m, kcs, r2) == p


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def central_difference(m, kcs, r, eps=1e-6):
    fd = np.zeros(len(r))
    for t in range(len(r)):
        rp, rm = r.copy(), r.copy()
        rp[t] = min(1.0, rp[t] + eps)
        rm[t] = max(0.0, rm[t] - eps)
        lp = -math.log(predict_target(m, kcs, rp))
        lm = -math.log(predict_target(m, kcs, rm))
        fd[t] = (lp - lm) / (rp[t] - rm[t])
    return fd


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for trial in range(20):
        k = int(rng.integers(2, 8))
        h = int(rng.integers(2, 6))
        t_len = int(rng.integers(3, 15))
        m = random_model(rng, k, h)
        kcs = rng.integers(0, k, t_len)
        r = rng.uniform(0.05, 0.95, t_len)
        grad = grad_responses(m, kcs, r, neg_log_loss)
        fd = central_difference(m, kcs, r)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)


def test_gradient_zero_when_output_weights_zero():
    rng = np.random.default_rng(7)
    m = random_model(rng, 3, 2)
    m.w_y = np.zeros_like(m.w_y)
    m.b_y = np.zeros_like(m.b_y)
    kcs = rng.integers(0, 3, 8)
    grad = grad_responses(m, kcs, rng.uniform(0, 1, 8), neg_log_loss)
    np.testing.assert_array_equal(grad, np.zeros(8))


def test_gradient_final_component_exactly_zero():
    rng = np.random.default_rng(8)
    m = random_model(rng, 3, 3)
    kcs = rng.integers(0, 3, 9)
    grad = grad_responses(m, kcs, rng.uniform(0, 1, 9), neg_log_loss)
    assert grad[-1] == 0.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_training_on_constant_labels_converges_high():
    rng = np.random.default_rng(9)
    hists = [LearningHistory(rng.integers(0, 3, 10), np.ones(10, dtype=int))
             for _ in range(40)]
    model, _ = train(hists, 3, TrainConfig(
        hidden_size=8, learning_rate=0.05, batch_size=16, max_epochs=60,
        patience=60, seed=0))
    for hist in hists[:5]:
        preds = forward(model, hist.kcs, hist.responses.astype(np.float64))
        assert (preds > 0.9).all()


def test_training_determinism():
    rng = np.random.default_rng(10)
    hists = [LearningHistory(rng.integers(0, 4, 8), rng.integers(0, 2, 8))
             for _ in range(30)]
    m1, _ = train(hists, 4, TrainConfig(hidden_size=6, max_epochs=4, seed=3))
    m2, _ = train(hists, 4, TrainConfig(hidden_size=6, max_epochs=4, seed=3))
    for a, b in zip(m1.weights(), m2.weights()):
        np.testing.assert_array_equal(a, b)


def test_training_rejects_empty_dataset():
    with pytest.raises(InputError):
        train([], 3, TrainConfig())


def test_training_rejects_inconsistent_k():
    hist = LearningHistory(np.array([0, 5]), np.array([0, 1]))
    with pytest.raises(InputError):
        train([hist], 3, TrainConfig())


def test_learning_history_validation():
    with pytest.raises(InputError):
        LearningHistory(np.array([0, 1]), np.array([0]))
    with pytest.raises(InputError):
        LearningHistory(np.array([0]), np.array([1]))
    with pytest.raises(InputError):
        LearningHistory(np.array([0, 1]), np.array([0, 2]))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    m = random_model(rng, 5, 4)
    path = tmp_path / "model.npz"
    save_model(m, path)
    m2 = load_model(path)
    assert (m2.k, m2.h) == (5, 4)
    for a, b in zip(m.weights(), m2.weights()):
        np.testing.assert_array_equal(a, b)
    kcs = rng.integers(0, 5, 7)
    r = rng.uniform(0, 1, 7)
    np.testing.assert_array_equal(forward(m, kcs, r), forward(m2, kcs, r))


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "model.npz"
    path.write_bytes(b"definitely not a numpy archive")
    with pytest.raises(FormatError):
        load_model(path)


def test_load_rejects_dimension_mismatch(tmp_path):
    rng = np.random.default_rng(12)
    m = random_model(rng, 5, 4)
    path = tmp_path / "model.npz"
    payload = {name: getattr(m, name) for name in ("w_x", "w_h", "b", "w_y", "b_y")}
    payload["w_y"] = payload["w_y"][:, :4]  # K=4 block under a K=5 header
    np.savez(path, format_version=np.array(1), k=np.array(5), h=np.array(4), **payload)
    with pytest.raises(FormatError):
        load_model(path)


def test_load_rejects_version_mismatch(tmp_path):
    rng = np.random.default_rng(13)
    m = random_model(rng, 3, 2)
    path = tmp_path / "model.npz"
    payload = {name: getattr(m, name) for name in ("w_x", "w_h", "b", "w_y", "b_y")}
    np.savez(path, format_version=np.array(99), k=np.array(3), h=np.array(2), **payload)
    with pytest.raises(FormatError):
        load_model(path)


# ---------------------------------------------------------------------------
# metrics helpers
# ---------------------------------------------------------------------------

def test_roc_auc_against_sklearn():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(14)
    for trial in range(10):
        labels = rng.integers(0, 2, 200)
        if labels.sum() in (0, 200):
            labels[0] = 1 - labels[0]
        scores = rng.uniform(0, 1, 200) + 0.3 * labels
        scores = np.round(scores, 2)  # force ties
        assert roc_auc(labels, scores) == pytest.approx(
            sklearn_metrics.roc_auc_score(labels, scores), abs=1e-12)
