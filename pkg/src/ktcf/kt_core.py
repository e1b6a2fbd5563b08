"""Recurrent knowledge-tracing model with gradients w.r.t. relaxed responses.

The model is a single-layer LSTM over one-hot (KC, response) interaction
encodings, with a per-KC sigmoid output head. Everything is float64 numpy;
the backward passes are written by hand so the package needs no autodiff
framework. A fractional response ``r`` enters as the convex combination

    x_t = (1 - r_t) * onehot(kc_t) + r_t * onehot(kc_t + K)

which is linear in ``r_t`` and reduces to the standard hard encoding at the
binary endpoints, so counterfactual search can differentiate straight
through the input.

Prediction convention: the hidden state after consuming interactions
``0..t-1`` predicts the correctness of step ``t``.  ``forward`` therefore
returns ``T - 1`` probabilities, and the model's scalar prediction for a
sequence is the last one (the final KC is the explanation target).
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _fast
from .errors import FormatError, InputError
from .optim import Adam

MODEL_FORMAT_VERSION = 1

WEIGHT_KEYS = ("w_x", "w_h", "b", "w_y", "b_y")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LearningHistory:
    """A student's (KC, response) interaction sequence."""

    kcs: np.ndarray        # (T,) int KC indices
    responses: np.ndarray  # (T,) int in {0, 1}
    student_id: int | None = None

    def __post_init__(self):
        kcs = np.asarray(self.kcs, dtype=np.int64)
        responses = np.asarray(self.responses, dtype=np.int64)
        if kcs.ndim != 1 or responses.ndim != 1:
            raise InputError("kcs and responses must be 1-D sequences")
        if len(kcs) != len(responses):
            raise InputError(
                f"kcs ({len(kcs)}) and responses ({len(responses)}) differ in length")
        if len(kcs) < 2:
            raise InputError("a learning history needs at least 2 interactions")
        if kcs.min() < 0:
            raise InputError("KC indices must be non-negative")
        if not np.isin(responses, (0, 1)).all():
            raise InputError("responses must be 0 or 1")
        object.__setattr__(self, "kcs", kcs)
        object.__setattr__(self, "responses", responses)

    def __len__(self) -> int:
        return len(self.kcs)

    @property
    def target_kc(self) -> int:
        """The explanation target: the last KC of the sequence."""
        return int(self.kcs[-1])


@dataclass
class KtModel:
    """Trained LSTM knowledge tracer over K concepts with hidden width H.

    Weight blocks (gate column order: input, forget, candidate, output):
      w_x (2K, 4H), w_h (H, 4H), b (4H,), w_y (H, K), b_y (K,)
    """

    k: int
    h: int
    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray
    w_y: np.ndarray
    b_y: np.ndarray

    def __post_init__(self):
        expected = _weight_shapes(self.k, self.h)
        for name in WEIGHT_KEYS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != expected[name]:
                raise InputError(
                    f"weight {name} has shape {arr.shape}, expected {expected[name]}")
            setattr(self, name, arr)

    def weights(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in WEIGHT_KEYS]

    def check_kcs(self, kcs: np.ndarray):
        if len(kcs) and (kcs.min() < 0 or kcs.max() >= self.k):
            raise InputError(f"KC index outside [0,{self.k})")


def _weight_shapes(k: int, h: int) -> dict[str, tuple[int, ...]]:
    return {
        "w_x": (2 * k, 4 * h),
        "w_h": (h, 4 * h),
        "b": (4 * h,),
        "w_y": (h, k),
        "b_y": (k,),
    }


# ---------------------------------------------------------------------------
# Encoding and forward pass
# ---------------------------------------------------------------------------

def encode_interaction(kc: int, r: float, k: int) -> np.ndarray:
    """One-hot interaction encoding, relaxed to fractional responses.

    Returns ``r * onehot(kc + k) + (1 - r) * onehot(kc)`` as a length-2k
    vector: slot ``kc`` carries the incorrect mass, slot ``kc + k`` the
    correct mass. Linear in ``r`` so gradients flow through it.
    """
    if not (0 <= kc < k):
        raise InputError(f"KC index {kc} outside [0,{k})")
    x = np.zeros(2 * k)
    x[kc] = 1.0 - r
    x[kc + k] = r
    return x


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _validate_relaxed(model: KtModel, kcs, r) -> tuple[np.ndarray, np.ndarray, bool]:
    kcs = np.asarray(kcs, dtype=np.int64)
    r = np.asarray(r, dtype=np.float64)
    if kcs.ndim != 1:
        raise InputError("kcs must be a 1-D sequence")
    was_1d = r.ndim == 1
    if was_1d:
        r = r[None, :]
    if r.ndim != 2 or r.shape[1] != len(kcs):
        raise InputError(f"responses of length {r.shape[-1]} do not match {len(kcs)} KCs")
    if len(kcs) < 2:
        raise InputError("need at least 2 interactions to predict anything")
    model.check_kcs(kcs)
    if r.min() < 0.0 or r.max() > 1.0:
        raise InputError("relaxed responses must lie in [0,1]")
    return kcs, r, was_1d


def _forward_relaxed(model: KtModel, kcs: np.ndarray, r: np.ndarray,
                     need_cache: bool = False):
    """LSTM forward over one KC sequence and a batch of relaxed responses.

    kcs: (T,) shared across the batch; r: (B, T). Returns preds (B, T-1)
    where preds[:, j] is the probability that step j+1 is answered
    correctly. Only interactions 0..T-2 are consumed: the final response
    can never influence a prediction.
    """
    kcs = np.asarray(kcs, dtype=np.int64)
    t_len = len(kcs)
    n_batch = r.shape[0]
    h_dim = model.h
    steps = t_len - 1

    # x_t @ w_x collapses to a lerp between two precomputed rows.
    base = model.w_x[kcs[:steps]]                       # (steps, 4H)
    delta = model.w_x[kcs[:steps] + model.k] - base     # (steps, 4H)
    wy_next = np.ascontiguousarray(model.w_y[:, kcs[1:]].T)  # (steps, H)
    by_next = model.b_y[kcs[1:]]

    if _fast.HAVE_NUMBA:
        gates, c_all, c_prev, h_all, preds = _fast.lstm_forward(
            base, delta, model.w_h, model.b, wy_next, by_next,
            np.ascontiguousarray(r))
        cache = None
        if need_cache:
            cache = {"gates": gates, "c": c_all, "c_prev": c_prev, "h": h_all,
                     "delta": delta, "wy_next": wy_next, "kcs": kcs}
        return preds, cache

    h = np.zeros((n_batch, h_dim))
    c = np.zeros((n_batch, h_dim))
    preds = np.empty((n_batch, steps))
    cache = None
    if need_cache:
        cache = {
            "gates": np.empty((steps, n_batch, 4 * h_dim)),
            "c": np.empty((steps, n_batch, h_dim)),
            "c_prev": np.empty((steps, n_batch, h_dim)),
            "h": np.empty((steps, n_batch, h_dim)),
            "delta": delta,
            "wy_next": wy_next,
            "kcs": kcs,
        }

    for s in range(steps):
        a = base[s] + r[:, s : s + 1] * delta[s] + h @ model.w_h + model.b
        i = _sigmoid(a[:, :h_dim])
        f = _sigmoid(a[:, h_dim : 2 * h_dim])
        g = np.tanh(a[:, 2 * h_dim : 3 * h_dim])
        o = _sigmoid(a[:, 3 * h_dim :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        if need_cache:
            cache["gates"][s, :, :h_dim] = i
            cache["gates"][s, :, h_dim : 2 * h_dim] = f
            cache["gates"][s, :, 2 * h_dim : 3 * h_dim] = g
            cache["gates"][s, :, 3 * h_dim :] = o
            cache["c_prev"][s] = c
            cache["c"][s] = c_new
            cache["h"][s] = h_new
        c, h = c_new, h_new
        preds[:, s] = _sigmoid(h @ wy_next[s] + by_next[s])

    return preds, cache


def _backward_responses(model: KtModel, cache: dict,
                        dlogit: np.ndarray) -> np.ndarray:
    """Reverse-mode pass of _forward_relaxed w.r.t. the relaxed responses.

    dlogit: (B, steps) gradient of the loss w.r.t. each prediction's
    pre-sigmoid logit. Returns dr (B, T); dr[:, -1] is exactly 0.
    """
    if _fast.HAVE_NUMBA:
        return _fast.lstm_backward_r(
            cache["gates"], cache["c"], cache["c_prev"], cache["delta"],
            np.ascontiguousarray(model.w_h.T), cache["wy_next"],
            np.ascontiguousarray(dlogit))

    h_dim = model.h
    gates, c_all, c_prev = cache["gates"], cache["c"], cache["c_prev"]
    delta, wy_next = cache["delta"], cache["wy_next"]
    steps = gates.shape[0]
    n_batch = dlogit.shape[0]

    dr = np.zeros((n_batch, steps + 1))
    dh = np.zeros((n_batch, h_dim))
    dc = np.zeros((n_batch, h_dim))
    for s in range(steps - 1, -1, -1):
        dh = dh + dlogit[:, s : s + 1] * wy_next[s]
        i = gates[s, :, :h_dim]
        f = gates[s, :, h_dim : 2 * h_dim]
        g = gates[s, :, 2 * h_dim : 3 * h_dim]
        o = gates[s, :, 3 * h_dim :]
        tanh_c = np.tanh(c_all[s])
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        da = np.empty((n_batch, 4 * h_dim))
        da[:, :h_dim] = dc * g * i * (1.0 - i)
        da[:, h_dim : 2 * h_dim] = dc * c_prev[s] * f * (1.0 - f)
        da[:, 2 * h_dim : 3 * h_dim] = dc * i * (1.0 - g * g)
        da[:, 3 * h_dim :] = do * o * (1.0 - o)
        dr[:, s] = da @ delta[s]
        dh = da @ model.w_h.T
        dc = dc * f
    return dr


def forward(model: KtModel, kcs, r) -> np.ndarray:
    """Per-step correctness predictions for a (possibly relaxed) history.

    Parameters
    ----------
    kcs : (T,) KC indices.
    r : (T,) relaxed responses in [0,1], or a (B, T) batch of them.

    Returns
    -------
    (T-1,) array (or (B, T-1)) where entry j is p_{j+1}, the predicted
    probability that the response at step j+1 is correct given steps 0..j.
    The model's scalar prediction for the sequence target is the last entry.
    """
    kcs, r, was_1d = _validate_relaxed(model, kcs, r)
    preds, _ = _forward_relaxed(model, kcs, r)
    return preds[0] if was_1d else preds


def predict_target(model: KtModel, kcs, r) -> float | np.ndarray:
    """Predicted correctness probability of the final step only."""
    out = forward(model, kcs, r)
    return float(out[-1]) if out.ndim == 1 else out[:, -1]


def grad_responses(model: KtModel, kcs, r,
                   loss: Callable[[float], tuple[float, float]]) -> np.ndarray:
    """Gradient of ``loss(target prediction)`` w.r.t. every relaxed response.

    ``loss`` maps the scalar target prediction p to ``(value, dvalue/dp)``.
    Returns a length-T gradient; the entry for the final step is exactly 0
    because the target prediction consumes only interactions 0..T-2.
    """
    kcs, r, was_1d = _validate_relaxed(model, kcs, r)
    preds, cache = _forward_relaxed(model, kcs, r, need_cache=True)
    dlogit = np.zeros_like(preds)
    p = preds[:, -1]
    _, dloss_dp = loss(float(p[0]) if was_1d else p)
    dlogit[:, -1] = dloss_dp * p * (1.0 - p)
    dr = _backward_responses(model, cache, dlogit)
    return dr[0] if was_1d else dr


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden_size: int = 64
    learning_rate: float = 3e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 4        # epochs without held-out improvement per decay step
    max_decays: int = 3      # halvings of the step size before stopping
    holdout_fraction: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0


@dataclass
class TrainReport:
    holdout_accuracy: float
    holdout_auc: float
    epochs_run: int
    n_train: int
    n_holdout: int
    train_losses: list[float] = field(default_factory=list)
    holdout_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "holdout_accuracy": self.holdout_accuracy,
            "holdout_auc": self.holdout_auc,
            "epochs_run": self.epochs_run,
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
            "train_losses": self.train_losses,
            "holdout_losses": self.holdout_losses,
        }


def _init_model(k: int, h: int, rng: np.random.Generator) -> KtModel:
    scale = 1.0 / np.sqrt(h)
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0  # forget-gate bias starts open
    return KtModel(
        k=k, h=h,
        w_x=rng.uniform(-scale, scale, (2 * k, 4 * h)),
        w_h=rng.uniform(-scale, scale, (h, 4 * h)),
        b=b,
        w_y=rng.uniform(-scale, scale, (h, k)),
        b_y=np.zeros(k),
    )


def _pad_batch(histories: Sequence[LearningHistory]):
    lengths = np.array([len(s) for s in histories])
    t_max = int(lengths.max())
    kcs = np.zeros((len(histories), t_max), dtype=np.int64)
    resp = np.zeros((len(histories), t_max))
    for row, hist in enumerate(histories):
        kcs[row, : len(hist)] = hist.kcs
        resp[row, : len(hist)] = hist.responses
    return kcs, resp, lengths


def _forward_train(model: KtModel, kcs: np.ndarray, r: np.ndarray):
    """Batched forward with per-sample KC sequences (padded to T_max)."""
    n_batch, t_max = kcs.shape
    h_dim = model.h
    steps = t_max - 1

    h = np.zeros((n_batch, h_dim))
    c = np.zeros((n_batch, h_dim))
    preds = np.empty((n_batch, steps))
    cache = {
        "gates": np.empty((steps, n_batch, 4 * h_dim)),
        "c": np.empty((steps, n_batch, h_dim)),
        "c_prev": np.empty((steps, n_batch, h_dim)),
        "h_prev": np.empty((steps, n_batch, h_dim)),
        "h": np.empty((steps, n_batch, h_dim)),
        "kcs": kcs,
        "r": r,
    }
    for s in range(steps):
        kc_s = kcs[:, s]
        base = model.w_x[kc_s]
        delta = model.w_x[kc_s + model.k] - base
        a = base + r[:, s : s + 1] * delta + h @ model.w_h + model.b
        i = _sigmoid(a[:, :h_dim])
        f = _sigmoid(a[:, h_dim : 2 * h_dim])
        g = np.tanh(a[:, 2 * h_dim : 3 * h_dim])
        o = _sigmoid(a[:, 3 * h_dim :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        cache["gates"][s, :, :h_dim] = i
        cache["gates"][s, :, h_dim : 2 * h_dim] = f
        cache["gates"][s, :, 2 * h_dim : 3 * h_dim] = g
        cache["gates"][s, :, 3 * h_dim :] = o
        cache["c_prev"][s] = c
        cache["h_prev"][s] = h
        cache["c"][s] = c_new
        cache["h"][s] = h_new
        c, h = c_new, h_new
        kc_next = kcs[:, s + 1]
        logits = (h * model.w_y[:, kc_next].T).sum(axis=1) + model.b_y[kc_next]
        preds[:, s] = _sigmoid(logits)
    return preds, cache


def _backward_train(model: KtModel, cache: dict, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    """Weight gradients for the batched forward; dlogit is (B, steps)."""
    h_dim = model.h
    kcs, r = cache["kcs"], cache["r"]
    gates, c_all, c_prev, h_prev, h_all = (
        cache["gates"], cache["c"], cache["c_prev"], cache["h_prev"], cache["h"])
    steps = gates.shape[0]
    n_batch = dlogit.shape[0]

    grads = {
        "w_x": np.zeros_like(model.w_x),
        "w_h": np.zeros_like(model.w_h),
        "b": np.zeros_like(model.b),
        "w_y": np.zeros_like(model.w_y),
        "b_y": np.zeros_like(model.b_y),
    }
    dh = np.zeros((n_batch, h_dim))
    dc = np.zeros((n_batch, h_dim))
    for s in range(steps - 1, -1, -1):
        kc_next = kcs[:, s + 1]
        dl = dlogit[:, s]
        # output head: logit = h_s . w_y[:, kc_next] + b_y[kc_next]
        np.add.at(grads["w_y"].T, kc_next, dl[:, None] * h_all[s])
        np.add.at(grads["b_y"], kc_next, dl)
        dh = dh + dl[:, None] * model.w_y[:, kc_next].T

        i = gates[s, :, :h_dim]
        f = gates[s, :, h_dim : 2 * h_dim]
        g = gates[s, :, 2 * h_dim : 3 * h_dim]
        o = gates[s, :, 3 * h_dim :]
        tanh_c = np.tanh(c_all[s])
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        da = np.empty((n_batch, 4 * h_dim))
        da[:, :h_dim] = dc * g * i * (1.0 - i)
        da[:, h_dim : 2 * h_dim] = dc * c_prev[s] * f * (1.0 - f)
        da[:, 2 * h_dim : 3 * h_dim] = dc * i * (1.0 - g * g)
        da[:, 3 * h_dim :] = do * o * (1.0 - o)

        kc_s = kcs[:, s]
        r_s = r[:, s : s + 1]
        np.add.at(grads["w_x"], kc_s, (1.0 - r_s) * da)
        np.add.at(grads["w_x"], kc_s + model.k, r_s * da)
        grads["w_h"] += h_prev[s].T @ da
        grads["b"] += da.sum(axis=0)
        dh = da @ model.w_h.T
        dc = dc * f
    return grads


def _prediction_mask(lengths: np.ndarray, steps: int) -> np.ndarray:
    """mask[b, j] = 1 iff step j+1 is a real (unpadded) prediction target."""
    return (np.arange(steps)[None, :] < (lengths - 1)[:, None]).astype(np.float64)


def _bce(preds: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    p = np.clip(preds, 1e-12, 1.0 - 1e-12)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float((terms * mask).sum() / mask.sum())


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic (ties averaged)."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    _, inverse, counts = np.unique(scores[order], return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    ranks_sorted = (starts + ends)[inverse] / 2.0
    ranks = np.empty(len(scores))
    ranks[order] = ranks_sorted
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _eval_holdout(model: KtModel, histories: Sequence[LearningHistory],
                  batch_size: int):
    losses, n_terms = [], []
    all_p, all_y = [], []
    for start in range(0, len(histories), batch_size):
        chunk = histories[start : start + batch_size]
        kcs, resp, lengths = _pad_batch(chunk)
        preds, _ = _forward_train(model, kcs, resp)
        mask = _prediction_mask(lengths, preds.shape[1])
        labels = resp[:, 1:]
        losses.append(_bce(preds, labels, mask) * mask.sum())
        n_terms.append(mask.sum())
        keep = mask > 0
        all_p.append(preds[keep])
        all_y.append(labels[keep])
    p = np.concatenate(all_p)
    y = np.concatenate(all_y)
    loss = float(sum(losses) / sum(n_terms))
    acc = float(((p > 0.5) == (y > 0.5)).mean())
    # single-class holdouts (degenerate datasets) have no defined AUC
    auc = roc_auc(y, p) if 0 < y.sum() < len(y) else float("nan")
    return loss, acc, auc


def _output_bias_init(histories: Sequence[LearningHistory], n_kcs: int) -> np.ndarray:
    """Per-KC log-odds of correctness; starts the output head calibrated."""
    counts = np.full(n_kcs, 2.0)  # +1/+1 smoothing
    correct = np.ones(n_kcs)
    for hist in histories:
        for kc, r in zip(hist.kcs[1:], hist.responses[1:]):
            counts[kc] += 1.0
            correct[kc] += r
    rate = correct / counts
    return np.log(rate / (1.0 - rate))


def train(histories: Sequence[LearningHistory], n_kcs: int,
          config: TrainConfig | None = None) -> tuple[KtModel, TrainReport]:
    """Fit the tracer by mini-batch Adam on next-step binary cross-entropy.

    Deterministic given ``config.seed``: the data split, shuffling, weight
    init, and (fixed-order) batch reductions all derive from it. When the
    held-out loss stalls for ``patience`` epochs the step size halves, up
    to ``max_decays`` times; the best held-out weights are returned.
    """
    config = config or TrainConfig()
    if not histories:
        raise InputError("training dataset is empty")
    for hist in histories:
        if hist.kcs.max() >= n_kcs:
            raise InputError(
                f"history contains KC {int(hist.kcs.max())} >= n_kcs {n_kcs}")

    rng = np.random.default_rng(config.seed)
    model = _init_model(n_kcs, config.hidden_size, rng)

    order = rng.permutation(len(histories))
    n_holdout = max(1, int(round(len(histories) * config.holdout_fraction)))
    if n_holdout >= len(histories):
        raise InputError("dataset too small for the configured holdout fraction")
    holdout = [histories[j] for j in order[:n_holdout]]
    train_set = [histories[j] for j in order[n_holdout:]]
    model.b_y = _output_bias_init(train_set, n_kcs)

    adam = Adam([w.shape for w in model.weights()], lr=config.learning_rate)
    best_loss = np.inf
    best_weights = [w.copy() for w in model.weights()]
    stale = 0
    decays = 0
    report = TrainReport(0.0, 0.0, 0, len(train_set), n_holdout)

    for epoch in range(config.max_epochs):
        perm = rng.permutation(len(train_set))
        epoch_loss, epoch_terms = 0.0, 0.0
        for start in range(0, len(perm), config.batch_size):
            batch = [train_set[j] for j in perm[start : start + config.batch_size]]
            kcs, resp, lengths = _pad_batch(batch)
            preds, cache = _forward_train(model, kcs, resp)
            mask = _prediction_mask(lengths, preds.shape[1])
            labels = resp[:, 1:]
            epoch_loss += _bce(preds, labels, mask) * mask.sum()
            epoch_terms += mask.sum()
            dlogit = (preds - labels) * mask / mask.sum()
            grads = _backward_train(model, cache, dlogit)
            glist = [grads[name] for name in WEIGHT_KEYS]
            norm = np.sqrt(sum(float((g * g).sum()) for g in glist))
            if norm > config.grad_clip:
                glist = [g * (config.grad_clip / norm) for g in glist]
            new_weights = adam.step(model.weights(), glist)
            for name, w in zip(WEIGHT_KEYS, new_weights):
                setattr(model, name, w)

        holdout_loss, _, _ = _eval_holdout(model, holdout, config.batch_size)
        report.train_losses.append(epoch_loss / epoch_terms)
        report.holdout_losses.append(holdout_loss)
        report.epochs_run = epoch + 1
        if holdout_loss < best_loss - 1e-6:
            best_loss = holdout_loss
            best_weights = [w.copy() for w in model.weights()]
            stale = 0
        elif (stale := stale + 1) >= config.patience:
            if decays < config.max_decays:
                adam.lr *= 0.5
                decays += 1
                stale = 0
            else:
                break

    for name, w in zip(WEIGHT_KEYS, best_weights):
        setattr(model, name, w)
    _, acc, auc = _eval_holdout(model, holdout, config.batch_size)
    report.holdout_accuracy = acc
    report.holdout_auc = auc
    return model, report


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: KtModel, path: str | Path):
    """Write an .npz container: header {format_version, k, h} + weight blocks."""
    path = Path(path)
    payload = {name: getattr(model, name) for name in WEIGHT_KEYS}
    payload["format_version"] = np.array(MODEL_FORMAT_VERSION, dtype=np.int64)
    payload["k"] = np.array(model.k, dtype=np.int64)
    payload["h"] = np.array(model.h, dtype=np.int64)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str | Path) -> KtModel:
    """Load a model saved by :func:`save_model`; round-trip is bit-exact."""
    try:
        with np.load(path) as data:
            contents = {key: data[key] for key in data.files}
    except (ValueError, OSError, EOFError) as exc:
        raise FormatError(f"not a model file: {exc}") from exc
    missing = {"format_version", "k", "h", *WEIGHT_KEYS} - set(contents)
    if missing:
        raise FormatError(f"model file missing blocks: {sorted(missing)}")
    version = int(contents["format_version"])
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(
            f"unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})")
    k, h = int(contents["k"]), int(contents["h"])
    expected = _weight_shapes(k, h)
    for name in WEIGHT_KEYS:
        if contents[name].shape != expected[name]:
            raise FormatError(
                f"weight {name} has shape {contents[name].shape}, "
                f"expected {expected[name]} for K={k}, H={h}")
    return KtModel(k=k, h=h, **{name: contents[name] for name in WEIGHT_KEYS})
