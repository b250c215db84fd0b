"""Truncated-BPTT training with Nesterov momentum, and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..corpus import DistortionConfig, SegmentRecord, augment_batch, stack_segments
from .model import (
    LstmModel,
    backward_slice,
    forward,
    forward_slice,
    sample_sequence_masks,
    sample_step_masks,
    slice_loss,
    zero_state,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class LabelMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.2
    lr_decay: float = 0.93
    momentum: float = 0.9
    tbptt_len: int = 32
    epochs: int = 25
    batch_size: int = 64
    recurrent_dropout: float = 0.1
    between_dropout: float = 0.1
    dense_dropout: float = 0.2
    augment: bool = True
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    normalize_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("lr0", "lr_decay", "momentum"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        for name in ("recurrent_dropout", "between_dropout", "dense_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.tbptt_len < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("tbptt_len, epochs and batch_size must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Rate used during ``epoch`` (0-based)."""
        return self.lr0 * self.lr_decay**epoch

    @property
    def dropout(self) -> dict:
        return {
            "recurrent": self.recurrent_dropout,
            "between": self.between_dropout,
            "dense": self.dense_dropout,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distortion"] = asdict(self.distortion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "distortion" in d:
            d["distortion"] = DistortionConfig(**d["distortion"])
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    top3: float
    test_accuracy: float | None = None
    test_top3: float | None = None


@dataclass
class Evaluation:
    accuracy: float
    top3_accuracy: float
    confusion: np.ndarray  # raw counts, rows = true label
    predictions: np.ndarray
    final_probs: np.ndarray

    def normalized_confusion(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def top_k(probs: np.ndarray, k: int = 3) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def _score(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    pred = np.argmax(probs, axis=1)
    hits3 = (top_k(probs, 3) == labels[:, None]).any(axis=1)
    return float(np.mean(pred == labels)), float(np.mean(hits3))


class _Nesterov:
    """SGD with Nesterov momentum in the ``v <- m v - lr g; p <- p + m v - lr g`` form."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float):
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        m = self.momentum
        for k, g in grads.items():
            v = self.velocity[k]
            v *= m
            v -= lr * g
            params[k] += m * v - lr * g


def train(
    model: LstmModel,
    segments: Sequence[SegmentRecord],
    weights: np.ndarray | None = None,
    config: TrainConfig | None = None,
    test_segments: Sequence[SegmentRecord] | None = None,
) -> tuple[LstmModel, list[EpochLog]]:
    """Train ``model`` in place and return it with a per-epoch log.

    Each mini-batch of whole segments is cut into ``tbptt_len``-step slices;
    every slice gets its own parameter update and hands its final states to
    the next slice as constants.  States restart from zero for each batch.
    """
    config = config or TrainConfig()
    if not segments:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    dtype = model.params["dense.W"].dtype
    X_all = stack_segments(segments, dtype)
    y_all = np.array([s.language for s in segments])
    if y_all.max() >= model.n_classes:
        raise LabelMismatch("segment label outside the model's label space")
    w_all = np.ones(len(segments)) if weights is None else np.asarray(weights, dtype=np.float64)
    if config.normalize_weights:
        w_all = w_all / w_all.mean()

    model.config["dropout"] = config.dropout
    model.config["train"] = config.to_dict()
    opt = _Nesterov(model.params, config.momentum)
    n, T = X_all.shape[:2]
    history = []

    for epoch in range(config.epochs):
        lr = config.learning_rate(epoch)
        order = rng.permutation(n)
        loss_sum, loss_count = 0.0, 0
        final_probs = np.empty((n, model.n_classes))
        for b_idx, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb = X_all[idx]
            if config.augment:
                xb = augment_batch(xb, config.distortion, rng)
            xb = np.ascontiguousarray(np.transpose(xb, (1, 0, 2)))
            yb, wb = y_all[idx], w_all[idx]
            B = len(idx)
            state = zero_state(model, B, dtype)
            rec = sample_sequence_masks(model, B, rng, dtype)
            for t0 in range(0, T, config.tbptt_len):
                xs = xb[t0 : t0 + config.tbptt_len]
                masks = sample_step_masks(model, len(xs), B, rng, rec, dtype)
                res = forward_slice(model, xs, state, masks, keep_cache=True)
                value = slice_loss(res.probs, yb, wb)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b_idx}, step {t0}, lr {lr:.4g}"
                    )
                grads = backward_slice(model, res, yb, wb)
                opt.step(model.params, grads, lr)
                state = res.state
                loss_sum += value
                loss_count += 1
            final_probs[idx] = res.probs[-1]
        acc, top3 = _score(final_probs, y_all)
        entry = EpochLog(epoch + 1, lr, loss_sum / loss_count, acc, top3)
        if test_segments:
            ev = evaluate(model, test_segments)
            entry.test_accuracy, entry.test_top3 = ev.accuracy, ev.top3_accuracy
        model.epoch += 1
        history.append(entry)
        log.info(
            "epoch %d lr %.4f loss %.4f acc %.3f top3 %.3f test %s",
            entry.epoch, lr, entry.loss, acc, top3,
            "-" if entry.test_accuracy is None else f"{entry.test_accuracy:.3f}",
        )
    return model, history


def final_outputs(model: LstmModel, segments: Sequence[SegmentRecord], batch_size: int = 256,
                  mode: str = "eval", rng=None, layer: int | None = None) -> np.ndarray:
    """Final-step softmax outputs (or hidden states of ``layer``) for each segment.

    Segments may differ in length; they are grouped by length so each group
    runs as one batch.
    """
    dtype = model.params["dense.W"].dtype
    width = model.n_classes if layer is None else model.hidden
    out = np.empty((len(segments), width))
    by_len: dict[int, list[int]] = {}
    for i, seg in enumerate(segments):
        by_len.setdefault(len(seg.features), []).append(i)
    for length in sorted(by_len):
        ids = by_len[length]
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            xb = stack_segments([segments[i] for i in chunk], dtype)
            res = forward(model, xb, mode=mode, rng=rng)
            if layer is None:
                out[chunk] = res.probs[-1]
            else:
                out[chunk] = (res.hidden1 if layer == 1 else res.hidden2)[-1]
    return out


def evaluate(model: LstmModel, segments: Sequence[SegmentRecord], labels: Sequence[str] | None = None) -> Evaluation:
    """Accuracy, top-3 accuracy and confusion counts from the last-step output."""
    if labels is not None and list(labels) != list(model.labels):
        raise LabelMismatch(f"label space {list(labels)} does not match model labels {model.labels}")
    y = np.array([s.language for s in segments])
    if len(y) and y.max() >= model.n_classes:
        raise LabelMismatch("segment label outside the model's label space")
    probs = final_outputs(model, segments)
    pred = np.argmax(probs, axis=1)
    acc, top3 = _score(probs, y)
    confusion = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return Evaluation(acc, top3, confusion, pred, probs)


def evaluate_probs(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy and top-3 accuracy of precomputed final-step outputs."""
    return _score(np.asarray(probs), np.asarray(labels))
