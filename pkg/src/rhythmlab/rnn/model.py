"""Two-layer forget-gate LSTM with a softmax head, written directly in numpy.

Arrays are time-major: inputs are (T, B, D), hidden states (T, B, H).
Gate pre-activations are packed column-wise in the order input, forget,
cell candidate, output, so every weight matrix has 4H columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INPUT_DIM = 6
HIDDEN = 150
GATES = ("input", "forget", "cell", "output")
MODES = ("train", "eval", "analysis")

DEFAULT_DROPOUT = {"recurrent": 0.1, "between": 0.1, "dense": 0.2}
PROB_CLAMP = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class LstmModel:
    """All trainable parameters plus the label list and a config snapshot.

    Parameter names: ``layer{1,2}.{W,U,b}`` and ``dense.{W,b}``.  ``W`` maps
    the layer input, ``U`` the previous hidden state.
    """

    params: dict[str, np.ndarray]
    labels: list[str]
    config: dict = field(default_factory=dict)
    epoch: int = 0

    @property
    def hidden(self) -> int:
        return self.params["layer1.U"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.params["dense.b"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.params["layer1.W"].shape[0]

    @property
    def dropout(self) -> dict:
        return {**DEFAULT_DROPOUT, **self.config.get("dropout", {})}

    def copy(self) -> "LstmModel":
        return LstmModel(
            {k: v.copy() for k, v in self.params.items()},
            list(self.labels),
            dict(self.config),
            self.epoch,
        )


def init_model(
    n_classes: int | None = None,
    hidden: int = HIDDEN,
    seed: int = 0,
    labels=None,
    input_dim: int = INPUT_DIM,
    dtype=np.float32,
    dropout: dict | None = None,
) -> LstmModel:
    """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias 1, other biases 0."""
    if labels is None:
        if n_classes is None:
            raise ModelError("give n_classes or labels")
        labels = [str(i) for i in range(n_classes)]
    labels = list(labels)
    n_classes = len(labels) if n_classes is None else n_classes
    if n_classes != len(labels):
        raise ModelError("label list does not match n_classes")
    if n_classes < 2:
        raise ModelError("need at least two classes")

    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype)

    params = {}
    for layer, d_in in ((1, input_dim), (2, hidden)):
        fan_in = d_in + hidden
        params[f"layer{layer}.W"] = uniform(fan_in, (d_in, 4 * hidden))
        params[f"layer{layer}.U"] = uniform(fan_in, (hidden, 4 * hidden))
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0
        params[f"layer{layer}.b"] = b
    params["dense.W"] = uniform(hidden, (hidden, n_classes))
    params["dense.b"] = np.zeros(n_classes, dtype=dtype)
    config = {"hidden": hidden, "input_dim": input_dim, "seed": seed}
    if dropout is not None:
        config["dropout"] = dict(dropout)
    return LstmModel(params, labels, config)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DropoutMasks:
    """Inverted-dropout masks (already divided by the keep probability).

    ``recurrent`` holds one (B, H) mask per layer, fixed for a whole sequence
    and applied to the previous hidden state; ``between`` and ``dense`` are
    (T, B, H) per-step masks on the layer-1 output and the layer-2 output.
    ``None`` means no dropout at that site.
    """

    recurrent: tuple[np.ndarray | None, np.ndarray | None] = (None, None)
    between: np.ndarray | None = None
    dense: np.ndarray | None = None


def _bernoulli(rng, rate, shape, dtype):
    if rate <= 0:
        return None
    keep = 1.0 - rate
    mask = (rng.random(shape) < keep).astype(dtype)
    mask /= keep
    return mask


def sample_sequence_masks(model: LstmModel, batch: int, rng, dtype=np.float32):
    rate = model.dropout["recurrent"]
    return tuple(_bernoulli(rng, rate, (batch, model.hidden), dtype) for _ in range(2))


def sample_step_masks(model: LstmModel, steps: int, batch: int, rng, recurrent, dtype=np.float32):
    rates = model.dropout
    shape = (steps, batch, model.hidden)
    return DropoutMasks(
        recurrent=recurrent,
        between=_bernoulli(rng, rates["between"], shape, dtype),
        dense=_bernoulli(rng, rates["dense"], shape, dtype),
    )


def zero_state(model: LstmModel, batch: int, dtype=None):
    dtype = dtype or model.params["dense.W"].dtype
    z = np.zeros((batch, model.hidden), dtype=dtype)
    return ((z, z.copy()), (z.copy(), z.copy()))


def _layer_forward(W, U, b, x, h0, c0, rmask):
    T, B, _ = x.shape
    H = U.shape[0]
    zx = x @ W + b
    acts = np.empty((T, B, 4 * H), dtype=zx.dtype)
    cells = np.empty((T + 1, B, H), dtype=zx.dtype)
    tanh_c = np.empty((T, B, H), dtype=zx.dtype)
    h_in = np.empty((T, B, H), dtype=zx.dtype)
    hs = np.empty((T, B, H), dtype=zx.dtype)
    cells[0] = c0
    h = h0
    for t in range(T):
        h_in[t] = h if rmask is None else h * rmask
        z = zx[t] + h_in[t] @ U
        a = acts[t]
        a[:] = sigmoid(z)
        a[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        c = a[:, H : 2 * H] * cells[t] + a[:, :H] * a[:, 2 * H : 3 * H]
        cells[t + 1] = c
        tanh_c[t] = np.tanh(c)
        h = a[:, 3 * H :] * tanh_c[t]
        hs[t] = h
    cache = (x, acts, cells, tanh_c, h_in, rmask)
    return hs, (h, cells[T].copy()), cache


def _layer_backward(W, U, dh_ext, cache):
    """Backpropagate through one layer over a slice; no gradient reaches the initial state."""
    x, acts, cells, tanh_c, h_in, rmask = cache
    T, B, H = dh_ext.shape
    dz = np.empty_like(acts)
    dh_next = np.zeros((B, H), dtype=acts.dtype)
    dc_next = np.zeros((B, H), dtype=acts.dtype)
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        dh = dh_ext[t] + dh_next
        tc = tanh_c[t]
        dc = dh * o * (1.0 - tc * tc) + dc_next
        d = dz[t]
        d[:, :H] = dc * g * i * (1.0 - i)
        d[:, H : 2 * H] = dc * cells[t] * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ U.T
        if rmask is not None:
            dh_next = dh_next * rmask
    flat = dz.reshape(T * B, 4 * H)
    grads = {
        "W": x.reshape(T * B, -1).T @ flat,
        "U": h_in.reshape(T * B, H).T @ flat,
        "b": flat.sum(axis=0),
    }
    dx = dz @ W.T
    return grads, dx


@dataclass
class SliceResult:
    probs: np.ndarray  # (T, B, L)
    logits: np.ndarray
    hidden1: np.ndarray  # (T, B, H)
    hidden2: np.ndarray
    state: tuple
    cache: tuple | None = None


def forward_slice(model: LstmModel, x, state=None, masks: DropoutMasks | None = None, keep_cache=False):
    """Run both layers and the head over a (T, B, 6) slice from ``state``."""
    p = model.params
    if x.ndim != 3 or x.shape[2] != model.input_dim:
        raise ModelError(f"expected (T, B, {model.input_dim}) input, got {x.shape}")
    masks = masks or DropoutMasks()
    if state is None:
        state = zero_state(model, x.shape[1], x.dtype)
    (h1, c1), (h2, c2) = state
    hs1, st1, cache1 = _layer_forward(p["layer1.W"], p["layer1.U"], p["layer1.b"], x, h1, c1, masks.recurrent[0])
    x2 = hs1 if masks.between is None else hs1 * masks.between
    hs2, st2, cache2 = _layer_forward(p["layer2.W"], p["layer2.U"], p["layer2.b"], x2, h2, c2, masks.recurrent[1])
    hd = hs2 if masks.dense is None else hs2 * masks.dense
    logits = hd @ p["dense.W"] + p["dense.b"]
    probs = softmax(logits)
    cache = (cache1, cache2, hd, masks) if keep_cache else None
    return SliceResult(probs, logits, hs1, hs2, (st1, st2), cache)


def slice_loss(probs, labels, weights=None) -> float:
    """Batch mean of ``weight * mean_t(-log p[label])``."""
    T, B, _ = probs.shape
    labels = np.asarray(labels)
    picked = probs[:, np.arange(B), labels]
    per_seq = -np.log(np.maximum(picked, PROB_CLAMP)).mean(axis=0)
    if weights is not None:
        per_seq = per_seq * np.asarray(weights)
    return float(per_seq.mean())


def loss(probs, label: int, weight: float = 1.0) -> float:
    """Loss of a single sequence given its (T, L) step outputs."""
    probs = np.asarray(probs)
    return slice_loss(probs[:, None, :], [label], [weight])


def backward_slice(model: LstmModel, result: SliceResult, labels, weights=None) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`slice_loss` for a forward pass run with ``keep_cache``."""
    if result.cache is None:
        raise ModelError("forward_slice must be called with keep_cache=True")
    p = model.params
    cache1, cache2, hd, masks = result.cache
    T, B, L = result.probs.shape
    labels = np.asarray(labels)
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)

    dlogits = result.probs.copy()
    dlogits[:, np.arange(B), labels] -= 1.0
    dlogits *= (w / (B * T)).astype(dlogits.dtype)[None, :, None]

    grads = {
        "dense.W": hd.reshape(T * B, -1).T @ dlogits.reshape(T * B, L),
        "dense.b": dlogits.sum(axis=(0, 1)),
    }
    dh2 = dlogits @ p["dense.W"].T
    if masks.dense is not None:
        dh2 = dh2 * masks.dense
    g2, dx2 = _layer_backward(p["layer2.W"], p["layer2.U"], dh2, cache2)
    dh1 = dx2 if masks.between is None else dx2 * masks.between
    g1, _ = _layer_backward(p["layer1.W"], p["layer1.U"], dh1, cache1)
    for name, g in g1.items():
        grads[f"layer1.{name}"] = g
    for name, g in g2.items():
        grads[f"layer2.{name}"] = g
    return grads


def gradients(model: LstmModel, x, labels, weights=None, state=None, masks=None):
    """Loss and parameter gradients of one slice with fixed dropout masks."""
    result = forward_slice(model, x, state, masks, keep_cache=True)
    return slice_loss(result.probs, labels, weights), backward_slice(model, result, labels, weights)


@dataclass
class ForwardResult:
    probs: np.ndarray  # (T, L) for one sequence, (T, B, L) for a batch
    logits: np.ndarray
    hidden1: np.ndarray
    hidden2: np.ndarray


def _as_batch(features) -> tuple[np.ndarray, bool]:
    if hasattr(features, "stacked"):
        return features.stacked()[:, None, :], True
    x = np.asarray(features)
    if x.ndim == 2:
        return x[:, None, :], True
    if x.ndim == 3:
        return np.transpose(x, (1, 0, 2)), False
    raise ModelError(f"cannot interpret input of shape {x.shape}")


def forward(model: LstmModel, features, mode: str = "eval", rng=None) -> ForwardResult:
    """Full-sequence forward pass.

    ``features`` is a FeatureSequence, a (T, 6) array or a (B, T, 6) batch.
    ``train`` and ``analysis`` sample dropout masks from ``rng``; ``eval``
    runs the deterministic expectation (no masks).
    """
    if mode not in MODES:
        raise ModelError(f"unknown mode {mode!r}")
    x, single = _as_batch(features)
    x = x.astype(model.params["dense.W"].dtype, copy=False)
    masks = None
    if mode != "eval":
        rng = rng if rng is not None else np.random.default_rng()
        rec = sample_sequence_masks(model, x.shape[1], rng, x.dtype)
        masks = sample_step_masks(model, x.shape[0], x.shape[1], rng, rec, x.dtype)
    res = forward_slice(model, x, masks=masks)
    if single:
        return ForwardResult(res.probs[:, 0], res.logits[:, 0], res.hidden1[:, 0], res.hidden2[:, 0])
    return ForwardResult(res.probs, res.logits, res.hidden1, res.hidden2)
