"""Tiny manually-differentiated neural models and loss machinery.

Models are immutable values: training steps return new models.  Everything is
deliberately small (<= 10^4 parameters) so attacks that need gradients of
gradient differences remain tractable with plain numpy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numeric import ParameterError, Rng, as_vector

ACTIVATIONS = ("sigmoid", "relu", "tanh", "identity")

_ACT = {
    "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z)),
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "identity": lambda z: z,
}

_ACT_DERIV = {
    # derivatives expressed in terms of the activation output a = theta(z)
    "sigmoid": lambda a, z: a * (1.0 - a),
    "relu": lambda a, z: (z > 0.0).astype(np.float64),
    "tanh": lambda a, z: 1.0 - a * a,
    "identity": lambda a, z: np.ones_like(z),
}


@dataclass(frozen=True)
class TinyModel:
    """Fully-connected network; the activation applies to every layer."""

    sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]  # each (fan_in, fan_out)
    biases: tuple[np.ndarray, ...]  # each (fan_out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ParameterError("layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ParameterError(f"layer {i} shape mismatch")

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_model(sizes, activation: str = "sigmoid", rng: Rng | None = None) -> TinyModel:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], seed-pinned."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ParameterError("need at least input and output sizes, all positive")
    rng = rng if rng is not None else Rng(0)
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[i])
        ws.append(rng.uniform(-bound, bound, sizes[i] * sizes[i + 1]).reshape(sizes[i], sizes[i + 1]))
        bs.append(rng.uniform(-bound, bound, sizes[i + 1]))
    return TinyModel(sizes=sizes, weights=tuple(ws), biases=tuple(bs), activation=activation)


def flatten(model: TinyModel) -> np.ndarray:
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(model: TinyModel, flat: np.ndarray) -> TinyModel:
    flat = as_vector(flat)
    if flat.shape[0] != model.param_count:
        raise ParameterError(f"expected {model.param_count} parameters, got {flat.shape[0]}")
    ws, bs = [], []
    pos = 0
    for i in range(len(model.sizes) - 1):
        nin, nout = model.sizes[i], model.sizes[i + 1]
        ws.append(flat[pos : pos + nin * nout].reshape(nin, nout).copy())
        pos += nin * nout
        bs.append(flat[pos : pos + nout].copy())
        pos += nout
    return TinyModel(sizes=model.sizes, weights=tuple(ws), biases=tuple(bs), activation=model.activation)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, din)
    labels: np.ndarray  # (B,) class indices or (B, dout) target vectors

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ParameterError("inputs must be a nonempty (B, din) array")
        y = np.asarray(self.labels)
        if y.shape[0] != x.shape[0]:
            raise ParameterError("label count must match input count")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward(model: TinyModel, x: np.ndarray) -> np.ndarray:
    """Final-layer activations for a single input vector."""
    x = as_vector(x)
    if x.shape[0] != model.input_dim:
        raise ParameterError(f"input dim {x.shape[0]}, model expects {model.input_dim}")
    return forward_batch(model, x[None, :])[0]


def forward_batch(model: TinyModel, X: np.ndarray) -> np.ndarray:
    act = _ACT[model.activation]
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ParameterError("inputs must be (B, din) matching the model")
    for w, b in zip(model.weights, model.biases):
        a = act(a @ w + b)
    return a


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _forward_trace(model: TinyModel, X: np.ndarray):
    act = _ACT[model.activation]
    activations = [np.asarray(X, dtype=np.float64)]
    pre = []
    a = activations[0]
    for w, b in zip(model.weights, model.biases):
        z = a @ w + b
        a = act(z)
        pre.append(z)
        activations.append(a)
    return pre, activations


def _backward_full(model: TinyModel, batch: Batch, loss: str):
    """Loss, flat parameter gradient, and input gradient for a batch."""
    if batch.inputs.shape[1] != model.input_dim:
        raise ParameterError("batch input dim does not match model")
    pre, acts = _forward_trace(model, batch.inputs)
    out = acts[-1]
    B = batch.size

    if loss == "mse":
        targets = np.asarray(batch.labels, dtype=np.float64)
        if targets.shape != out.shape:
            raise ParameterError("mse targets must match output shape")
        resid = out - targets
        loss_value = 0.5 * float(np.sum(resid * resid)) / B
        dout = resid / B
    elif loss == "cross_entropy":
        labels = np.asarray(batch.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ParameterError("cross_entropy labels must be class indices")
        probs = softmax(out)
        picked = probs[np.arange(B), labels]
        loss_value = -float(np.sum(np.log(np.maximum(picked, 1e-300)))) / B
        dout = probs.copy()
        dout[np.arange(B), labels] -= 1.0
        dout /= B
    else:
        raise ParameterError(f"unknown loss {loss!r}")

    deriv = _ACT_DERIV[model.activation]
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    delta = dout * deriv(acts[-1], pre[-1])
    for layer in range(len(model.weights) - 1, -1, -1):
        grad_w[layer] = acts[layer].T @ delta
        grad_b[layer] = np.sum(delta, axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer].T) * deriv(acts[layer], pre[layer - 1])
        else:
            input_grad = delta @ model.weights[0].T
    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grad_w, grad_b)])
    return loss_value, flat, input_grad


def backward(model: TinyModel, batch: Batch, loss: str = "mse"):
    """Batch-averaged loss and its gradient over the flattened parameters."""
    loss_value, grad, _ = _backward_full(model, batch, loss)
    return loss_value, grad


def input_gradient(model: TinyModel, batch: Batch, loss: str = "mse"):
    """Loss gradient with respect to the inputs (used by inversion attacks)."""
    loss_value, _, grad_x = _backward_full(model, batch, loss)
    return loss_value, grad_x


def sgd_step(model: TinyModel, batch: Batch, eta: float, loss: str = "mse") -> TinyModel:
    if eta < 0:
        raise ParameterError("eta must be >= 0")
    _, grad = backward(model, batch, loss)
    return unflatten(model, flatten(model) - eta * grad)


def accuracy(model: TinyModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    out = forward_batch(model, inputs)
    pred = np.argmax(out, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TMDL"
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def model_to_bytes(model: TinyModel) -> bytes:
    """Binary layout: magic, u8 activation, u32 n_sizes, sizes, LE float64 params."""
    head = _CKPT_MAGIC + struct.pack("<BI", _ACT_CODE[model.activation], len(model.sizes))
    head += struct.pack(f"<{len(model.sizes)}I", *model.sizes)
    return head + flatten(model).astype("<f8").tobytes()


def model_from_bytes(data: bytes) -> TinyModel:
    if data[:4] != _CKPT_MAGIC:
        raise ParameterError("not a model checkpoint")
    act_code, n_sizes = struct.unpack_from("<BI", data, 4)
    sizes = struct.unpack_from(f"<{n_sizes}I", data, 9)
    offset = 9 + 4 * n_sizes
    skeleton = init_model(sizes, ACTIVATIONS[act_code], Rng(0))
    flat = np.frombuffer(data, dtype="<f8", offset=offset, count=skeleton.param_count)
    return unflatten(skeleton, np.array(flat))


def model_debug_json(model: TinyModel) -> str:
    return json.dumps(
        {
            "sizes": list(model.sizes),
            "activation": model.activation,
            "weights": [w.tolist() for w in model.weights],
            "biases": [b.tolist() for b in model.biases],
        }
    )


# ---------------------------------------------------------------------------
# Bigram language model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BigramLM:
    """Desk-scale language model: a V x V table of transition logits."""

    vocab_size: int
    logits: np.ndarray  # (V, V): logits[prev, next]

    def __post_init__(self):
        table = np.asarray(self.logits, dtype=np.float64)
        if table.shape != (self.vocab_size, self.vocab_size):
            raise ParameterError("logit table must be (V, V)")
        object.__setattr__(self, "logits", table)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def train_bigram(corpus, vocab_size: int, smoothing: float = 0.1) -> BigramLM:
    """Maximum-likelihood bigram with additive smoothing, as logit table."""
    counts = np.full((vocab_size, vocab_size), smoothing, dtype=np.float64)
    for seq in corpus:
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1.0
    return BigramLM(vocab_size=vocab_size, logits=np.log(counts))


def mask_bigram_probs(lm: BigramLM, alpha: float, rng: Rng) -> np.ndarray:
    """Masked transition table: probabilities perturbed by U[-alpha, alpha].

    Perturbed entries are clipped at zero and rows renormalized, so large
    alpha drives some transition probabilities to exactly zero (the source of
    the +inf log-perplexity saturation at high alpha).  Returns a (V, V) row
    table; rows that collapse entirely stay all-zero.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError("alpha must lie in [0, 1]")
    V = lm.vocab_size
    noise = rng.uniform(-alpha, alpha, V * V).reshape(V, V) if alpha > 0 else 0.0
    masked = np.maximum(lm.probs + noise, 0.0)
    sums = masked.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        normed = np.where(sums > 0, masked / np.where(sums > 0, sums, 1.0), 0.0)
    return normed


def lm_log_perplexity(lm, tokens, context: int | None = None) -> float:
    """Sum of -log2 transition probabilities, in bits.

    The first token is scored against a uniform prior over the vocabulary,
    or against the row of ``context`` when a boundary context is given.
    Accepts a BigramLM or a raw (V, V) row-stochastic table (e.g. a masked
    table).  A zero-probability transition yields +inf.
    """
    if isinstance(lm, BigramLM):
        table = lm.probs
    else:
        table = np.asarray(lm, dtype=np.float64)
    V = table.shape[0]
    tokens = list(tokens)
    if not tokens:
        raise ParameterError("token sequence must be nonempty")
    if any(not (0 <= t < V) for t in tokens):
        raise ParameterError("token id out of vocabulary")
    if context is None:
        total = float(np.log2(V))  # uniform prior for the first token
        chain = tokens
    else:
        total = 0.0
        chain = [context] + tokens
    for prev, nxt in zip(chain[:-1], chain[1:]):
        p = table[prev, nxt]
        if p <= 0.0:
            return float("inf")
        total += -np.log2(p)
    return float(total)
