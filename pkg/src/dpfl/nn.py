"""Dense feed-forward network with manual backpropagation.

Hidden layers are affine -> ReLU -> (inverted dropout in training mode);
the output layer is affine -> sigmoid for binary classification. All math
is float64. Gradients are produced per example, which is what the privacy
engine clips and noises; the batch gradient helper exists as an independent
cross-check and is not used by the training loop.
"""

from dataclasses import dataclass

import numpy as np

from . import seeding, wire
from .errors import DataError, ProtocolError

# A gradient set mirrors ModelParams: one (weight, bias) pair per layer.
GradientSet = list[tuple[np.ndarray, np.ndarray]]

PROB_CLAMP = 1e-7  # BCE probability clamp, avoids log(0)

_PARAMS_MAGIC = b"DPWT"
_PARAMS_VERSION = 1


@dataclass
class ModelParams:
    """Ordered dense layers; weights are (out, in), biases are (out,)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])

    def flat_arrays(self) -> list[np.ndarray]:
        """Interleaved [W1, b1, W2, b2, ...] view used by the wire format."""
        out: list[np.ndarray] = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    @staticmethod
    def from_flat_arrays(arrays: list[np.ndarray]) -> "ModelParams":
        if len(arrays) % 2 != 0:
            raise DataError("weight tensor list must hold (matrix, bias) pairs")
        layers = []
        for i in range(0, len(arrays), 2):
            w, b = arrays[i], arrays[i + 1]
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DataError(f"layer {i // 2} tensors have incompatible shapes")
            layers.append((np.asarray(w, dtype=np.float64),
                           np.asarray(b, dtype=np.float64)))
        params = ModelParams(layers)
        for (w_prev, _), (w_next, _) in zip(layers, layers[1:]):
            if w_next.shape[1] != w_prev.shape[0]:
                raise DataError("adjacent layer dimensions do not chain")
        return params


@dataclass
class ForwardTrace:
    """Everything backprop needs: inputs, pre-activations, activations, masks."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # post-ReLU/post-dropout hidden activations
    dropout_masks: list[np.ndarray | None]
    probs: np.ndarray  # sigmoid outputs, shape (batch,)


def init_model(layer_sizes: list[int], seed: int) -> ModelParams:
    """Seeded fan-in uniform init: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), b = 0."""
    if len(layer_sizes) < 2:
        raise DataError("need at least input and output sizes")
    if layer_sizes[-1] != 1:
        raise DataError("output layer size must be 1 for binary classification")
    if any(s <= 0 for s in layer_sizes):
        raise DataError("layer sizes must be positive")
    rng = seeding.stream(seed, seeding.INIT)
    layers = []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(layers)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(
    params: ModelParams,
    X: np.ndarray,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Runs the network; training mode applies inverted dropout after ReLU.

    With dropout_p == 0 the training-mode pass is identical to eval mode
    (no mask is drawn, so the RNG is untouched).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.layers[0][0].shape[1]:
        raise DataError(
            f"input has {X.shape[1] if X.ndim == 2 else '?'} features, "
            f"model expects {params.layers[0][0].shape[1]}"
        )
    use_dropout = train and dropout_p > 0.0
    if use_dropout and rng is None:
        raise DataError("training-mode dropout requires an RNG")

    pre_acts: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    a = X
    for w, b in params.layers[:-1]:
        z = a @ w.T + b
        h = np.maximum(z, 0.0)
        if use_dropout:
            keep = 1.0 - dropout_p
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
        pre_acts.append(z)
        acts.append(h)
        a = h
    w_out, b_out = params.layers[-1]
    z_out = a @ w_out.T + b_out
    pre_acts.append(z_out)
    probs = _sigmoid(z_out[:, 0])
    if not np.all(np.isfinite(z_out)):
        raise DataError("non-finite value in output layer")
    return ForwardTrace(X, pre_acts, acts, masks, probs)


def bce_loss(probs: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise DataError(f"prediction/label length mismatch: {probs.shape} vs {y.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _backward_deltas(params: ModelParams, trace: ForwardTrace,
                     y: np.ndarray) -> list[np.ndarray]:
    """Per-layer error terms for the per-example (unaveraged) BCE loss."""
    n_layers = len(params.layers)
    deltas: list[np.ndarray] = [np.empty(0)] * n_layers
    # Fused sigmoid+BCE output gradient; exact wherever the clamp is inactive.
    deltas[-1] = (trace.probs - y)[:, None]
    for l in range(n_layers - 2, -1, -1):
        w_next = params.layers[l + 1][0]
        g = deltas[l + 1] @ w_next
        mask = trace.dropout_masks[l]
        if mask is not None:
            g = g * mask
        deltas[l] = g * (trace.pre_activations[l] > 0)
    return deltas


def _layer_inputs(trace: ForwardTrace) -> list[np.ndarray]:
    return [trace.inputs] + trace.activations


def per_sample_grads(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
    trace: ForwardTrace | None = None,
) -> tuple[list[GradientSet], ForwardTrace]:
    """Gradient of each example's own BCE loss w.r.t. every parameter.

    Backprop reuses the exact forward trace (same dropout masks). Returns one
    GradientSet per example plus the trace it differentiated through.
    """
    y = np.asarray(y, dtype=np.float64)
    if trace is None:
        trace = forward(params, X, dropout_p=dropout_p, train=train, rng=rng)
    deltas = _backward_deltas(params, trace, y)
    inputs = _layer_inputs(trace)
    batch = trace.inputs.shape[0]
    stacked = []
    for l in range(len(params.layers)):
        dw = np.einsum("bo,bi->boi", deltas[l], inputs[l])
        if not np.all(np.isfinite(dw)):
            raise DataError(f"non-finite gradient in layer {l}")
        stacked.append((dw, deltas[l]))
    grads = [
        [(dw[i], db[i]) for dw, db in stacked]
        for i in range(batch)
    ]
    return grads, trace


def batch_grads(params: ModelParams, X: np.ndarray, y: np.ndarray,
                trace: ForwardTrace | None = None) -> GradientSet:
    """Gradient of the mean BCE loss, computed with matrix products.

    Independent of the per-sample path; used to cross-check it.
    """
    y = np.asarray(y, dtype=np.float64)
    if trace is None:
        trace = forward(params, X)
    deltas = _backward_deltas(params, trace, y)
    inputs = _layer_inputs(trace)
    batch = trace.inputs.shape[0]
    return [
        (deltas[l].T @ inputs[l] / batch, deltas[l].sum(axis=0) / batch)
        for l in range(len(params.layers))
    ]


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Hard 0/1 predictions at threshold 0.5; a tie goes to class 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot predict on an empty batch")
    probs = forward(params, X).probs
    return (probs >= 0.5).astype(np.int64)


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    pred = np.asarray(pred)
    y = np.asarray(y)
    if pred.shape != y.shape:
        raise DataError("prediction/label length mismatch")
    if pred.size == 0:
        raise DataError("cannot score an empty prediction vector")
    return float(np.mean(pred == y))


def serialize_params(params: ModelParams) -> bytes:
    """Weight file format: magic DPWT, version byte, wire tensor block."""
    return (
        _PARAMS_MAGIC
        + bytes([_PARAMS_VERSION])
        + wire.encode_tensors(params.flat_arrays())
    )


def deserialize_params(data: bytes) -> ModelParams:
    if len(data) < 5:
        raise ProtocolError("weight blob shorter than header")
    if data[:4] != _PARAMS_MAGIC:
        raise ProtocolError(f"bad weight-file magic {data[:4]!r}")
    if data[4] != _PARAMS_VERSION:
        raise ProtocolError(f"unsupported weight-file version {data[4]}")
    reader = wire._Reader(data[5:])
    arrays = wire._read_tensors(reader)
    reader.done()
    return ModelParams.from_flat_arrays(arrays)
