"""Plain SGD and Adam update rules over aggregated gradients."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .nn import GradientSet, ModelParams

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)
    v: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)


def make_optimizer(kind: str, lr: float, params: ModelParams) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise DataError(f"unknown optimizer {kind!r}")
    if lr <= 0:
        raise DataError("learning rate must be positive")
    state = OptimizerState(kind=kind, lr=lr)
    if kind == "adam":
        state.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        state.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    return state


def _check_grad(grad: GradientSet) -> None:
    for dw, db in grad:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise DataError("non-finite gradient passed to optimizer")


def sgd_step(params: ModelParams, grad: GradientSet,
             state: OptimizerState) -> ModelParams:
    """theta' = theta - lr * g."""
    _check_grad(grad)
    lr = state.lr
    return ModelParams(
        [(w - lr * dw, b - lr * db)
         for (w, b), (dw, db) in zip(params.layers, grad)]
    )


def adam_step(params: ModelParams, grad: GradientSet,
              state: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """Standard Adam with bias correction; returns updated params and state."""
    _check_grad(grad)
    assert state.m is not None and state.v is not None
    t = state.t + 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.lr, state.eps
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_layers = []
    new_m = []
    new_v = []
    for (w, b), (dw, db), (mw, mb), (vw, vb) in zip(
        params.layers, grad, state.m, state.v
    ):
        mw = b1 * mw + (1.0 - b1) * dw
        mb = b1 * mb + (1.0 - b1) * db
        vw = b2 * vw + (1.0 - b2) * dw * dw
        vb = b2 * vb + (1.0 - b2) * db * db
        new_m.append((mw, mb))
        new_v.append((vw, vb))
        new_layers.append((
            w - lr * (mw / bc1) / (np.sqrt(vw / bc2) + eps),
            b - lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps),
        ))
    new_state = OptimizerState(
        kind="adam", lr=lr, beta1=b1, beta2=b2, eps=eps, t=t, m=new_m, v=new_v
    )
    return ModelParams(new_layers), new_state


def apply_step(params: ModelParams, grad: GradientSet,
               state: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """Dispatches to the configured update rule."""
    if state.kind == "sgd":
        return sgd_step(params, grad, state), state
    return adam_step(params, grad, state)
