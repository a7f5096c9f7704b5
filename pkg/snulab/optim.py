import logging
import math
import typing

import numpy as np

import snulab.autodiff as ad


logger = logging.getLogger(__name__)


OPTIMIZERS = ("sgd", "rmsprop", "adam")
DEFAULT_HYPERPARAMETERS = dict(
    sgd=dict(),
    rmsprop=dict(rho=0.9, eps=1e-8),
    adam=dict(beta1=0.9, beta2=0.999, eps=1e-8),
)


def update_deltas(kind: str,
                  grads: typing.Sequence[np.ndarray],
                  state: dict,
                  lr: float,
                  **hyper) -> typing.List[np.ndarray]:
    """Parameter increments for one optimizer step; ``state`` is updated in place."""
    if kind not in OPTIMIZERS:
        raise ad.ContractException("Unknown optimizer {}".format(kind))
    settings = dict(DEFAULT_HYPERPARAMETERS[kind])
    settings.update(hyper)

    if kind == "sgd":
        return [-lr * g for g in grads]

    if kind == "rmsprop":
        rho, eps = settings["rho"], settings["eps"]
        squares = state.setdefault("v", [np.zeros_like(g) for g in grads])
        deltas = []
        for idx, g in enumerate(grads):
            squares[idx] = rho * squares[idx] + (1.0 - rho) * g * g
            deltas.append(-lr * g / (np.sqrt(squares[idx]) + eps))
        return deltas

    beta1, beta2, eps = settings["beta1"], settings["beta2"], settings["eps"]
    moments = state.setdefault("m", [np.zeros_like(g) for g in grads])
    squares = state.setdefault("v", [np.zeros_like(g) for g in grads])
    state["t"] = state.get("t", 0) + 1
    correction1 = 1.0 - beta1 ** state["t"]
    correction2 = 1.0 - beta2 ** state["t"]
    deltas = []
    for idx, g in enumerate(grads):
        moments[idx] = beta1 * moments[idx] + (1.0 - beta1) * g
        squares[idx] = beta2 * squares[idx] + (1.0 - beta2) * g * g
        m_hat = moments[idx] / correction1
        v_hat = squares[idx] / correction2
        deltas.append(-lr * m_hat / (np.sqrt(v_hat) + eps))
    return deltas


def optimizer_step(kind: str,
                   params: typing.Sequence[np.ndarray],
                   grads: typing.Sequence[np.ndarray],
                   state: dict,
                   lr: float,
                   **hyper) -> typing.Tuple[typing.List[np.ndarray], dict]:
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ad.DimensionException("Parameters and gradients do not align")
    deltas = update_deltas(kind, grads, state, lr, **hyper)
    return [p + d for p, d in zip(params, deltas)], state


def clip_grad_norm(tensors: typing.Sequence[ad.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in tensors if t.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / total
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


class Optimizer(object):

    def __init__(self, kind: str, lr: float, **hyper):
        if kind not in OPTIMIZERS:
            raise ad.ContractException("Unknown optimizer {}".format(kind))
        self.kind = kind
        self.lr = lr
        self.hyper = hyper
        self.state: dict = dict()

    def deltas(self, tensors: typing.Sequence[ad.Tensor]) -> typing.List[np.ndarray]:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        return update_deltas(self.kind, grads, self.state, self.lr, **self.hyper)
