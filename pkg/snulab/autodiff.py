"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every ``Tensor`` produced by an operation remembers the operation tag, its
parents and a backward rule mapping the upstream gradient to one gradient
per parent, so a tensor doubles as its own graph node.
"""
import contextlib
import logging
import math
import typing

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


logger = logging.getLogger(__name__)

BERNOULLI_EPSILON = 1e-7

OP_LEAF = "leaf"
OP_MATMUL = "matmul"
OP_ADD = "add"
OP_SUB = "sub"
OP_MUL = "mul"
OP_RELU = "relu"
OP_SIGMOID = "sigmoid"
OP_TANH = "tanh"
OP_IDENTITY = "identity"
OP_STEP = "step_surrogate"
OP_SOFTMAX_XENT = "softmax_xent"
OP_BERNOULLI_NLL = "bernoulli_nll"
OP_CONV2D = "conv2d"
OP_MAXPOOL2D = "maxpool2d"
OP_RESHAPE = "reshape"
OP_SUM = "sum"

_grad_state = dict(enabled=True)


class DimensionException(Exception):

    def __init__(self, message):
        super().__init__(message)


class ContractException(Exception):

    def __init__(self, message):
        super().__init__(message)


class DomainException(Exception):

    def __init__(self, message):
        super().__init__(message)


class NonFiniteException(Exception):

    def __init__(self, message):
        super().__init__(message)


class InternalException(Exception):

    def __init__(self, message):
        super().__init__(message)


class Tensor(object):

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_consumed")
    data: np.ndarray
    requires_grad: bool
    grad: typing.Optional[np.ndarray]
    op: str
    parents: typing.Tuple["Tensor", ...]

    def __init__(self, data, requires_grad=False, op=OP_LEAF, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self._consumed = False

    @property
    def shape(self) -> typing.Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return len(self.parents) == 0

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractException("item() needs a single value, got shape {}".format(self.shape))
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None
        self._consumed = False

    def backward(self):
        backward(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return elementwise(OP_ADD, self, other)

    def __radd__(self, other):
        return elementwise(OP_ADD, other, self)

    def __sub__(self, other):
        return elementwise(OP_SUB, self, other)

    def __rsub__(self, other):
        return elementwise(OP_SUB, other, self)

    def __mul__(self, other):
        return elementwise(OP_MUL, self, other)

    def __rmul__(self, other):
        return elementwise(OP_MUL, other, self)

    def __neg__(self):
        return elementwise(OP_MUL, self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:  # pragma: no cover
        return "Tensor(op={}, shape={}, requires_grad={})".format(
            self.op, self.shape, self.requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def is_grad_enabled() -> bool:
    return _grad_state["enabled"]


@contextlib.contextmanager
def no_grad():
    previous = _grad_state["enabled"]
    _grad_state["enabled"] = False
    try:
        yield
    finally:
        _grad_state["enabled"] = previous


def _make(data, op, parents, rule) -> Tensor:
    if _grad_state["enabled"] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=rule)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: typing.Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def check_finite(tensor: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(tensor.data)):
        raise NonFiniteException("Non-finite value produced by {}".format(where))
    return tensor


def matmul(a, w) -> Tensor:
    a, w = as_tensor(a), as_tensor(w)
    if a.data.ndim != 2 or w.data.ndim != 2 or a.shape[1] != w.shape[0]:
        raise DimensionException("Cannot multiply {} by {}".format(a.shape, w.shape))

    def rule(up):
        return up @ w.data.T, a.data.T @ up

    return _make(a.data @ w.data, OP_MATMUL, (a, w), rule)


def elementwise(op: str, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionException("Shapes {} and {} do not broadcast for {}".format(
            a.shape, b.shape, op))

    if op == OP_ADD:
        def rule(up):
            return _unbroadcast(up, a.shape), _unbroadcast(up, b.shape)
        return _make(a.data + b.data, op, (a, b), rule)

    if op == OP_SUB:
        def rule(up):
            return _unbroadcast(up, a.shape), _unbroadcast(-up, b.shape)
        return _make(a.data - b.data, op, (a, b), rule)

    if op == OP_MUL:
        def rule(up):
            return _unbroadcast(up * b.data, a.shape), _unbroadcast(up * a.data, b.shape)
        return _make(a.data * b.data, op, (a, b), rule)

    raise ContractException("Unknown elementwise op {}".format(op))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def activation(kind: str, a) -> Tensor:
    a = as_tensor(a)

    if kind == OP_RELU:
        def rule(up):
            return (up * (a.data > 0),)
        return _make(np.maximum(a.data, 0.0), kind, (a,), rule)

    if kind == OP_SIGMOID:
        y = _sigmoid(a.data)

        def rule(up):
            return (up * y * (1.0 - y),)
        return _make(y, kind, (a,), rule)

    if kind == OP_TANH:
        y = np.tanh(a.data)

        def rule(up):
            return (up * (1.0 - y * y),)
        return _make(y, kind, (a,), rule)

    if kind == OP_IDENTITY:
        return a

    raise ContractException("Unknown activation {}".format(kind))


def step_surrogate(a) -> Tensor:
    """Heaviside step forward (strictly a > 0), 1 - tanh(a)^2 backward."""
    a = as_tensor(a)

    def rule(up):
        t = np.tanh(a.data)
        return (up * (1.0 - t * t),)

    return _make((a.data > 0).astype(np.float64), OP_STEP, (a,), rule)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionException("Cannot reshape {} to {}".format(original, tuple(shape)))

    def rule(up):
        return (up.reshape(original),)

    return _make(data, OP_RESHAPE, (a,), rule)


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)

    def rule(up):
        return (np.broadcast_to(up, a.shape).copy(),)

    return _make(np.array(a.data.sum()), OP_SUM, (a,), rule)


def _row_weights(mask, batch: int, reduction: str) -> typing.Tuple[np.ndarray, float]:
    weights = np.ones(batch) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if weights.shape[0] != batch:
        raise DimensionException("Mask of length {} for batch of {}".format(
            weights.shape[0], batch))
    if reduction == "sum":
        return weights, 1.0
    if reduction == "mean":
        total = float(weights.sum())
        return weights, total if total > 0 else 1.0
    raise ContractException("Unknown reduction {}".format(reduction))


def loss(kind: str, x, target, mask=None, reduction="mean") -> Tensor:
    """Scalar loss over a [batch x k] prediction.

    ``softmax_xent`` takes logits, ``bernoulli_nll`` takes probabilities and sums
    the k independent Bernoulli terms per row. Rows are averaged (``mean``) or
    summed (``sum``); ``mask`` weights rows, padded rows get weight 0.
    """
    x = as_tensor(x)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if x.data.ndim != 2 or t.shape != x.shape:
        raise DimensionException("Loss expects matching [batch x k] shapes, got {} and {}".format(
            x.shape, t.shape))

    weights, norm = _row_weights(mask, x.shape[0], reduction)

    if kind == OP_SOFTMAX_XENT:
        z = x.data - x.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_p = z - lse
        rows = -(t * log_p).sum(axis=1)
        value = float((weights * rows).sum() / norm)

        def rule(up):
            p = np.exp(log_p)
            g = p * t.sum(axis=1, keepdims=True) - t
            return (up * g * (weights / norm)[:, None],)

    elif kind == OP_BERNOULLI_NLL:
        if np.any(x.data < 0.0) or np.any(x.data > 1.0):
            raise DomainException("Probabilities outside [0, 1] passed to bernoulli_nll")
        if np.any((t != 0.0) & (t != 1.0)):
            raise DomainException("bernoulli_nll targets must be binary")
        p = np.clip(x.data, BERNOULLI_EPSILON, 1.0 - BERNOULLI_EPSILON)
        rows = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum(axis=1)
        value = float((weights * rows).sum() / norm)
        inside = (x.data >= BERNOULLI_EPSILON) & (x.data <= 1.0 - BERNOULLI_EPSILON)

        def rule(up):
            g = -(t / p - (1.0 - t) / (1.0 - p)) * inside
            return (up * g * (weights / norm)[:, None],)

    else:
        raise ContractException("Unknown loss {}".format(kind))

    return check_finite(_make(np.array(value), kind, (x,), rule), kind)


def _padding(size: int, k: int, stride: int, padding: str) -> typing.Tuple[int, int, int]:
    if padding == "valid":
        if k > size:
            raise DimensionException("Kernel extent {} exceeds input extent {}".format(k, size))
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = int(math.ceil(size / stride))
        total = max((out - 1) * stride + k - size, 0)
        if k > size + total:
            raise DimensionException("Kernel extent {} exceeds padded extent {}".format(
                k, size + total))
        return total // 2, total - total // 2, out
    raise ContractException("Unknown padding {}".format(padding))


def conv_output_shape(input_hw: typing.Tuple[int, int],
                      kernel_hw: typing.Tuple[int, int],
                      stride: int,
                      padding: str) -> typing.Tuple[int, int]:
    return (_padding(input_hw[0], kernel_hw[0], stride, padding)[2],
            _padding(input_hw[1], kernel_hw[1], stride, padding)[2])


def conv2d(x, kernel, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of [batch x c x h x w] with [f x c x kh x kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionException("Cannot convolve {} with kernel {}".format(x.shape, kernel.shape))
    if stride < 1:
        raise ContractException("Stride must be positive, got {}".format(stride))

    _, _, h, w = x.shape
    _, _, kh, kw = kernel.shape
    top, bottom, oh = _padding(h, kh, stride, padding)
    left, right, ow = _padding(w, kw, stride, padding)

    padded = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    windows = windows[:, :, :oh, :ow]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def rule(up):
        grad_kernel = np.tensordot(up, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                contribution = np.tensordot(up, kernel.data[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    contribution.transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, top:top + h, left:left + w]
        return grad_x, grad_kernel

    return _make(np.ascontiguousarray(out), OP_CONV2D, (x, kernel), rule)


def maxpool2d(x, window: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the lowest flat index."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionException("maxpool2d expects [batch x c x h x w], got {}".format(x.shape))
    b, c, h, w = x.shape
    if window < 1 or window > h or window > w:
        raise DimensionException("Pooling window {} larger than input {}x{}".format(window, h, w))

    oh, ow = h // window, w // window
    blocks = x.data[:, :, :oh * window, :ow * window] \
        .reshape(b, c, oh, window, ow, window) \
        .transpose(0, 1, 2, 4, 3, 5) \
        .reshape(b, c, oh, ow, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(up):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, arg[..., None], up[..., None], axis=-1)
        routed = routed.reshape(b, c, oh, ow, window, window) \
            .transpose(0, 1, 2, 4, 3, 5) \
            .reshape(b, c, oh * window, ow * window)
        grad = np.zeros_like(x.data)
        grad[:, :, :oh * window, :ow * window] = routed
        return (grad,)

    return _make(out, OP_MAXPOOL2D, (x,), rule)


def _topological_order(root: Tensor) -> typing.List[Tensor]:
    order = []
    state: typing.Dict[int, int] = dict()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise InternalException("Cycle detected at {} node".format(node.op))
        state[key] = 1
        stack.append((node, True))
        for parent in reversed(node.parents):
            if not parent.requires_grad:
                continue
            parent_state = state.get(id(parent))
            if parent_state == 1:
                raise InternalException("Cycle detected at {} node".format(parent.op))
            if parent_state is None:
                stack.append((parent, False))
    return order


def backward(root: Tensor):
    if root.size != 1:
        raise ContractException("backward needs a scalar root, got shape {}".format(root.shape))
    if not root.requires_grad:
        raise ContractException("Root does not depend on any tensor requiring gradients")
    if root._consumed:
        raise ContractException("backward already ran for this root; reset gradients first")

    order = _topological_order(root)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise ContractException("A leaf still holds a gradient; call zero_grad before backward")

    grads: typing.Dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        upstream = grads.pop(id(node), None)
        if upstream is None:
            continue
        node.grad = upstream
        if node.is_leaf:
            continue
        if node._backward is None:
            raise InternalException("Node {} has no backward rule".format(node.op))
        for parent, grad in zip(node.parents, node._backward(upstream)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = np.asarray(grad, dtype=np.float64)

    root._consumed = True


def zero_grad(tensors: typing.Iterable[Tensor]):
    for tensor in tensors:
        tensor.zero_grad()


def gradcheck(fn: typing.Callable[[], Tensor],
              tensors: typing.Sequence[Tensor],
              h: float = 1e-5,
              samples: typing.Optional[int] = None,
              rng: typing.Optional[np.random.Generator] = None) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` rebuilds the scalar loss from the current tensor values. With
    ``samples`` set, only that many scalars per tensor are perturbed.
    """
    zero_grad(tensors)
    backward(fn())
    # tensors the loss never reaches have a zero gradient
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    zero_grad(tensors)

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        indices = np.arange(tensor.size)
        if samples is not None and samples < tensor.size:
            indices = np.sort(rng.choice(tensor.size, size=samples, replace=False))
        for flat in indices:
            position = np.unravel_index(flat, tensor.shape)
            original = tensor.data[position]
            with no_grad():
                tensor.data[position] = original + h
                plus = fn().item()
                tensor.data[position] = original - h
                minus = fn().item()
            tensor.data[position] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad[position]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-3)
            worst = max(worst, error)

    logger.debug("gradcheck over {} tensors, max relative error {:.3e}".format(
        len(tensors), worst))
    return worst
