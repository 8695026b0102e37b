"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Tensors record the primitive that produced them and a closure mapping the upstream
gradient to parent gradients. ``Graph`` wraps a function of named input tensors so
that a whole forward pass can be run, checked for non-finite values node by node,
and differentiated. Complex values travel as real tensors with a trailing axis of 2
(real, imaginary).
"""

from collections.abc import Callable, Iterator, Mapping, Sequence
from contextlib import contextmanager
import logging
import threading
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shared.errors import GraphStateError, NonDifferentiableError, NonFiniteError, ShapeError


logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording parents (inference, frozen victims)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], tuple | list):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, upstream: np.ndarray | float | None = None) -> dict[int, np.ndarray]:
        if upstream is None:
            upstream = np.ones_like(self.data)
        return backprop(self, np.asarray(upstream, dtype=np.float64))


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, grad_fn: GradFn | None) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled():
        out.parents = parents
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data / b.data,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data**2, b.shape)),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _node(-x.data, (x,), "neg", lambda g: (-g,))


def pow_scalar(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data**exponent, (x,), "pow", lambda g: (g * exponent * x.data ** (exponent - 1),))


def sqrt(x) -> Tensor:
    return pow_scalar(x, 0.5)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def clip(x, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return _node(np.clip(x.data, low, high), (x,), "clip", lambda g: (g * inside,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.maximum(x.data, 0.0), (x,), "relu", lambda g: (g * (x.data > 0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), "tanh", lambda g: (g * (1.0 - out**2),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# Reductions and shape primitives
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(original),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        "concat",
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), "slice", grad_fn)


def take(x, indices: np.ndarray | Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis``; also serves embedding lookup and subcarrier permutation."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def grad_fn(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim))))
        return (full,)

    return _node(np.take(x.data, indices, axis=axis), (x,), "take", grad_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        )

    return _node(a.data @ b.data, (a, b), "matmul", grad_fn)


# ---------------------------------------------------------------------------
# Network primitives
# ---------------------------------------------------------------------------


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(x, weight, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """NCHW convolution (cross-correlation) with stride 1 or 2 and "same"/"valid" padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")

    _, _, height, width = x.shape
    kh, kw = weight.shape[2:]
    pad_h = _same_padding(height, kh, stride) if padding == "same" else (0, 0)
    pad_w = _same_padding(width, kw, stride) if padding == "same" else (0, 0)
    padded = np.pad(x.data, ((0, 0), (0, 0), pad_h, pad_w))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {height}x{width}")

    out = np.einsum("nchwij,ocij->nohw", windows, weight.data, optimize=True)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def grad_fn(g):
        grad_w = np.einsum("nohw,nchwij->ocij", g, windows, optimize=True)
        grad_windows = np.einsum("nohw,ocij->nchwij", g, weight.data, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += grad_windows[
                    ..., i, j
                ]
        grad_x = grad_padded[:, :, pad_h[0] : pad_h[0] + height, pad_w[0] : pad_w[0] + width]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return _node(out, parents, "conv2d", grad_fn)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _node(out, (x,), "upsample2x", lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return _node(out, (x,), "softmax", lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def _log_softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data - b.data
    scale = 2.0 / diff.size

    def grad_fn(g):
        grad = g * scale * diff
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _node(np.asarray(np.mean(diff**2)), (a, b), "mse", grad_fn)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)`` (last axis)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy targets {targets.shape} do not match logits {logits.shape}")
    weights = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ShapeError("cross_entropy weights sum to zero")

    log_probs = _log_softmax(logits.data)
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum() / total

    def grad_fn(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad * (weights / total)[..., None],)

    return _node(np.asarray(loss), (logits,), "cross_entropy", grad_fn)


def l1_norm(x) -> Tensor:
    return tsum(absolute(x))


def mean_abs(x) -> Tensor:
    return mean(absolute(x))


def argmax(x, axis: int = -1) -> Tensor:
    """Index of the maximum (lowest index on ties). Not differentiable."""
    x = as_tensor(x)
    return _node(np.argmax(x.data, axis=axis).astype(np.float64), (x,), "argmax", None)


def straight_through(x, fn: Callable[[np.ndarray], np.ndarray], op: str = "straight_through") -> Tensor:
    """Forward ``fn(x)``, backward identity (used for constellation re-quantisation)."""
    x = as_tensor(x)
    return _node(np.asarray(fn(x.data), dtype=np.float64), (x,), op, lambda g: (g,))


# ---------------------------------------------------------------------------
# Complex-as-2-channel primitives
# ---------------------------------------------------------------------------


def to_pair(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1).astype(np.float64)


def to_complex(pair: np.ndarray | Tensor) -> np.ndarray:
    data = pair.data if isinstance(pair, Tensor) else np.asarray(pair)
    return data[..., 0] + 1j * data[..., 1]


def complex_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 2 or b.shape[-1] != 2:
        raise ShapeError(f"complex operands need a trailing axis of 2, got {a.shape} and {b.shape}")
    ar, ai = a.data[..., 0], a.data[..., 1]
    br, bi = b.data[..., 0], b.data[..., 1]
    out = np.stack([ar * br - ai * bi, ar * bi + ai * br], axis=-1)

    def grad_fn(g):
        gr, gi = g[..., 0], g[..., 1]
        grad_a = np.stack([gr * br + gi * bi, gi * br - gr * bi], axis=-1)
        grad_b = np.stack([gr * ar + gi * ai, gi * ar - gr * ai], axis=-1)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _node(out, (a, b), "complex_mul", grad_fn)


def complex_conj(x) -> Tensor:
    x = as_tensor(x)
    sign = np.array([1.0, -1.0])
    return _node(x.data * sign, (x,), "complex_conj", lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def topological_order(roots: Sequence[Tensor]) -> list[Tensor]:
    """Nodes reachable from ``roots``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False) for root in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(root: Tensor, upstream: np.ndarray) -> dict[int, np.ndarray]:
    """Accumulate gradients from ``root`` into every reachable leaf that requires them.

    Leaf ``.grad`` is overwritten (not accumulated across calls). Returns ``{id(leaf): grad}``.
    """
    if upstream.shape != root.shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} does not match output {root.shape}")
    order = topological_order([root])
    pending: dict[int, np.ndarray] = {id(root): upstream}
    leaf_grads: dict[int, np.ndarray] = {}

    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                node.grad = np.zeros_like(node.data) if grad is None else np.array(grad, dtype=np.float64)
                leaf_grads[id(node)] = node.grad
            continue
        if grad is None or not node.requires_grad:
            continue
        if node.grad_fn is None:
            raise NonDifferentiableError(f"non-differentiable primitive '{node.op}' lies on the gradient path")
        for parent, parent_grad in zip(node.parents, node.grad_fn(grad), strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return leaf_grads


class Graph:
    """
    A named computation over input tensors.

    ``fn`` receives the inputs as keyword arguments and returns a Tensor (exposed as
    output ``"out"``) or a mapping of named Tensors. Parameters captured by ``fn``
    are leaves like any other; their ``name`` is used to key their gradients.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]], inputs: Mapping[str, tuple | None] | Sequence[str], name: str = "graph"):
        self.fn = fn
        self.name = name
        self.input_shapes: dict[str, tuple | None] = dict(inputs) if isinstance(inputs, Mapping) else dict.fromkeys(inputs)
        self.inputs: dict[str, Tensor] | None = None
        self.outputs: dict[str, Tensor] | None = None
        self.nodes: list[Tensor] = []

    def _check_inputs(self, inputs: Mapping[str, Any]) -> dict[str, Tensor]:
        unknown = set(inputs) - set(self.input_shapes)
        if unknown:
            raise ShapeError(f"{self.name}: unknown input(s) {sorted(unknown)}")
        missing = set(self.input_shapes) - set(inputs)
        if missing:
            raise ShapeError(f"{self.name}: missing input(s) {sorted(missing)}")
        leaves = {}
        for key, value in inputs.items():
            tensor = as_tensor(value)
            expected = self.input_shapes[key]
            if expected is not None and (
                len(expected) != tensor.ndim or any(e is not None and e != s for e, s in zip(expected, tensor.shape, strict=True))
            ):
                raise ShapeError(f"{self.name}: input '{key}' has shape {tensor.shape}, expected {expected}")
            leaves[key] = tensor
        return leaves

    def forward(self, inputs: Mapping[str, Any]) -> dict[str, Tensor]:
        leaves = self._check_inputs(inputs)
        result = self.fn(**leaves)
        outputs = {"out": result} if isinstance(result, Tensor) else dict(result)
        nodes = topological_order(list(outputs.values()))
        for index, node in enumerate(nodes):
            if not np.all(np.isfinite(node.data)):
                raise NonFiniteError(f"{self.name}: non-finite value at node {index} ({node.op})", node_id=index, op=node.op)
        self.inputs, self.outputs, self.nodes = leaves, outputs, nodes
        return outputs

    def gradient_leaves(self) -> dict[str, Tensor]:
        """Leaves that require gradients, keyed by input name, parameter name, or ``leaf<i>``."""
        if self.inputs is None:
            raise GraphStateError(f"{self.name}: forward has not been run")
        by_id = {id(tensor): key for key, tensor in self.inputs.items()}
        named = {}
        for index, node in enumerate(self.nodes):
            if node.is_leaf and node.requires_grad:
                key = by_id.get(id(node)) or node.name or f"leaf{index}"
                named[key] = node
        return named

    def backward(self, output_name: str = "out", upstream: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphStateError(f"{self.name}: backward called before forward")
        if output_name not in self.outputs:
            raise ShapeError(f"{self.name}: unknown output '{output_name}'")
        output = self.outputs[output_name]
        upstream = np.ones_like(output.data) if upstream is None else np.asarray(upstream, dtype=np.float64)
        grads = backprop(output, upstream)
        return {key: grads[id(leaf)] for key, leaf in self.gradient_leaves().items() if id(leaf) in grads}


def forward(graph: Graph, inputs: Mapping[str, Any]) -> dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, output_name: str = "out", upstream: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
    return graph.backward(output_name, upstream)


def finite_diff_check(
    graph: Graph,
    inputs: Mapping[str, Any],
    step: float = 1e-5,
    output_name: str = "out",
    analytic: Mapping[str, np.ndarray] | None = None,
    max_per_leaf: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Largest relative error between backward() and central differences of sum(output).

    ``analytic`` overrides the gradients under test (fault injection). With
    ``max_per_leaf`` only that many scalars per leaf are checked, picked by ``rng``.
    """
    if step <= 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    graph.forward(inputs)
    leaves = graph.gradient_leaves()
    if analytic is None:
        analytic = graph.backward(output_name)
    frozen_inputs = dict(graph.inputs)

    def objective() -> float:
        return float(graph.forward(frozen_inputs)[output_name].data.sum())

    worst = 0.0
    for key, leaf in leaves.items():
        grad = np.asarray(analytic.get(key, np.zeros_like(leaf.data)))
        indices = np.arange(leaf.size)
        if max_per_leaf is not None and leaf.size > max_per_leaf:
            indices = (rng or np.random.default_rng(0)).choice(leaf.size, size=max_per_leaf, replace=False)
        for flat in indices:
            original = leaf.data.flat[flat]
            leaf.data.flat[flat] = original + step
            plus = objective()
            leaf.data.flat[flat] = original - step
            minus = objective()
            leaf.data.flat[flat] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(grad.flat[flat])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
            if error > worst:
                logger.debug(f"{graph.name}: {key}[{flat}] analytic={exact:.6e} numeric={numeric:.6e}")
                worst = error
    graph.forward(frozen_inputs)
    return worst
