"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Node` holds a value and, when it takes part in a differentiable
computation, the list of its parents together with the vector-Jacobian
product closure for each of them. :func:`backward` walks the graph once in
reverse topological order.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .exceptions import Invalid, NumericFailure

logger = logging.getLogger(__name__)

_state = threading.local()


def grad_enabled():
    return getattr(_state, 'enabled', True)


@contextmanager
def no_grad():
    """Evaluate without recording parents (per thread)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    __array_ufunc__ = None

    def __init__(self, value, parents=(), requires_grad=False, name=None, op='leaf'):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not self.parents else None
        self.name = name
        self.op = op

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(value, name=None):
    return Node(value, name=name, op='constant')


def parameter(value, name=None):
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name, op='parameter')


def as_node(value):
    return value if isinstance(value, Node) else constant(value)


def _make(value, parents, op):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericFailure(f"{op} produced non finite values")
    if not grad_enabled():
        return Node(value, op=op)
    tracked = tuple((node, vjp) for node, vjp in parents if node.requires_grad)
    return Node(value, parents=tracked, requires_grad=bool(tracked), op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value + b.value,
                 [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))], 'add')


def sub(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value - b.value,
                 [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))], 'sub')


def mul(a, b):
    a, b = as_node(a), as_node(b)
    return _make(a.value * b.value,
                 [(a, lambda g: _unbroadcast(g * b.value, a.shape)),
                  (b, lambda g: _unbroadcast(g * a.value, b.shape))], 'mul')


def div(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(out,
                 [(a, lambda g: _unbroadcast(g / b.value, a.shape)),
                  (b, lambda g: _unbroadcast(-g * out / b.value, b.shape))], 'div')


def matmul(a, b):
    """``a[..., m] @ b[m, n]``; ``b`` must be two dimensional."""
    a, b = as_node(a), as_node(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise Invalid(f"matmul shapes {a.shape} and {b.shape} are not aligned")

    def grad_a(g):
        return g @ b.value.T

    def grad_b(g):
        return a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])

    return _make(a.value @ b.value, [(a, grad_a), (b, grad_b)], 'matmul')


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, [(a, lambda g: g * out)], 'exp')


def log(a):
    a = as_node(a)
    return _make(np.log(a.value), [(a, lambda g: g / a.value)], 'log')


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, [(a, lambda g: g * (1.0 - out ** 2))], 'tanh')


def elu(a):
    a = as_node(a)
    negative = np.expm1(np.minimum(a.value, 0.0))
    out = np.where(a.value > 0, a.value, negative)
    return _make(out, [(a, lambda g: g * np.where(a.value > 0, 1.0, negative + 1.0))], 'elu')


def relu(a):
    a = as_node(a)
    return _make(np.maximum(a.value, 0.0), [(a, lambda g: g * (a.value > 0))], 'relu')


def sigmoid(a):
    a = as_node(a)
    out = expit(a.value)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))], 'sigmoid')


def clip(a, low, high):
    a = as_node(a)
    inside = (a.value > low) & (a.value < high)
    return _make(np.clip(a.value, low, high), [(a, lambda g: g * inside)], 'clip')


def sum_(a, axis=None, keepdims=False):
    a = as_node(a)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(a.value.sum(axis=axis, keepdims=keepdims), [(a, grad)], 'sum')


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def take(a, index):
    """Basic or advanced indexing (``slice`` in the op set)."""
    a = as_node(a)

    def grad(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return out

    return _make(a.value[index], [(a, grad)], 'slice')


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]

    def grad_for(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _make(np.concatenate([n.value for n in nodes], axis=axis),
                 [(n, grad_for(i)) for i, n in enumerate(nodes)], 'concat')


def broadcast_to(a, shape):
    a = as_node(a)
    return _make(np.broadcast_to(a.value, shape), [(a, lambda g: _unbroadcast(g, a.shape))], 'broadcast')


def reshape(a, shape):
    a = as_node(a)
    return _make(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))], 'reshape')


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Store d(loss)/d(leaf) on every leaf that requires a gradient.

    Returns a dictionary mapping each such leaf to its gradient. Intermediate
    gradients are dropped as soon as they have been propagated."""
    if loss.value.size != 1:
        raise Invalid(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericFailure(f"non finite gradient at node {node.name or node.op}")
        if node.is_leaf:
            if node.requires_grad:
                node.grad = grad
                leaves[node] = node.grad
            continue
        for parent, vjp in node.parents:
            contribution = vjp(grad)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contribution
            else:
                grads[id(parent)] = contribution
    return leaves


def finite_difference_gradient(f, params, h=1e-5, coords=None):
    """Central differences of ``f(params)`` for every coordinate of ``params``.

    ``params`` maps names to float64 arrays which are perturbed in place and
    restored afterwards. ``coords`` optionally restricts a name to a list of
    flat indices; coordinates not listed get a NaN estimate."""
    if h <= 0:
        raise Invalid(f'key: "h" contains invalid item "{h}": step must be positive')

    def evaluate():
        value = float(f(params))
        if not np.isfinite(value):
            raise NumericFailure(f"finite difference objective returned {value}")
        return value

    estimate = {}
    for name, array in params.items():
        flat = array.reshape(-1)
        if not np.shares_memory(flat, array):
            raise Invalid(f'key: "{name}" contains invalid item: parameter array is not contiguous')
        indices = range(flat.size) if coords is None or name not in coords else coords[name]
        grad = np.full(flat.size, np.nan) if coords is not None and name in coords else np.zeros(flat.size)
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            upper = evaluate()
            flat[i] = original - h
            lower = evaluate()
            flat[i] = original
            grad[i] = (upper - lower) / (2.0 * h)
        estimate[name] = grad.reshape(array.shape)
    return estimate


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def max_relative_error(analytic, numeric):
    """Largest relative error over the coordinates both maps estimate."""
    worst = 0.0
    for name, approx in numeric.items():
        mask = np.isfinite(approx)
        if mask.any():
            worst = max(worst, float(relative_error(analytic[name][mask], approx[mask]).max()))
    return worst


def make_rng(seed):
    return np.random.default_rng(seed)


def split_rng(rng, n):
    return rng.spawn(n)
