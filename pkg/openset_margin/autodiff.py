"""
Autodiff for OpenSetMargin - Reverse-mode differentiation module.
Builds computation graphs over dense float64 matrices and back-propagates gradients through them.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from openset_margin.errors import ConfigValidationError, ContractError, ShapeError

logger = logging.getLogger('OpenSetMargin.Autodiff')

LOG_EPS = 1e-12
TRAIN = 'train'
EVAL = 'eval'

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TensorNode:
    """Dense 2-D matrix taking part in a differentiable computation"""

    __slots__ = ('data', 'grad', 'parents', 'backward_rule', 'requires_grad', 'name')

    def __init__(self, data, parents=(), backward_rule=None, requires_grad=False, name=None):
        """
        Initialize a graph node

        Args:
            data (array-like): Values; scalars become 1x1 and vectors become 1xn
            parents (tuple): Input nodes this node was computed from
            backward_rule (callable): Maps this node's gradient to one contribution per parent
            requires_grad (bool): Whether gradients must flow into this node
            name (str): Optional label used in error messages
        """
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"TensorNode holds 2-D matrices only, got shape {arr.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        """Return the value of a 1x1 node as a float"""
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ''
        return f"TensorNode{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_as_node(other), self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _as_node(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_node(other))


@dataclass(frozen=True)
class GradScale:
    """Multiplier applied to gradients crossing a gradient-reversal node"""

    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ContractError(f"gradient reversal lambda must be >= 0, got {self.lam}")


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer"""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, width):
        return cls(np.zeros((1, width)), np.ones((1, width)))


def constant(data, name=None):
    """Create a node that never receives gradient"""
    return TensorNode(data, name=name)


def parameter(data, name=None):
    """Create a trainable leaf node owning a copy of data"""
    return TensorNode(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def detach(x):
    """Cut x out of the graph, keeping its values"""
    return TensorNode(x.data.copy(), name=x.name)


def zero_grad(nodes):
    for node in nodes:
        node.zero_grad()


def _as_node(value):
    return value if isinstance(value, TensorNode) else constant(value)


def _node(data, parents, rule):
    return TensorNode(data, parents=parents, backward_rule=rule)


def _broadcast_shape(a, b, op_name):
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}")
    return tuple(shape)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# --- binary ops -------------------------------------------------------------

def matmul(a, b):
    """Matrix product a @ b"""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), rule)


def add(a, b):
    _broadcast_shape(a, b, 'add')

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), rule)


def sub(a, b):
    _broadcast_shape(a, b, 'sub')

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), rule)


def mul(a, b):
    _broadcast_shape(a, b, 'mul')

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), rule)


def div(a, b):
    _broadcast_shape(a, b, 'div')
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), rule)


# --- elementwise ops --------------------------------------------------------

def scale(x, c):
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def log(x, eps=LOG_EPS):
    """Natural log with inputs clamped to eps; the clamped region has zero slope"""
    safe = np.maximum(x.data, eps)

    def rule(g):
        return (np.where(x.data > eps, g / safe, 0.0),)

    return _node(np.log(safe), (x,), rule)


def exp(x):
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def square(x):
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x):
    """Square root of a nonnegative input; slope taken as 0 at exactly 0"""
    out = np.sqrt(np.maximum(x.data, 0.0))

    def rule(g):
        with np.errstate(divide='ignore', invalid='ignore'):
            slope = np.where(out > 0.0, 0.5 / out, 0.0)
        return (g * slope,)

    return _node(out, (x,), rule)


def power(x, p):
    """x ** p for x >= 0 with 0 ** 0 == 1"""
    p = float(p)
    base = np.maximum(x.data, 0.0)
    out = np.power(base, p)

    def rule(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        with np.errstate(divide='ignore', invalid='ignore'):
            slope = np.where(base > 0.0, p * np.power(base, p - 1.0), 0.0)
        return (g * slope,)

    return _node(out, (x,), rule)


def relu_leaky(x, alpha=0.01):
    slope = np.where(x.data > 0.0, 1.0, alpha)
    return _node(x.data * slope, (x,), lambda g: (g * slope,))


def relu(x):
    return relu_leaky(x, 0.0)


def clamp_min(x, lo):
    keep = x.data > lo
    return _node(np.where(keep, x.data, lo), (x,), lambda g: (np.where(keep, g, 0.0),))


# --- reductions and indexing ------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    """Sum of all entries (1x1), or along an axis with the other kept"""
    if axis is None:
        return _node(x.data.sum().reshape(1, 1), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = x.data.sum(axis=axis, keepdims=True)
    return _node(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x, axis=None):
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


def take_rows(x, index):
    """Gather rows by integer index"""
    index = np.asarray(index, dtype=np.int64)

    def rule(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _node(x.data[index], (x,), rule)


def take_cols(x, index):
    """Gather columns by integer index"""
    index = np.asarray(index, dtype=np.int64)

    def rule(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad.T, index, g.T)
        return (grad,)

    return _node(x.data[:, index], (x,), rule)


# --- row-wise probability ops ----------------------------------------------

def softmax_rows(logits):
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (logits,), rule)


def log_softmax_rows(logits):
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _node(out, (logits,), rule)


# --- layers -----------------------------------------------------------------

def batch_norm(x, gamma, beta, state, mode=TRAIN, momentum=0.9, eps=1e-5):
    """
    Per-feature normalization with learned scale and shift

    Args:
        x (TensorNode): Batch of shape (n, m)
        gamma (TensorNode): Scale of shape (1, m)
        beta (TensorNode): Shift of shape (1, m)
        state (BatchNormState): Running statistics, updated in train mode only
        mode (str): 'train' or 'eval'
        momentum (float): Share of the old running statistic kept per update
        eps (float): Variance guard
    """
    n = x.shape[0]
    if mode == TRAIN:
        if n < 2:
            raise ConfigValidationError("batch_norm in train mode needs a batch of at least 2 samples",
                                        field='batch_size')
        mu = x.data.mean(axis=0, keepdims=True)
        var = x.data.var(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mu) * inv_std
        state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mu
        state.running_var = momentum * state.running_var + (1.0 - momentum) * var * n / (n - 1)

        def rule(g):
            dx_hat = g * gamma.data
            dx = inv_std / n * (n * dx_hat - dx_hat.sum(axis=0, keepdims=True)
                                - x_hat * (dx_hat * x_hat).sum(axis=0, keepdims=True))
            return dx, (g * x_hat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    elif mode == EVAL:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        x_hat = (x.data - state.running_mean) * inv_std

        def rule(g):
            return (g * gamma.data * inv_std, (g * x_hat).sum(axis=0, keepdims=True),
                    g.sum(axis=0, keepdims=True))

    else:
        raise ConfigValidationError(f"unknown mode '{mode}', expected 'train' or 'eval'", field='mode')

    return _node(gamma.data * x_hat + beta.data, (x, gamma, beta), rule)


def grad_reverse(x, lam=1.0):
    """Identity forward; backward multiplies the incoming gradient by -lam"""
    factor = GradScale(lam).lam
    return _node(x.data.copy(), (x,), lambda g: (-factor * g,))


# --- backward pass ----------------------------------------------------------

def _topological_order(root):
    order = []
    visited = set()
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into the grad of every ancestor of a 1x1 root"""
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got shape {root.shape}")

    pending = {id(root): np.ones((1, 1))}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node.backward_rule is None:
            continue
        for parent, contribution in zip(node.parents, node.backward_rule(g)):
            if contribution is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + contribution if key in pending else contribution
