"""Reverse-mode differentiation over a linear tape of numpy operations.

Every operation appends a :class:`Node` to the tape that owns its inputs.
Because nodes are recorded in creation order the tape is already a
topological order, so :func:`backward` simply walks it in reverse.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_EPS = 1e-12


class Node:
    __slots__ = ("tape", "value", "requires_grad", "parents", "backward_fn", "index")

    def __init__(self, tape, value, requires_grad, parents=(), backward_fn=None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records operations; parameters are registered by name."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already on tape")
        node = Node(self, np.asarray(value, dtype=np.float64), True)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), False)

    def record(self, value, parents, backward_fn) -> Node:
        needs = any(p.requires_grad for p in parents)
        return Node(self, value, needs, tuple(parents), backward_fn if needs else None)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to every named parameter."""
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.backward_fn is None:
            if g is not None:
                grads[node.index] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out = {}
    for name, node in tape.params.items():
        g = grads.get(node.index)
        out[name] = np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_node(tape, x):
    return x if isinstance(x, Node) else tape.const(x)


def add(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    return a.tape.record(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    return a.tape.record(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    return a.tape.record(
        a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Node, c: float) -> Node:
    """Multiply by a constant that carries no gradient."""
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Node, b) -> Node:
    b = _as_node(a.tape, b)
    return a.tape.record(
        a.value @ b.value, (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def linear(x: Node, w: Node, b: Node) -> Node:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    return add(matmul(x, transpose(w)), b)


def transpose(a: Node) -> Node:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def square(a: Node) -> Node:
    return a.tape.record(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def mean(a: Node) -> Node:
    n = a.value.size
    return a.tape.record(
        np.asarray(a.value.mean()), (a,),
        lambda g: (np.full(a.shape, float(g) / n),),
    )


def sum_rows(a: Node) -> Node:
    """Sum over the last axis of a 2-D node, giving one value per row."""
    return a.tape.record(
        a.value.sum(axis=1), (a,),
        lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),),
    )


def detach(a: Node) -> Node:
    return a.tape.const(a.value.copy())


def softmax(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return a.tape.record(p, (a,), fn)


def log_clamped(a: Node, eps: float = PROB_EPS) -> Node:
    """``ln(max(a, eps))``; entries at the clamp receive no gradient."""
    live = a.value > eps
    safe = np.where(live, a.value, eps)
    return a.tape.record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def pick(a: Node, labels) -> Node:
    """Select ``a[i, labels[i]]`` for each row."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def fn(g):
        out = np.zeros_like(a.value)
        out[rows, labels] = g
        return (out,)

    return a.tape.record(a.value[rows, labels], (a,), fn)


def im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C*9) patches for a 3x3 kernel with padding 1."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, c * 9)


def col2im(cols: np.ndarray, x_shape) -> np.ndarray:
    b, c, h, w = x_shape
    patches = cols.reshape(b, h, w, c, 3, 3)
    out = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            out[:, :, di:di + h, dj:dj + w] += patches[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def conv2d_value(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    cols = im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.transpose(0, 3, 1, 2)


def conv2d(x: Node, w: Node, b: Node) -> Node:
    """3x3 convolution, stride 1, zero padding 1."""
    cols = im2col(x.value)
    wm = w.value.reshape(w.shape[0], -1)
    out = (cols @ wm.T + b.value).transpose(0, 3, 1, 2)

    def fn(g):
        gy = g.transpose(0, 2, 3, 1)  # B, H, W, O
        gw = np.einsum("bhwo,bhwk->ok", gy, cols).reshape(w.shape)
        gb = gy.sum(axis=(0, 1, 2))
        gx = col2im(gy @ wm, x.shape) if x.requires_grad else None
        return (gx, gw, gb)

    return x.tape.record(out, (x, w, b), fn)


def maxpool2_value(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def maxpool2(x: Node) -> Node:
    b, c, h, w = x.shape
    blocks = x.value.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(b, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(b, c, h, w),)

    return x.tape.record(out, (x,), fn)
