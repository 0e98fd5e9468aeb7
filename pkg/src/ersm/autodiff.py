"""Reverse-mode automatic differentiation over the tensor kernel set.

A :class:`Tape` records :class:`Node` objects in creation order. Nodes can
only reference earlier nodes, so creation order is a valid topological
order and the backward sweep is a single reverse pass that visits each node
exactly once. Every op computes its forward value through
:mod:`ersm.tensor` and registers a closure that scatters the upstream
gradient to its parents.

Subgradient conventions (the forward pass is piecewise smooth):
relu'(0) = 0; max-pool ties follow the recorded (lowest-index) argmax; the
eps in ``l2norm_rows`` is a constant, and the norm-direction term of its
gradient is dropped on exactly-zero rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

__all__ = [
    "Node",
    "Tape",
    "UnsupportedOpError",
    "GraphError",
    "register_op",
    "supported_ops",
    "grad_check",
    "GradCheckReport",
]


class UnsupportedOpError(ValueError):
    """``record`` was asked for an op outside the supported set."""


class GraphError(RuntimeError):
    """Tape misuse: non-scalar root or a repeated backward pass."""


class Node:
    """One recorded value: op tag, parents, and a lazily-filled gradient."""

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "backward_fn")

    def __init__(self, value, op: str, parents=(), requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = parents
        self.grad = None
        self.requires_grad = requires_grad
        self.backward_fn = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def _accum(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    # rebinding (never in-place) keeps shared gradient buffers safe
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_reduced(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in sorted(a % len(shape) for a in axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


class Tape:
    """Single-owner recording of one computation; not shareable across
    threads while recording. Distinct tapes are independent."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ran_backward = False

    # -- node creation ------------------------------------------------------

    def _emit(self, value, op: str, parents) -> Node:
        node = Node(value, op, parents, requires_grad=any(p.requires_grad for p in parents))
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        node = Node(value, "constant")
        self.nodes.append(node)
        return node

    def variable(self, value) -> Node:
        node = Node(value, "variable", requires_grad=True)
        self.nodes.append(node)
        return node

    def _wrap(self, x) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def record(self, op: str, *inputs, **kwargs) -> Node:
        """Record one op by name. Raises :class:`UnsupportedOpError` for ops
        outside the supported set."""
        try:
            build = _OPS[op]
        except KeyError:
            raise UnsupportedOpError(
                f"unsupported op {op!r}; supported ops: {', '.join(supported_ops())}"
            ) from None
        return build(self, *(self._wrap(x) for x in inputs), **kwargs)

    # -- convenience wrappers -----------------------------------------------

    def add(self, a, b) -> Node:
        return self.record("add", a, b)

    def sub(self, a, b) -> Node:
        return self.record("sub", a, b)

    def mul(self, a, b) -> Node:
        return self.record("mul", a, b)

    def scale(self, a, s: float) -> Node:
        return self.record("scale", a, s=s)

    def matmul(self, a, b) -> Node:
        return self.record("matmul", a, b)

    def dot(self, a, b) -> Node:
        return self.record("dot", a, b)

    def relu(self, a) -> Node:
        return self.record("relu", a)

    def sigmoid(self, a) -> Node:
        return self.record("sigmoid", a)

    def softplus(self, a) -> Node:
        return self.record("softplus", a)

    def l2norm_rows(self, a, eps: float = 1e-8) -> Node:
        return self.record("l2norm_rows", a, eps=eps)

    def sum(self, a, axis=None) -> Node:
        return self.record("sum", a, axis=axis)

    def mean(self, a, axis=None) -> Node:
        return self.record("mean", a, axis=axis)

    def reshape(self, a, shape) -> Node:
        return self.record("reshape", a, shape=shape)

    def conv2d(self, x, kernels, bias, stride: int = 1, pad: int = 0) -> Node:
        return self.record("conv2d", x, kernels, bias, stride=stride, pad=pad)

    def maxpool2d(self, x, window: int) -> Node:
        return self.record("maxpool2d", x, window=window)

    def unfold(self, x, d: int) -> Node:
        return self.record("unfold", x, d=d)

    def fold(self, tokens, geometry) -> Node:
        return self.record("fold", tokens, geometry=geometry)

    def cross_entropy_logits(self, logits, label: int) -> Node:
        return self.record("cross_entropy_logits", logits, label=label)

    # -- backward ------------------------------------------------------------

    def backward(self, root: Node) -> None:
        """Accumulate gradients of the scalar ``root`` into every
        requires-grad node; constants are left untouched. A second call on
        the same tape is an error."""
        if self._ran_backward:
            raise GraphError("backward already ran on this tape")
        if not isinstance(root, Node):
            raise GraphError("backward root must be a Node")
        if root.value.ndim != 0:
            raise GraphError(f"backward root must be scalar, got shape {root.value.shape}")
        self._ran_backward = True
        root.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# op registry


_OPS: dict = {}


def register_op(name: str, builder) -> None:
    """Add one op to the supported set. ``builder(tape, *nodes, **kwargs)``
    must emit a Node on the tape and attach its backward closure."""
    _OPS[name] = builder


def supported_ops() -> list[str]:
    return sorted(_OPS)


def _op_add(tape, a, b):
    out = tape._emit(T.add(a.value, b.value), "add", (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g, a.value.shape))
            _accum(b, _unbroadcast(g, b.value.shape))
        out.backward_fn = backward
    return out


def _op_sub(tape, a, b):
    out = tape._emit(T.sub(a.value, b.value), "sub", (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g, a.value.shape))
            _accum(b, _unbroadcast(-g, b.value.shape))
        out.backward_fn = backward
    return out


def _op_mul(tape, a, b):
    out = tape._emit(T.mul(a.value, b.value), "mul", (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
            _accum(b, _unbroadcast(g * a.value, b.value.shape))
        out.backward_fn = backward
    return out


def _op_scale(tape, a, *, s):
    s = float(s)
    out = tape._emit(T.scale(a.value, s), "scale", (a,))
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(a, g * s)
    return out


def _op_matmul(tape, a, b):
    out = tape._emit(T.matmul(a.value, b.value), "matmul", (a, b))
    if out.requires_grad:
        def backward(g):
            if b.value.ndim == 2:
                _accum(a, g @ b.value.T)
                _accum(b, a.value.T @ g)
            else:
                _accum(a, g[..., None] * b.value)
                _accum(b, (a.value * g[..., None]).reshape(-1, b.value.shape[0]).sum(axis=0))
        out.backward_fn = backward
    return out


def _op_dot(tape, a, b):
    out = tape._emit(T.dot(a.value, b.value), "dot", (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, g * b.value)
            _accum(b, g * a.value)
        out.backward_fn = backward
    return out


def _op_relu(tape, a):
    out = tape._emit(T.relu(a.value), "relu", (a,))
    if out.requires_grad:
        mask = a.value > 0  # relu'(0) = 0
        out.backward_fn = lambda g: _accum(a, g * mask)
    return out


def _op_sigmoid(tape, a):
    val = T.sigmoid(a.value)
    out = tape._emit(val, "sigmoid", (a,))
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(a, g * val * (1.0 - val))
    return out


def _op_softplus(tape, a):
    out = tape._emit(T.softplus(a.value), "softplus", (a,))
    if out.requires_grad:
        sig = T.sigmoid(a.value)
        out.backward_fn = lambda g: _accum(a, g * sig)
    return out


def _op_l2norm_rows(tape, a, *, eps=1e-8):
    out = tape._emit(T.l2norm_rows(a.value, eps=eps), "l2norm_rows", (a,))
    if out.requires_grad:
        x = a.value
        n = T.row_norms(x)
        denom = n + eps

        def backward(g):
            rd = (x * g).sum(axis=-1)
            safe_n = np.maximum(n, 1e-300)
            _accum(a, g / denom[..., None] - x * (rd / (safe_n * denom * denom))[..., None])

        out.backward_fn = backward
    return out


def _op_sum(tape, a, *, axis=None):
    out = tape._emit(T.sum(a.value, axis=axis), "sum", (a,))
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(a, _expand_reduced(g, a.value.shape, axis))
    return out


def _op_mean(tape, a, *, axis=None):
    out = tape._emit(T.mean(a.value, axis=axis), "mean", (a,))
    if out.requires_grad:
        count = a.value.size / out.value.size

        def backward(g):
            _accum(a, _expand_reduced(g, a.value.shape, axis) / count)

        out.backward_fn = backward
    return out


def _op_reshape(tape, a, *, shape):
    out = tape._emit(a.value.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        out.backward_fn = lambda g: _accum(a, g.reshape(a.value.shape))
    return out


def _op_conv2d(tape, x, kernels, bias, *, stride=1, pad=0):
    y, cols, _ = T._conv2d_impl(x.value, kernels.value, bias.value, stride, pad)
    out = tape._emit(T._guard(y, "conv2d"), "conv2d", (x, kernels, bias))
    if out.requires_grad:
        c_out = kernels.value.shape[0]
        ksize = kernels.value.shape[2]
        lead = x.value.shape[:-3]

        def backward(g):
            gm = g.reshape(lead + (c_out, -1))
            if kernels.requires_grad:
                dk = np.matmul(gm, cols.swapaxes(-1, -2))
                if lead:
                    dk = dk.reshape((-1,) + dk.shape[-2:]).sum(axis=0)
                _accum(kernels, dk.reshape(kernels.value.shape))
            if bias.requires_grad:
                db = gm.reshape(-1, c_out, gm.shape[-1]).sum(axis=(0, 2))
                _accum(bias, db)
            if x.requires_grad:
                dcols = np.matmul(kernels.value.reshape(c_out, -1).T, gm)
                _accum(x, T.col2im_add(dcols, x.value.shape, ksize, stride, pad))

        out.backward_fn = backward
    return out


def _op_maxpool2d(tape, x, *, window):
    pooled, idx = T.maxpool2d(x.value, window)
    out = tape._emit(pooled, "maxpool2d", (x,))
    if out.requires_grad:
        def backward(g):
            dx = np.zeros(x.value.size)
            dx[idx.ravel()] = g.ravel()  # windows are disjoint
            _accum(x, dx.reshape(x.value.shape))

        out.backward_fn = backward
    return out


def _op_unfold(tape, x, *, d):
    out = tape._emit(T.unfold(x.value, d), "unfold", (x,))
    if out.requires_grad:
        c, h, w = x.value.shape[-3:]
        out.backward_fn = lambda g: _accum(x, T.fold(g, (c, h, w, d)))
    return out


def _op_fold(tape, tokens, *, geometry):
    out = tape._emit(T.fold(tokens.value, geometry), "fold", (tokens,))
    if out.requires_grad:
        d = geometry[3]
        out.backward_fn = lambda g: _accum(tokens, T.unfold(g, d))
    return out


def _op_cross_entropy_logits(tape, logits, *, label):
    out = tape._emit(T.cross_entropy_logits(logits.value, label), "cross_entropy_logits", (logits,))
    if out.requires_grad:
        probs = T.softmax(logits.value)

        def backward(g):
            d = probs.copy()
            if logits.value.ndim == 1:
                d[int(label)] -= 1.0
                _accum(logits, g * d)
            else:
                rows = np.arange(logits.value.shape[0])
                d[rows, np.asarray(label, dtype=np.int64)] -= 1.0
                _accum(logits, g[:, None] * d)

        out.backward_fn = backward
    return out


for _name, _builder in [
    ("add", _op_add),
    ("sub", _op_sub),
    ("mul", _op_mul),
    ("scale", _op_scale),
    ("matmul", _op_matmul),
    ("dot", _op_dot),
    ("relu", _op_relu),
    ("sigmoid", _op_sigmoid),
    ("softplus", _op_softplus),
    ("l2norm_rows", _op_l2norm_rows),
    ("sum", _op_sum),
    ("mean", _op_mean),
    ("reshape", _op_reshape),
    ("conv2d", _op_conv2d),
    ("maxpool2d", _op_maxpool2d),
    ("unfold", _op_unfold),
    ("fold", _op_fold),
    ("cross_entropy_logits", _op_cross_entropy_logits),
]:
    register_op(_name, _builder)
# "neighbor_cosine_sum" is registered by ersm.energy_mask at import time.


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error of analytic vs central differences."""

    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        rows = ", ".join(f"{k}={v:.3e}" for k, v in self.per_param.items())
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check[{verdict} @ tol={self.tol:g}]: {rows}"


def grad_check(f, params: dict, h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare the gradients reported by ``f`` against central finite
    differences.

    ``f`` maps a dict of parameter arrays to ``(loss, grads)`` and must be
    deterministic. For every element the relative error is
    ``|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)``; the report records the
    per-parameter maximum and passes when all stay below ``tol``.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = f(work)
    report = GradCheckReport(tol=tol)
    for name, p in work.items():
        g_ad = np.asarray(grads[name], dtype=np.float64).ravel()
        flat = p.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = f(work)
            flat[i] = orig - h
            lm, _ = f(work)
            flat[i] = orig
            g_fd = (float(lp) - float(lm)) / (2.0 * h)
            rel = abs(g_ad[i] - g_fd) / (abs(g_ad[i]) + abs(g_fd) + 1e-12)
            worst = max(worst, rel)
        report.per_param[name] = worst
    return report
