"""Small reverse-mode autodiff over numpy arrays.

Every primitive works on plain arrays too: when none of its inputs is a
:class:`Tensor` it returns an ``ndarray`` and records nothing.  Model code is
written once against these functions and runs taped (training) or untaped
(evaluation, finite differences).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

EPS_BALL = 1e-5
# largest argument allowed into atanh; matches the ball clamp sqrt(kappa)*|x| <= sqrt(1 - eps)
ATANH_MAX = float(np.sqrt(1.0 - EPS_BALL))
_SERIES_CUTOFF = 1e-4


class Tensor:
    """A node on the tape: a value, its parents and the rule that pulls a
    cotangent back to them."""

    __slots__ = ("value", "parents", "vjp", "grad", "op", "name")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, op="leaf", name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(value, name=None) -> Tensor:
    """Leaf tensor whose gradient is wanted."""
    return Tensor(np.array(value, dtype=np.float64), name=name)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _make(out, parents, vjp, op):
    if any(isinstance(p, Tensor) for p in parents):
        return Tensor(out, tuple(parents), vjp, op)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise binary -----------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    _check_broadcast("add", av, bv)
    return _make(av + bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)), "add")


def sub(a, b):
    av, bv = value(a), value(b)
    _check_broadcast("sub", av, bv)
    return _make(av - bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)), "sub")


def mul(a, b):
    av, bv = value(a), value(b)
    _check_broadcast("mul", av, bv)
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    av, bv = value(a), value(b)
    _check_broadcast("div", av, bv)
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)), "div")


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    av, bv = value(a), value(b)
    _check_broadcast("maximum", av, bv)
    pick_a = av >= bv
    return _make(np.where(pick_a, av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)), "maximum")


def minimum(a, b):
    av, bv = value(a), value(b)
    _check_broadcast("minimum", av, bv)
    pick_a = av <= bv
    return _make(np.where(pick_a, av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)), "minimum")


def where(cond, a, b):
    """Select with a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    return _make(np.where(cond, av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape),
                            _unbroadcast(np.where(cond, 0.0, g), bv.shape)), "where")


# --- elementwise unary ------------------------------------------------------

def neg(x):
    return _make(-value(x), (x,), lambda g: (-g,), "neg")


def power(x, p: float):
    xv = value(x)
    return _make(xv ** p, (x,), lambda g: (g * p * xv ** (p - 1),), "power")


def square(x):
    xv = value(x)
    return _make(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def exp(x):
    out = np.exp(value(x))
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    xv = value(x)
    return _make(np.log(xv), (x,), lambda g: (g / xv,), "log")


def sqrt(x):
    out = np.sqrt(value(x))
    return _make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(x):
    out = np.tanh(value(x))
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * value(x)))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def atanh(x):
    xv = np.clip(value(x), -ATANH_MAX, ATANH_MAX)
    return _make(np.arctanh(xv), (x,), lambda g: (g / (1.0 - xv * xv),), "atanh")


def asinh(x):
    xv = value(x)
    return _make(np.arcsinh(xv), (x,), lambda g: (g / np.sqrt(1.0 + xv * xv),), "asinh")


def acosh(x):
    xv = value(x)
    return _make(np.arccosh(xv), (x,), lambda g: (g / np.sqrt(xv * xv - 1.0),), "acosh")


def tanhc(u):
    """tanh(u)/u with the removable singularity at 0 filled by its series."""
    uv = value(u)
    small = np.abs(uv) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, uv)
    t = np.tanh(safe)
    u2 = uv * uv
    out = np.where(small, 1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0, t / safe)
    d = np.where(small, -2.0 * uv / 3.0 + 8.0 * u2 * uv / 15.0,
                 ((1.0 - t * t) * safe - t) / (safe * safe))
    return _make(out, (u,), lambda g: (g * d,), "tanhc")


def atanhc(u):
    """atanh(u)/u, series near 0, argument clipped like :func:`atanh`."""
    uv = np.clip(value(u), -ATANH_MAX, ATANH_MAX)
    small = np.abs(uv) < _SERIES_CUTOFF
    safe = np.where(small, 0.5, uv)
    a = np.arctanh(safe)
    u2 = uv * uv
    out = np.where(small, 1.0 + u2 / 3.0 + u2 * u2 / 5.0, a / safe)
    d = np.where(small, 2.0 * uv / 3.0 + 4.0 * u2 * uv / 5.0,
                 (safe / (1.0 - safe * safe) - a) / (safe * safe))
    return _make(out, (u,), lambda g: (g * d,), "atanhc")


# --- reductions and shape ---------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _make(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


def norm(x, axis=-1, keepdims=True):
    """Euclidean norm; the gradient at 0 is taken as 0."""
    xv = value(x)
    out = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xv / np.maximum(out, 1e-300),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), vjp, "norm")


def reshape(x, shape):
    xv = value(x)
    return _make(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),), "reshape")


def transpose(x, axes=None):
    xv = value(x)
    out = np.transpose(xv, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx):
    xv = value(x)

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        full = np.zeros_like(xv)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(xv[idx], (x,), vjp, "getitem")


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate(vals, axis=axis), tuple(xs), vjp, "concat")


def stack(xs, axis=0):
    vals = [value(x) for x in xs]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack(vals, axis=axis), tuple(xs), vjp, "stack")


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: shapes {av.shape} and {bv.shape} are not aligned")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def softmax(x, axis=-1):
    xv = value(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis=-1):
    xv = value(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,),
                 lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),), "log_softmax")


def clip(x, lo, hi):
    xv = value(x)
    inside = (xv >= lo) & (xv <= hi)
    return _make(np.clip(xv, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),), "clip")


# --- backward ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Tensor, wrt=None) -> list[np.ndarray] | None:
    """Pull d(output)/d(leaf) back through the tape.

    Leaf ``.grad`` fields are overwritten.  If ``wrt`` is given, the gradients
    of those leaves are returned in order, zeros for leaves the output does
    not depend on.
    """
    if not isinstance(output, Tensor):
        raise TypeError("backward: output is not on the tape")
    if output.value.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    order = _topo_order(output)
    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            continue
        for parent, ct in zip(node.parents, node.vjp(g)):
            if not isinstance(parent, Tensor) or ct is None:
                continue
            ct = np.asarray(ct, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + ct
            else:
                grads[key] = ct
    if wrt is None:
        return None
    reached = {id(n) for n in order}
    out = []
    for leaf in wrt:
        if id(leaf) in reached and leaf.grad is not None:
            out.append(leaf.grad)
        else:
            out.append(np.zeros_like(leaf.value))
    return out


def grads_of(build: Callable[[dict], Tensor], params: dict[str, np.ndarray]):
    """Evaluate ``build`` on fresh leaves and return (value, {name: grad})."""
    leaves = {k: param(v, name=k) for k, v in params.items()}
    for leaf in leaves.values():
        leaf.grad = None
    out = build(leaves)
    names = list(leaves)
    gs = backward(out, [leaves[k] for k in names])
    return float(out.value), dict(zip(names, gs))


@dataclass
class GradReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    rel_errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)


def grad_check(build: Callable[[dict], object], params: dict[str, np.ndarray],
               h: float = 1e-5) -> GradReport:
    """Compare tape gradients against central finite differences.

    ``build`` maps a dict of parameters to a scalar; it is called with
    tensors once and with plain arrays for every perturbation.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = grads_of(build, params)
    numeric = {}
    for name, base in params.items():
        g = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            probe = dict(params)
            up = base.copy()
            up[i] += h
            probe[name] = up
            f_up = float(np.asarray(build(probe)))
            down = base.copy()
            down[i] -= h
            probe[name] = down
            f_down = float(np.asarray(build(probe)))
            g[i] = (f_up - f_down) / (2.0 * h)
        numeric[name] = g
    report = GradReport(analytic, numeric)
    for name in params:
        ga, gn = analytic[name], numeric[name]
        scale = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
        report.rel_errors[name] = float(np.linalg.norm(ga - gn) / scale)
    return report
