"""A small reverse-mode differentiation tape over float64 numpy arrays.

Operations are recorded in execution order on a :class:`Tape`; ``backward``
walks the record in reverse.  Arrays are 2-D ``(batch, features)`` except for
scalar losses.  A tape built with ``record=False`` runs the exact same
primitive code without keeping a record, which is what inference uses, so
trained and deployed forward passes agree bit for bit.

``quantize`` is the one non-differentiable primitive: its backward rule is the
straight-through estimator (identity).
"""

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "index", "name")

    def __init__(self, data, index=None, name=None):
        self.data = data
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r}, index={self.index})"


# --------------------------------------------------------------------------
# primitives


class Primitive:
    differentiable = True

    def check(self, *shapes, **attrs):
        pass

    def forward(self, *xs, **attrs):
        raise NotImplementedError

    def vjp(self, g, out, xs, **attrs):
        raise NotImplementedError


PRIMITIVES = {}


def _register(name):
    def deco(cls):
        cls.name = name
        PRIMITIVES[name] = cls()
        return cls

    return deco


def _same(op, a, b):
    if a != b:
        raise ShapeError(f"{op}: operand shapes {a} and {b} differ")


def _ndim(op, shape, n):
    if len(shape) != n:
        raise ShapeError(f"{op}: expected a {n}-d operand, got shape {shape}")


@_register("matmul")
class MatMul(Primitive):
    def check(self, a, b):
        _ndim("matmul", a, 2)
        _ndim("matmul", b, 2)
        if a[1] != b[0]:
            raise ShapeError(f"matmul: inner dimensions {a} @ {b} do not agree")

    def forward(self, a, b):
        # einsum keeps each output row independent of the batch size, which
        # BLAS gemm does not guarantee; rollouts rely on that for replay.
        return np.einsum("ik,kj->ij", a, b)

    def vjp(self, g, out, xs):
        a, b = xs
        return g @ b.T, a.T @ g


@_register("add")
class Add(Primitive):
    def check(self, a, b):
        _same("add", a, b)

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, xs):
        return g, g


@_register("sub")
class Sub(Primitive):
    def check(self, a, b):
        _same("sub", a, b)

    def forward(self, a, b):
        return a - b

    def vjp(self, g, out, xs):
        return g, -g


@_register("mul")
class Mul(Primitive):
    def check(self, a, b):
        _same("mul", a, b)

    def forward(self, a, b):
        return a * b

    def vjp(self, g, out, xs):
        a, b = xs
        return g * b, g * a


@_register("scale")
class Scale(Primitive):
    def forward(self, a, c=1.0):
        return a * c

    def vjp(self, g, out, xs, c=1.0):
        return (g * c,)


@_register("bias")
class Bias(Primitive):
    def check(self, a, b):
        _ndim("bias", a, 2)
        _ndim("bias", b, 1)
        if a[1] != b[0]:
            raise ShapeError(f"bias: width {b[0]} does not match operand {a}")

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, xs):
        return g, g.sum(axis=0)


@_register("tanh")
class Tanh(Primitive):
    def forward(self, a):
        return np.tanh(a)

    def vjp(self, g, out, xs):
        return (g * (1.0 - out * out),)


@_register("sigmoid")
class Sigmoid(Primitive):
    def forward(self, a):
        return 0.5 * (np.tanh(0.5 * a) + 1.0)

    def vjp(self, g, out, xs):
        return (g * out * (1.0 - out),)


@_register("relu6")
class Relu6(Primitive):
    def forward(self, a):
        return np.clip(a, 0.0, 6.0)

    def vjp(self, g, out, xs):
        (a,) = xs
        return (g * ((a > 0.0) & (a < 6.0)),)


@_register("phi")
class Phi(Primitive):
    def forward(self, a):
        return 1.5 * np.tanh(a) + 0.5 * np.tanh(-3.0 * a)

    def vjp(self, g, out, xs):
        (a,) = xs
        t1 = np.tanh(a)
        t3 = np.tanh(3.0 * a)
        return (g * (1.5 * (1.0 - t1 * t1) - 1.5 * (1.0 - t3 * t3)),)


@_register("quantize")
class Quantize(Primitive):
    differentiable = False

    def forward(self, a):
        return np.where(a > 0.5, 1.0, np.where(a < -0.5, -1.0, 0.0))

    def vjp(self, g, out, xs):
        return (g,)


@_register("concat")
class Concat(Primitive):
    """Join along columns (``axis=1``) or stack rows (``axis=0``)."""

    def check(self, *shapes, axis=1):
        other = 1 - axis
        for s in shapes:
            _ndim("concat", s, 2)
            if s[other] != shapes[0][other]:
                raise ShapeError(f"concat: operands {shapes} disagree off axis {axis}")

    def forward(self, *xs, axis=1):
        return np.concatenate(xs, axis=axis)

    def vjp(self, g, out, xs, axis=1):
        edges = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, edges, axis=axis))


@_register("slice")
class Slice(Primitive):
    def check(self, a, start=0, stop=None):
        _ndim("slice", a, 2)
        stop = a[1] if stop is None else stop
        if not 0 <= start < stop <= a[1]:
            raise ShapeError(f"slice: columns [{start}, {stop}) out of range for {a}")

    def forward(self, a, start=0, stop=None):
        return a[:, start:stop]

    def vjp(self, g, out, xs, start=0, stop=None):
        (a,) = xs
        full = np.zeros_like(a)
        full[:, start:stop] = g
        return (full,)


@_register("softmax")
class Softmax(Primitive):
    def check(self, a):
        _ndim("softmax", a, 2)

    def forward(self, a):
        z = np.exp(a - a.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def vjp(self, g, out, xs):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _log_softmax(a):
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@_register("cross_entropy")
class CrossEntropy(Primitive):
    """Weighted mean over rows of ``-sum(target * log_softmax(logits))``.

    Takes logits rather than probabilities; ``weights`` (one per row, constant)
    masks padded steps.
    """

    def check(self, logits, targets, weights=None):
        _ndim("cross_entropy", logits, 2)
        _same("cross_entropy", logits, targets)
        if weights is not None and weights.shape != (logits[0],):
            raise ShapeError(f"cross_entropy: weights {weights.shape} vs rows {logits[0]}")

    def forward(self, logits, targets, weights=None):
        w = np.ones(logits.shape[0]) if weights is None else weights
        per_row = -(targets * _log_softmax(logits)).sum(axis=1)
        return np.asarray((w * per_row).sum() / w.sum())

    def vjp(self, g, out, xs, weights=None):
        logits, targets = xs
        w = np.ones(logits.shape[0]) if weights is None else weights
        w = (w / w.sum())[:, None] * g
        logp = _log_softmax(logits)
        p = np.exp(logp)
        return w * (p * targets.sum(axis=1, keepdims=True) - targets), -w * logp


@_register("sq_error")
class SqError(Primitive):
    """Mean over rows of the squared euclidean distance."""

    def check(self, a, b):
        _ndim("sq_error", a, 2)
        _same("sq_error", a, b)

    def forward(self, a, b):
        d = a - b
        return np.asarray((d * d).sum() / a.shape[0])

    def vjp(self, g, out, xs):
        a, b = xs
        d = (2.0 * g / a.shape[0]) * (a - b)
        return d, -d


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    name: str = None
    requires_grad: bool = False


class Tape:
    """Ordered record of primitive applications.

    Leaves are created with :meth:`param` (trainable, named) or :meth:`const`.
    """

    def __init__(self, record=True):
        self.record = record
        self.nodes = []

    # leaves -------------------------------------------------------------
    def _leaf(self, array, name, requires_grad):
        data = np.asarray(array, dtype=DTYPE)
        if not self.record:
            return Tensor(data, None, name)
        self.nodes.append(Node("leaf", (), {}, data, name, requires_grad))
        return Tensor(data, len(self.nodes) - 1, name)

    def param(self, array, name):
        return self._leaf(array, name, True)

    def const(self, array, name=None):
        return self._leaf(array, name, False)

    # application --------------------------------------------------------
    def apply(self, op, *inputs, **attrs):
        prim = PRIMITIVES[op]
        xs = [t.data for t in inputs]
        prim.check(*(x.shape for x in xs), **attrs)
        out = prim.forward(*xs, **attrs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        if not self.record:
            return Tensor(out)
        for t in inputs:
            if t.index is None or t.index >= len(self.nodes) or self.nodes[t.index].value is not t.data:
                raise TapeError(f"{op}: operand {t!r} is not recorded on this tape")
        self.nodes.append(Node(op, tuple(t.index for t in inputs), attrs, out))
        return Tensor(out, len(self.nodes) - 1)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, c):
        return self.apply("scale", a, c=float(c))

    def bias(self, a, b):
        return self.apply("bias", a, b)

    def tanh(self, a):
        return self.apply("tanh", a)

    def sigmoid(self, a):
        return self.apply("sigmoid", a)

    def relu6(self, a):
        return self.apply("relu6", a)

    def phi(self, a):
        return self.apply("phi", a)

    def quantize(self, a):
        return self.apply("quantize", a)

    def concat(self, *xs, axis=1):
        return self.apply("concat", *xs, axis=axis)

    def slice(self, a, start, stop):
        return self.apply("slice", a, start=start, stop=stop)

    def softmax(self, a):
        return self.apply("softmax", a)

    def cross_entropy(self, logits, targets, weights=None):
        w = None if weights is None else np.asarray(weights, dtype=DTYPE)
        return self.apply("cross_entropy", logits, targets, weights=w)

    def sq_error(self, a, b):
        return self.apply("sq_error", a, b)

    def dense(self, x, w, b):
        return self.bias(self.matmul(x, w), b)

    # replay -------------------------------------------------------------
    def forward(self, overrides=None, straight_through=False):
        """Re-run the record, optionally substituting leaf values by name.

        With ``straight_through=True`` quantize nodes act as the identity,
        which gives the smooth surrogate whose gradient the estimator uses.
        Returns the list of node values.
        """
        overrides = overrides or {}
        values = []
        for node in self.nodes:
            if node.op == "leaf":
                v = node.value
                if node.name in overrides:
                    v = np.asarray(overrides[node.name], dtype=DTYPE)
                    if v.shape != node.value.shape:
                        raise ShapeError(
                            f"leaf {node.name!r}: got shape {v.shape}, recorded {node.value.shape}"
                        )
                values.append(v)
                continue
            xs = [values[i] for i in node.inputs]
            if straight_through and node.op == "quantize":
                values.append(xs[0])
                continue
            prim = PRIMITIVES[node.op]
            prim.check(*(x.shape for x in xs), **node.attrs)
            values.append(prim.forward(*xs, **node.attrs))
        return values

    def backward(self, output, grad=None, values=None):
        """Gradients of ``output`` w.r.t. every trainable leaf, keyed by name."""
        if not self.record:
            raise TapeError("backward: tape was built with record=False")
        if output.index is None or output.index >= len(self.nodes):
            raise TapeError("backward: output was not produced by a forward pass on this tape")
        values = values if values is not None else [n.value for n in self.nodes]
        seed = np.ones_like(values[output.index]) if grad is None else np.asarray(grad, dtype=DTYPE)
        if seed.shape != values[output.index].shape:
            raise ShapeError(f"backward: seed shape {seed.shape} vs output {values[output.index].shape}")
        grads = [None] * (output.index + 1)
        grads[output.index] = seed
        for i in range(output.index, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.op == "leaf":
                continue
            xs = [values[j] for j in node.inputs]
            parts = PRIMITIVES[node.op].vjp(g, values[i], xs, **node.attrs)
            for j, gj in zip(node.inputs, parts):
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for i, node in enumerate(self.nodes[: output.index + 1]):
            if node.op == "leaf" and node.requires_grad:
                g = grads[i] if grads[i] is not None else np.zeros_like(node.value)
                out[node.name] = out[node.name] + g if node.name in out else g
        return out


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {name!r}")
    t = state.step + 1
    m, v, new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {name!r} {p.shape}")
        m[name] = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v[name] = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        mhat = m[name] / (1 - state.beta1**t)
        vhat = v[name] / (1 - state.beta2**t)
        new[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    errors: dict
    tolerance: float
    skipped: str = None
    straight_through: int = 0

    @property
    def failures(self):
        return [k for k, e in self.errors.items() if e >= self.tolerance]

    @property
    def passed(self):
        return self.skipped is None and not self.failures


def relative_error(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def grad_check(tape, output, tolerance=1e-4, step=1e-5, seed=0):
    """Compare tape gradients against central finite differences.

    Quantize nodes are replaced by the identity for both the analytic and the
    numeric pass, so composites containing them are checked against their
    straight-through surrogate.  A tape with nothing differentiable besides
    quantize is reported as skipped.
    """
    ops = [n.op for n in tape.nodes if n.op != "leaf"]
    n_st = sum(op == "quantize" for op in ops)
    if ops and all(not PRIMITIVES[op].differentiable for op in ops):
        return GradReport({}, tolerance, skipped="non-differentiable, straight-through", straight_through=n_st)
    values = tape.forward(straight_through=True)
    out_shape = values[output.index].shape
    rng = np.random.default_rng(seed)
    w = rng.normal(size=out_shape) if out_shape else np.asarray(1.0)
    analytic = tape.backward(output, w, values=values)

    def f(overrides):
        return float((tape.forward(overrides, straight_through=True)[output.index] * w).sum())

    leaves = {n.name: n.value for n in tape.nodes if n.op == "leaf" and n.requires_grad}
    errors = {}
    for name, x in leaves.items():
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            numeric[idx] = (f({name: xp}) - f({name: xm})) / (2 * step)
        errors[name] = relative_error(analytic[name], numeric)
    return GradReport(errors, tolerance, straight_through=n_st)
