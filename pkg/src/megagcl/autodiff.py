"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is expressed in terms of the same primitive operations,
so a backward pass run with ``create_graph=True`` is itself recorded on the
tape and the returned gradients can be differentiated again. That is the
mechanism the training loop relies on to push gradients through a gradient
step.

Scalars are tensors of shape ``(1,)``; matrices are 2-D. Elementwise add,
sub and mul broadcast in exactly three cases: scalar against anything,
``(1, m)`` row against ``(n, m)``, and ``(n, 1)`` column against ``(n, m)``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, TapeError

LEAF = "leaf"


class Tensor:
    """Dense float64 array plus an optional handle into the active tape.

    A Tensor without a node id is a constant: it never receives a gradient,
    and operations on constants alone are not recorded.
    """

    __slots__ = ("data", "node_id")

    def __init__(self, data, node_id=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "expected a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = "const" if self.node_id is None else f"node {self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scalar_scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    """One recorded primitive application (or a leaf root)."""

    __slots__ = ("kind", "inputs", "out", "extras", "from_backward")

    def __init__(self, kind, inputs, out, extras, from_backward):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.extras = extras
        self.from_backward = from_backward


class Tape:
    """Append-only record of primitive applications, in topological order.

    ``recording_backward`` is raised while a create_graph backward pass is
    appending its own nodes; it marks those nodes as second-generation.
    """

    def __init__(self):
        self.nodes = []
        self.recording_backward = False
        self._pause_depth = 0

    @property
    def recording(self):
        return self._pause_depth == 0

    @contextmanager
    def paused(self):
        self._pause_depth += 1
        try:
            yield
        finally:
            self._pause_depth -= 1

    def adopt(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf root of this tape (in place)."""
        self.nodes.append(_Node(LEAF, (), t, None, self.recording_backward))
        t.node_id = len(self.nodes) - 1
        return t

    def reset(self):
        """Drop all nodes. Node ids handed out before this become invalid."""
        self.nodes.clear()
        self.recording_backward = False


_tls = threading.local()


def active_tape():
    return getattr(_tls, "tape", None)


@contextmanager
def use_tape(tape: Tape):
    prev = active_tape()
    _tls.tape = tape
    try:
        yield tape
    finally:
        _tls.tape = prev


def constant(data) -> Tensor:
    return Tensor(data)


def variable(data) -> Tensor:
    """A leaf tensor registered on the active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("variable() requires an active tape")
    return tape.adopt(Tensor(data))


def detach(t: Tensor) -> Tensor:
    """Same data, off the tape: downstream ops treat it as a constant."""
    return Tensor(t.data, None)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _is_scalar(shape):
    return int(np.prod(shape)) == 1


def _broadcast_shape(kind, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if _is_scalar(sa):
        return sb
    if _is_scalar(sb):
        return sa
    if len(sa) == 2 and len(sb) == 2:
        if sa[1] == sb[1] and 1 in (sa[0], sb[0]):
            return (max(sa[0], sb[0]), sa[1])
        if sa[0] == sb[0] and 1 in (sa[1], sb[1]):
            return (sa[0], max(sa[1], sb[1]))
    raise ShapeError(kind, [sa, sb])


def _require_2d(kind, *tensors):
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(kind, [t.shape], "expected a 2-D tensor")


def _arity(kind, inputs, n):
    if len(inputs) != n:
        raise ShapeError(kind, [t.shape for t in inputs],
                         f"expected {n} inputs, got {len(inputs)}")


def _f_add(inputs, extras):
    _arity("add", inputs, 2)
    _broadcast_shape("add", *inputs)
    return inputs[0].data + inputs[1].data


def _f_sub(inputs, extras):
    _arity("sub", inputs, 2)
    _broadcast_shape("sub", *inputs)
    return inputs[0].data - inputs[1].data


def _f_mul(inputs, extras):
    _arity("mul", inputs, 2)
    _broadcast_shape("mul", *inputs)
    return inputs[0].data * inputs[1].data


def _f_matmul(inputs, extras):
    _arity("matmul", inputs, 2)
    a, b = inputs
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    return a.data @ b.data


def _f_concat_rows(inputs, extras):
    if not inputs:
        raise ShapeError("concat-rows", [], "needs at least one input")
    _require_2d("concat-rows", *inputs)
    width = inputs[0].shape[1]
    for t in inputs[1:]:
        if t.shape[1] != width:
            raise ShapeError("concat-rows", [x.shape for x in inputs],
                             "column counts differ")
    return np.concatenate([t.data for t in inputs], axis=0)


def _f_sum(inputs, extras):
    _arity("sum", inputs, 1)
    return np.array([inputs[0].data.sum()])


def _f_mean(inputs, extras):
    _arity("mean", inputs, 1)
    return np.array([inputs[0].data.mean()])


def _f_relu(inputs, extras):
    _arity("relu", inputs, 1)
    return np.maximum(inputs[0].data, 0.0)


def _f_sigmoid(inputs, extras):
    _arity("sigmoid", inputs, 1)
    x = inputs[0].data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _f_exp(inputs, extras):
    _arity("exp", inputs, 1)
    return np.exp(inputs[0].data)


def _f_log(inputs, extras):
    _arity("log", inputs, 1)
    return np.log(inputs[0].data)


def _f_square(inputs, extras):
    _arity("square", inputs, 1)
    return np.square(inputs[0].data)


def _f_sqrt(inputs, extras):
    _arity("sqrt", inputs, 1)
    return np.sqrt(inputs[0].data)


def _f_reciprocal(inputs, extras):
    _arity("reciprocal", inputs, 1)
    return 1.0 / inputs[0].data


def _f_transpose(inputs, extras):
    _arity("transpose", inputs, 1)
    _require_2d("transpose", inputs[0])
    return inputs[0].data.T.copy()


def _f_row_softmax(inputs, extras):
    _arity("row-softmax", inputs, 1)
    _require_2d("row-softmax", inputs[0])
    x = inputs[0].data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _f_l2_normalize_rows(inputs, extras):
    _arity("l2-normalize-rows", inputs, 1)
    _require_2d("l2-normalize-rows", inputs[0])
    x = inputs[0].data
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise NumericError(f"l2-normalize-rows: zero-norm row {int(zero[0])}")
    return x / norms


def _f_gather_rows(inputs, extras):
    _arity("gather-rows", inputs, 1)
    _require_2d("gather-rows", inputs[0])
    idx = extras["indices"]
    n = inputs[0].shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("gather-rows", [inputs[0].shape],
                         f"index out of range for {n} rows")
    return inputs[0].data[idx]


def _f_scatter_add_rows(inputs, extras):
    _arity("scatter-add-rows", inputs, 1)
    _require_2d("scatter-add-rows", inputs[0])
    targets = extras["targets"]
    n_out = extras["n_out"]
    if targets.shape[0] != inputs[0].shape[0]:
        raise ShapeError("scatter-add-rows", [inputs[0].shape],
                         f"{targets.shape[0]} targets for {inputs[0].shape[0]} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= n_out):
        raise ShapeError("scatter-add-rows", [inputs[0].shape],
                         f"target out of range for {n_out} output rows")
    out = np.zeros((n_out, inputs[0].shape[1]))
    np.add.at(out, targets, inputs[0].data)
    return out


def _f_scalar_scale(inputs, extras):
    _arity("scalar-scale", inputs, 1)
    return inputs[0].data * extras["factor"]


def _reduce_to(g: Tensor, shape) -> Tensor:
    """Sum ``g`` back down to ``shape`` (inverse of a broadcast)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    if len(shape) == 1 and shape[0] == 1:
        return reduce_sum(g)
    if len(shape) == 2 and g.data.ndim == 2:
        n, m = g.shape
        if shape == (1, 1):
            col = matmul(g, constant(np.ones((m, 1))))
            return matmul(constant(np.ones((1, n))), col)
        if shape == (1, m):
            return matmul(constant(np.ones((1, n))), g)
        if shape == (n, 1):
            return matmul(g, constant(np.ones((m, 1))))
    raise ShapeError("reduce", [g.shape, shape], "cannot reduce gradient")


def _v_add(node, g):
    a, b = node.inputs
    return [_reduce_to(g, a.shape), _reduce_to(g, b.shape)]


def _v_sub(node, g):
    a, b = node.inputs
    return [_reduce_to(g, a.shape), _reduce_to(scalar_scale(g, -1.0), b.shape)]


def _v_mul(node, g):
    a, b = node.inputs
    return [_reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)]


def _v_matmul(node, g):
    a, b = node.inputs
    return [matmul(g, transpose(b)), matmul(transpose(a), g)]


def _v_concat_rows(node, g):
    grads = []
    row = 0
    for t in node.inputs:
        n = t.shape[0]
        grads.append(gather_rows(g, np.arange(row, row + n)))
        row += n
    return grads


def _v_sum(node, g):
    (x,) = node.inputs
    return [mul(constant(np.ones(x.shape)), g)]


def _v_mean(node, g):
    (x,) = node.inputs
    return [mul(constant(np.full(x.shape, 1.0 / x.data.size)), g)]


def _v_relu(node, g):
    (x,) = node.inputs
    return [mul(g, constant((x.data > 0).astype(np.float64)))]


def _v_sigmoid(node, g):
    s = node.out
    return [mul(g, mul(s, sub(constant(np.ones(s.shape)), s)))]


def _v_exp(node, g):
    return [mul(g, node.out)]


def _v_log(node, g):
    return [mul(g, reciprocal(node.inputs[0]))]


def _v_square(node, g):
    return [mul(g, scalar_scale(node.inputs[0], 2.0))]


def _v_sqrt(node, g):
    return [mul(g, scalar_scale(reciprocal(node.out), 0.5))]


def _v_reciprocal(node, g):
    return [scalar_scale(mul(g, square(node.out)), -1.0)]


def _v_transpose(node, g):
    return [transpose(g)]


def _v_row_softmax(node, g):
    s = node.out
    m = s.shape[1]
    dot = matmul(mul(g, s), constant(np.ones((m, 1))))
    return [mul(s, sub(g, dot))]


def _v_l2_normalize_rows(node, g):
    (x,) = node.inputs
    out = node.out
    m = x.shape[1]
    ones_col = constant(np.ones((m, 1)))
    norms = sqrt(matmul(square(x), ones_col))
    dot = matmul(mul(g, out), ones_col)
    return [mul(sub(g, mul(out, dot)), reciprocal(norms))]


def _v_gather_rows(node, g):
    (x,) = node.inputs
    return [scatter_add_rows(g, node.extras["indices"], x.shape[0])]


def _v_scatter_add_rows(node, g):
    return [gather_rows(g, node.extras["targets"])]


def _v_scalar_scale(node, g):
    return [scalar_scale(g, node.extras["factor"])]


_PRIMITIVES = {
    "add": (_f_add, _v_add),
    "sub": (_f_sub, _v_sub),
    "mul": (_f_mul, _v_mul),
    "matmul": (_f_matmul, _v_matmul),
    "concat-rows": (_f_concat_rows, _v_concat_rows),
    "sum": (_f_sum, _v_sum),
    "mean": (_f_mean, _v_mean),
    "relu": (_f_relu, _v_relu),
    "sigmoid": (_f_sigmoid, _v_sigmoid),
    "exp": (_f_exp, _v_exp),
    "log": (_f_log, _v_log),
    "square": (_f_square, _v_square),
    "sqrt": (_f_sqrt, _v_sqrt),
    "reciprocal": (_f_reciprocal, _v_reciprocal),
    "transpose": (_f_transpose, _v_transpose),
    "row-softmax": (_f_row_softmax, _v_row_softmax),
    "l2-normalize-rows": (_f_l2_normalize_rows, _v_l2_normalize_rows),
    "gather-rows": (_f_gather_rows, _v_gather_rows),
    "scatter-add-rows": (_f_scatter_add_rows, _v_scatter_add_rows),
    "scalar-scale": (_f_scalar_scale, _v_scalar_scale),
}


def primitive_forward(kind, inputs, **extras) -> Tensor:
    """Apply one primitive operation.

    Appends a tape node iff a tape is active, recording is not paused, and
    at least one input carries a node id.
    """
    try:
        forward, _ = _PRIMITIVES[kind]
    except KeyError:
        raise TapeError(f"unknown primitive kind: {kind!r}") from None
    inputs = [_as_tensor(t) for t in inputs]
    out = Tensor(forward(inputs, extras))
    tape = active_tape()
    if (tape is not None and tape.recording
            and any(t.node_id is not None for t in inputs)):
        tape.nodes.append(_Node(kind, tuple(inputs), out, extras or None,
                                tape.recording_backward))
        out.node_id = len(tape.nodes) - 1
    return out


def add(a, b):
    return primitive_forward("add", [a, b])


def sub(a, b):
    return primitive_forward("sub", [a, b])


def mul(a, b):
    return primitive_forward("mul", [a, b])


def matmul(a, b):
    return primitive_forward("matmul", [a, b])


def concat_rows(tensors):
    return primitive_forward("concat-rows", list(tensors))


def reduce_sum(x):
    return primitive_forward("sum", [x])


def reduce_mean(x):
    return primitive_forward("mean", [x])


def relu(x):
    return primitive_forward("relu", [x])


def sigmoid(x):
    return primitive_forward("sigmoid", [x])


def exp(x):
    return primitive_forward("exp", [x])


def log(x):
    return primitive_forward("log", [x])


def square(x):
    return primitive_forward("square", [x])


def sqrt(x):
    return primitive_forward("sqrt", [x])


def reciprocal(x):
    return primitive_forward("reciprocal", [x])


def transpose(x):
    return primitive_forward("transpose", [x])


def row_softmax(x):
    return primitive_forward("row-softmax", [x])


def l2_normalize_rows(x):
    return primitive_forward("l2-normalize-rows", [x])


def gather_rows(x, indices):
    idx = np.asarray(indices, dtype=np.intp)
    return primitive_forward("gather-rows", [x], indices=idx)


def scatter_add_rows(x, targets, n_out):
    tgt = np.asarray(targets, dtype=np.intp)
    return primitive_forward("scatter-add-rows", [x], targets=tgt,
                             n_out=int(n_out))


def scalar_scale(x, factor):
    return primitive_forward("scalar-scale", [x], factor=float(factor))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class GradientMap:
    """Gradients keyed by parameter node id, indexable by the parameter."""

    def __init__(self, by_id):
        self._by_id = by_id

    def __getitem__(self, param: Tensor) -> Tensor:
        nid = param.node_id
        if nid is None or nid not in self._by_id:
            raise TapeError("no gradient entry for parameter")
        return self._by_id[nid]

    def __contains__(self, param):
        return param.node_id is not None and param.node_id in self._by_id

    def __len__(self):
        return len(self._by_id)

    def items(self):
        return self._by_id.items()

    def values(self):
        return self._by_id.values()


def backward(loss: Tensor, params, create_graph=False) -> GradientMap:
    """Reverse-mode gradients of a scalar loss with respect to ``params``.

    With ``create_graph`` the backward computation itself is recorded on the
    tape, so every returned gradient carries a node id and a later backward
    over a function of the gradients yields second derivatives.
    """
    tape = active_tape()
    if tape is None:
        raise TapeError("backward() requires an active tape")
    if loss.node_id is None:
        raise TapeError("loss is not on the tape")
    if loss.data.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be scalar")
    params = list(params)
    for p in params:
        if p.node_id is None:
            raise TapeError("parameter is not on the tape")

    nodes = tape.nodes
    seen = {loss.node_id}
    stack = [loss.node_id]
    while stack:
        for t in nodes[stack.pop()].inputs:
            nid = t.node_id
            if nid is not None and nid not in seen:
                seen.add(nid)
                stack.append(nid)

    grads = {loss.node_id: constant(np.ones(loss.shape))}
    was_backward = tape.recording_backward
    if create_graph:
        tape.recording_backward = True
    try:
        with (nullcontext() if create_graph else tape.paused()):
            for nid in sorted(seen, reverse=True):
                node = nodes[nid]
                if node.kind == LEAF:
                    continue
                g = grads.pop(nid, None)
                if g is None:
                    continue
                _, vjp = _PRIMITIVES[node.kind]
                for t, ig in zip(node.inputs, vjp(node, g)):
                    if ig is None or t.node_id is None:
                        continue
                    cur = grads.get(t.node_id)
                    grads[t.node_id] = ig if cur is None else add(cur, ig)
    finally:
        tape.recording_backward = was_backward

    by_id = {}
    for p in params:
        gp = grads.get(p.node_id)
        if gp is None:
            gp = scalar_scale(p, 0.0) if create_graph \
                else constant(np.zeros(p.shape))
        by_id[p.node_id] = gp
    return GradientMap(by_id)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment accumulators for one ordered parameter list."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default=None)
    v: list = field(default=None)


def adam_step(params, grads: GradientMap, state: AdamState, lr):
    """Adam update with bias correction.

    Returns the updated parameters as fresh tape roots (leaves on the active
    tape when one is recording, detached constants otherwise) together with
    the mutated state.
    """
    params = list(params)
    gs = [grads[p] for p in params]
    if state.m is None:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    tape = active_tape()
    new_params = []
    for i, (p, g) in enumerate(zip(params, gs)):
        if state.m[i].shape != p.shape:
            raise ShapeError("adam-step", [state.m[i].shape, p.shape],
                             "moment/parameter shape mismatch")
        gd = g.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gd
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gd * gd
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        fresh = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        if tape is not None and tape.recording:
            tape.adopt(fresh)
        new_params.append(fresh)
    return new_params, state


def sgd_virtual_step(params, grads: GradientMap, lr):
    """One explicit gradient step that stays on the tape.

    The returned tensors are differentiable with respect to anything the
    gradients depend on; requires gradients built with ``create_graph``.
    """
    stepped = []
    for p in params:
        g = grads[p]
        if g.node_id is None:
            raise TapeError(
                "virtual step requires differentiable gradients "
                "(build them with create_graph)")
        stepped.append(sub(p, scalar_scale(g, lr)))
    return stepped


# ---------------------------------------------------------------------------
# finite differences (the independent oracle)
# ---------------------------------------------------------------------------

def finite_diff_gradient(f, x: Tensor, step=1e-4) -> Tensor:
    """Central-difference estimate of d f / d x, same shape as ``x``.

    ``f`` takes a detached Tensor and returns a float. Evaluations run with
    recording paused so probing never pollutes the active tape.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = x.data.reshape(-1)
    out = np.empty_like(flat)
    tape = active_tape()
    ctx = tape.paused() if tape is not None else nullcontext()
    with ctx:
        for i in range(flat.size):
            hi = flat.copy()
            lo = flat.copy()
            hi[i] += step
            lo[i] -= step
            f_hi = float(f(constant(hi.reshape(x.shape))))
            f_lo = float(f(constant(lo.reshape(x.shape))))
            out[i] = (f_hi - f_lo) / (2.0 * step)
    return constant(out.reshape(x.shape))


def max_relative_error(got: Tensor, want: Tensor) -> float:
    """Max elementwise deviation, relative to max(1, |want|)."""
    num = float(np.max(np.abs(got.data - want.data))) if got.data.size else 0.0
    den = max(1.0, float(np.max(np.abs(want.data))) if want.data.size else 0.0)
    return num / den


PRIMITIVE_KINDS = tuple(k for k in _PRIMITIVES if k != LEAF)
