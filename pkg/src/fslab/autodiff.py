"""Static computation graphs with reverse-mode gradients and forward-mode JVPs.

A :class:`Graph` is a topologically ordered list of primitive nodes built once
through :class:`GraphBuilder` and then evaluated many times.  All numeric work
is float64; evaluation is deterministic (same graph + same inputs give bitwise
identical results).  Elementwise primitives require exactly matching shapes;
any broadcasting must go through an explicit ``expand`` node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DualTensor, Tensor, as_array


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    pass


class DivergenceError(RuntimeError):
    """Raised when an evaluation produces non-finite values."""


# ---------------------------------------------------------------------------
# Primitive op definitions
# ---------------------------------------------------------------------------


def _sigmoid(x):
    # overflow-free for any argument, and much faster than masked exp branches
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_deriv(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass(frozen=True)
class OpDef:
    """Evaluation plus differentiation rules for one primitive.

    vjp(attrs, xs, out, g) returns one cotangent per input (None = no flow);
    jvp(attrs, xs, out, ds) returns the output tangent.
    """

    infer: callable
    eval: callable
    jvp: callable
    vjp: callable


def _same_shape(op):
    def infer(attrs, shapes):
        if shapes[0] != shapes[1]:
            raise ShapeError(f"{op}: operand shapes {shapes[0]} != {shapes[1]}")
        return shapes[0]

    return infer


def _unary_shape(attrs, shapes):
    return shapes[0]


def _matmul_infer(attrs, shapes):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"matmul: incompatible shapes {a} @ {b}")
    return (a[0], b[1])


def _affine_infer(attrs, shapes):
    x, w, b = shapes
    if len(x) != 2 or len(w) != 2 or x[1] != w[0]:
        raise ShapeError(f"affine: incompatible shapes {x} @ {w}")
    if b != (w[1],):
        raise ShapeError(f"affine: bias shape {b} != ({w[1]},)")
    return (x[0], w[1])


def _sum_infer(attrs, shapes):
    axis = attrs["axis"]
    s = shapes[0]
    if axis is None:
        return ()
    if not (0 <= axis < len(s)):
        raise ShapeError(f"sum: axis {axis} out of range for shape {s}")
    return tuple(d for i, d in enumerate(s) if i != axis)


def _sum_vjp(attrs, xs, out, g):
    axis = attrs["axis"]
    x = xs[0]
    if axis is None:
        return (np.full(x.shape, g, dtype=np.float64),)
    return (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),)


def _reshape_infer(attrs, shapes):
    target = tuple(attrs["shape"])
    if int(np.prod(target)) != int(np.prod(shapes[0])):
        raise ShapeError(f"reshape: cannot view {shapes[0]} as {target}")
    return target


def _concat_infer(attrs, shapes):
    axis = attrs["axis"]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base):
            raise ShapeError(f"concat: rank mismatch {shapes}")
        for i, (a, b) in enumerate(zip(base, s)):
            if i == axis:
                base[i] = a + b
            elif a != b:
                raise ShapeError(f"concat: shape mismatch {shapes} on axis {i}")
    return tuple(base)


def _concat_vjp(attrs, xs, out, g):
    axis = attrs["axis"]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


def _expand_infer(attrs, shapes):
    target = tuple(attrs["shape"])
    src = shapes[0]
    if src == ():
        return target
    if len(src) != len(target):
        raise ShapeError(f"expand: rank mismatch {src} -> {target}")
    for a, b in zip(src, target):
        if a != b and a != 1:
            raise ShapeError(f"expand: cannot expand {src} to {target}")
    return target


def _expand_vjp(attrs, xs, out, g):
    src = xs[0].shape
    if src == ():
        return (np.asarray(g.sum()),)
    axes = tuple(i for i, (a, b) in enumerate(zip(src, g.shape)) if a == 1 and b != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return (g,)


_OPS: dict[str, OpDef] = {
    "input": OpDef(None, None, None, None),
    "const": OpDef(None, None, None, None),
    "add": OpDef(
        _same_shape("add"),
        lambda attrs, x, y: x + y,
        lambda attrs, xs, out, ds: ds[0] + ds[1],
        lambda attrs, xs, out, g: (g, g),
    ),
    "sub": OpDef(
        _same_shape("sub"),
        lambda attrs, x, y: x - y,
        lambda attrs, xs, out, ds: ds[0] - ds[1],
        lambda attrs, xs, out, g: (g, -g),
    ),
    "mul": OpDef(
        _same_shape("mul"),
        lambda attrs, x, y: x * y,
        lambda attrs, xs, out, ds: ds[0] * xs[1] + xs[0] * ds[1],
        lambda attrs, xs, out, g: (g * xs[1], g * xs[0]),
    ),
    "scale": OpDef(
        _unary_shape,
        lambda attrs, x: attrs["c"] * x,
        lambda attrs, xs, out, ds: attrs["c"] * ds[0],
        lambda attrs, xs, out, g: (attrs["c"] * g,),
    ),
    "add_scalar": OpDef(
        _unary_shape,
        lambda attrs, x: x + attrs["c"],
        lambda attrs, xs, out, ds: ds[0],
        lambda attrs, xs, out, g: (g,),
    ),
    "matmul": OpDef(
        _matmul_infer,
        lambda attrs, x, y: x @ y,
        lambda attrs, xs, out, ds: ds[0] @ xs[1] + xs[0] @ ds[1],
        lambda attrs, xs, out, g: (g @ xs[1].T, xs[0].T @ g),
    ),
    "affine": OpDef(
        _affine_infer,
        lambda attrs, x, w, b: x @ w + b,
        lambda attrs, xs, out, ds: ds[0] @ xs[1] + xs[0] @ ds[1] + ds[2],
        lambda attrs, xs, out, g: (g @ xs[1].T, xs[0].T @ g, g.sum(axis=0)),
    ),
    "tanh": OpDef(
        _unary_shape,
        lambda attrs, x: np.tanh(x),
        lambda attrs, xs, out, ds: (1.0 - out * out) * ds[0],
        lambda attrs, xs, out, g: (g * (1.0 - out * out),),
    ),
    "silu": OpDef(
        _unary_shape,
        lambda attrs, x: x * _sigmoid(x),
        lambda attrs, xs, out, ds: _silu_deriv(xs[0]) * ds[0],
        lambda attrs, xs, out, g: (g * _silu_deriv(xs[0]),),
    ),
    "sin": OpDef(
        _unary_shape,
        lambda attrs, x: np.sin(x),
        lambda attrs, xs, out, ds: np.cos(xs[0]) * ds[0],
        lambda attrs, xs, out, g: (g * np.cos(xs[0]),),
    ),
    "cos": OpDef(
        _unary_shape,
        lambda attrs, x: np.cos(x),
        lambda attrs, xs, out, ds: -np.sin(xs[0]) * ds[0],
        lambda attrs, xs, out, g: (-g * np.sin(xs[0]),),
    ),
    "exp": OpDef(
        _unary_shape,
        lambda attrs, x: np.exp(x),
        lambda attrs, xs, out, ds: out * ds[0],
        lambda attrs, xs, out, g: (g * out,),
    ),
    "pow_const": OpDef(
        _unary_shape,
        lambda attrs, x: x ** attrs["p"],
        lambda attrs, xs, out, ds: attrs["p"] * xs[0] ** (attrs["p"] - 1.0) * ds[0],
        lambda attrs, xs, out, g: (g * attrs["p"] * xs[0] ** (attrs["p"] - 1.0),),
    ),
    "abs": OpDef(
        _unary_shape,
        lambda attrs, x: np.abs(x),
        lambda attrs, xs, out, ds: np.sign(xs[0]) * ds[0],
        lambda attrs, xs, out, g: (g * np.sign(xs[0]),),
    ),
    "sum": OpDef(
        _sum_infer,
        lambda attrs, x: np.asarray(np.sum(x, axis=attrs["axis"])),
        lambda attrs, xs, out, ds: np.asarray(np.sum(ds[0], axis=attrs["axis"])),
        _sum_vjp,
    ),
    "reshape": OpDef(
        _reshape_infer,
        lambda attrs, x: x.reshape(attrs["shape"]),
        lambda attrs, xs, out, ds: ds[0].reshape(attrs["shape"]),
        lambda attrs, xs, out, g: (g.reshape(xs[0].shape),),
    ),
    "concat": OpDef(
        _concat_infer,
        lambda attrs, *xs: np.concatenate(xs, axis=attrs["axis"]),
        lambda attrs, xs, out, ds: np.concatenate(ds, axis=attrs["axis"]),
        _concat_vjp,
    ),
    "expand": OpDef(
        _expand_infer,
        lambda attrs, x: np.broadcast_to(x, attrs["shape"]),
        lambda attrs, xs, out, ds: np.broadcast_to(ds[0], attrs["shape"]),
        _expand_vjp,
    ),
    "smooth_l1": OpDef(
        _unary_shape,
        lambda attrs, x: np.where(
            np.abs(x) < attrs["beta"],
            0.5 * x * x / attrs["beta"],
            np.abs(x) - 0.5 * attrs["beta"],
        ),
        lambda attrs, xs, out, ds: np.where(
            np.abs(xs[0]) < attrs["beta"], xs[0] / attrs["beta"], np.sign(xs[0])
        )
        * ds[0],
        lambda attrs, xs, out, g: (
            g
            * np.where(
                np.abs(xs[0]) < attrs["beta"], xs[0] / attrs["beta"], np.sign(xs[0])
            ),
        ),
    ),
    "stop_gradient": OpDef(
        _unary_shape,
        lambda attrs, x: x,
        lambda attrs, xs, out, ds: np.zeros_like(out),
        lambda attrs, xs, out, g: (None,),
    ),
}


# ---------------------------------------------------------------------------
# Graph structure and builder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str = ""
    shape: tuple[int, ...] = ()


@dataclass(frozen=True)
class Graph:
    """Topologically ordered primitive nodes; node i reads only nodes < i."""

    nodes: tuple[Node, ...]
    input_ids: tuple[int, ...]
    output_id: int

    @property
    def input_shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.nodes[i].shape for i in self.input_ids)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.nodes[self.output_id].shape


class Var:
    """Handle to a node inside a GraphBuilder; supports natural expression syntax."""

    __slots__ = ("builder", "idx", "shape")

    def __init__(self, builder, idx, shape):
        self.builder = builder
        self.idx = idx
        self.shape = shape

    def __add__(self, other):
        if isinstance(other, Var):
            return self.builder.add(self, other)
        return self.builder.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.builder.sub(self, other)
        return self.builder.add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.builder.mul(self, other)
        return self.builder.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.builder.scale(self, -1.0)

    def __matmul__(self, other):
        return self.builder.matmul(self, other)


class GraphBuilder:
    """Incrementally constructs a Graph with per-node shape validation."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._input_ids: list[int] = []

    def _emit(self, op, inputs, attrs=None, name=""):
        attrs = attrs or {}
        opdef = _OPS[op]
        shapes = [v.shape for v in inputs]
        idx = len(self._nodes)
        label = name or f"{op}_{idx}"
        try:
            shape = opdef.infer(attrs, shapes)
        except ShapeError as e:
            raise ShapeError(f"node {label!r}: {e}") from None
        self._nodes.append(
            Node(op, tuple(v.idx for v in inputs), attrs, label, shape)
        )
        return Var(self, idx, shape)

    def input(self, shape, name=""):
        idx = len(self._nodes)
        label = name or f"input_{idx}"
        self._nodes.append(Node("input", (), {}, label, tuple(shape)))
        self._input_ids.append(idx)
        return Var(self, idx, tuple(shape))

    def const(self, values, name=""):
        arr = as_array(values)
        arr = np.array(arr, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        idx = len(self._nodes)
        label = name or f"const_{idx}"
        self._nodes.append(Node("const", (), {"value": arr}, label, tuple(arr.shape)))
        return Var(self, idx, tuple(arr.shape))

    def add(self, x, y, name=""):
        return self._emit("add", (x, y), name=name)

    def sub(self, x, y, name=""):
        return self._emit("sub", (x, y), name=name)

    def mul(self, x, y, name=""):
        return self._emit("mul", (x, y), name=name)

    def scale(self, x, c, name=""):
        return self._emit("scale", (x,), {"c": float(c)}, name=name)

    def add_scalar(self, x, c, name=""):
        return self._emit("add_scalar", (x,), {"c": float(c)}, name=name)

    def matmul(self, x, y, name=""):
        return self._emit("matmul", (x, y), name=name)

    def affine(self, x, w, b, name=""):
        return self._emit("affine", (x, w, b), name=name)

    def tanh(self, x, name=""):
        return self._emit("tanh", (x,), name=name)

    def silu(self, x, name=""):
        return self._emit("silu", (x,), name=name)

    def sin(self, x, name=""):
        return self._emit("sin", (x,), name=name)

    def cos(self, x, name=""):
        return self._emit("cos", (x,), name=name)

    def exp(self, x, name=""):
        return self._emit("exp", (x,), name=name)

    def pow_const(self, x, p, name=""):
        return self._emit("pow_const", (x,), {"p": float(p)}, name=name)

    def abs(self, x, name=""):
        return self._emit("abs", (x,), name=name)

    def smooth_l1(self, x, beta=1.0, name=""):
        return self._emit("smooth_l1", (x,), {"beta": float(beta)}, name=name)

    def sum(self, x, axis=None, name=""):
        return self._emit("sum", (x,), {"axis": axis}, name=name)

    def mean_all(self, x, name=""):
        n = int(np.prod(x.shape)) if x.shape else 1
        return self.scale(self.sum(x, axis=None), 1.0 / n, name=name)

    def reshape(self, x, shape, name=""):
        return self._emit("reshape", (x,), {"shape": tuple(shape)}, name=name)

    def concat(self, xs, axis, name=""):
        return self._emit("concat", tuple(xs), {"axis": int(axis)}, name=name)

    def expand(self, x, shape, name=""):
        return self._emit("expand", (x,), {"shape": tuple(shape)}, name=name)

    def stop_gradient(self, x, name=""):
        return self._emit("stop_gradient", (x,), name=name)

    def build(self, output: Var) -> Graph:
        return Graph(tuple(self._nodes), tuple(self._input_ids), output.idx)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _check_inputs(graph: Graph, arrays):
    if len(arrays) != len(graph.input_ids):
        raise GraphError(
            f"expected {len(graph.input_ids)} inputs, got {len(arrays)}"
        )
    for arr, nid in zip(arrays, graph.input_ids):
        node = graph.nodes[nid]
        if tuple(arr.shape) != node.shape:
            raise ShapeError(
                f"node {node.name!r}: input shape {tuple(arr.shape)} != "
                f"signature {node.shape}"
            )


def _forward_values(graph: Graph, arrays):
    vals = [None] * len(graph.nodes)
    for arr, nid in zip(arrays, graph.input_ids):
        vals[nid] = arr
    for i, node in enumerate(graph.nodes):
        if node.op == "input":
            continue
        if node.op == "const":
            vals[i] = node.attrs["value"]
            continue
        xs = [vals[j] for j in node.inputs]
        vals[i] = _OPS[node.op].eval(node.attrs, *xs)
    return vals


def forward(graph: Graph, inputs) -> Tensor:
    """Evaluate the graph; deterministic for identical graph and inputs."""
    arrays = [as_array(x) for x in inputs]
    _check_inputs(graph, arrays)
    vals = _forward_values(graph, arrays)
    return Tensor(vals[graph.output_id])


def backward(graph: Graph, inputs, seed_cotangent) -> list[Tensor]:
    """Gradients of seed.output with respect to every graph input."""
    arrays = [as_array(x) for x in inputs]
    _check_inputs(graph, arrays)
    seed = as_array(seed_cotangent)
    vals = _forward_values(graph, arrays)
    out_shape = tuple(vals[graph.output_id].shape)
    if tuple(seed.shape) != out_shape:
        raise ShapeError(
            f"seed shape {tuple(seed.shape)} != output shape {out_shape}"
        )
    adj = [None] * len(graph.nodes)
    adj[graph.output_id] = seed
    for i in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[i]
        g = adj[i]
        if g is None or node.op in ("input", "const"):
            continue
        rule = _OPS[node.op].vjp
        if rule is None:
            raise GraphError(f"node {node.name!r}: no reverse-mode rule")
        xs = [vals[j] for j in node.inputs]
        grads = rule(node.attrs, xs, vals[i], g)
        for j, gj in zip(node.inputs, grads):
            if gj is None:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
    out = []
    for nid in graph.input_ids:
        g = adj[nid]
        if g is None:
            g = np.zeros(graph.nodes[nid].shape)
        out.append(Tensor(g))
    return out


def jvp(graph: Graph, inputs, tangents) -> DualTensor:
    """Forward-mode pass: primal output and directional derivative along tangents."""
    arrays = [as_array(x) for x in inputs]
    tans = [as_array(t) for t in tangents]
    _check_inputs(graph, arrays)
    if len(tans) != len(arrays):
        raise GraphError(f"expected {len(arrays)} tangents, got {len(tans)}")
    for a, t in zip(arrays, tans):
        if a.shape != t.shape:
            raise ShapeError(
                f"tangent shape {tuple(t.shape)} != input shape {tuple(a.shape)}"
            )
    vals = [None] * len(graph.nodes)
    dots = [None] * len(graph.nodes)
    for arr, tan, nid in zip(arrays, tans, graph.input_ids):
        vals[nid] = arr
        dots[nid] = tan
    for i, node in enumerate(graph.nodes):
        if node.op == "input":
            continue
        if node.op == "const":
            vals[i] = node.attrs["value"]
            dots[i] = np.zeros(node.shape)
            continue
        opdef = _OPS[node.op]
        xs = [vals[j] for j in node.inputs]
        ds = [dots[j] for j in node.inputs]
        vals[i] = opdef.eval(node.attrs, *xs)
        dots[i] = opdef.jvp(node.attrs, xs, vals[i], ds)
    return DualTensor(Tensor(vals[graph.output_id]), Tensor(dots[graph.output_id]))


# ---------------------------------------------------------------------------
# Finite-difference oracle harness
# ---------------------------------------------------------------------------


def _rel_err(a, b):
    if not (np.isfinite(a) and np.isfinite(b)):
        return float("inf")
    scale = max(abs(a), abs(b), 1e-6)
    return abs(a - b) / scale


def grad_check(graph: Graph, inputs, mode="reverse", step=None, direction_seed=0):
    """Worst-case relative error of the requested mode against central differences.

    Reports inf when any evaluation is non-finite instead of raising.
    """
    arrays = [np.array(as_array(x), copy=True) for x in inputs]

    def scalar_out(arrs, seed):
        out = forward(graph, arrs).array
        return float(np.sum(seed * out))

    np_err = np.seterr(all="ignore")
    try:
        return _grad_check_inner(graph, arrays, mode, step, direction_seed, scalar_out)
    finally:
        np.seterr(**np_err)


def _grad_check_inner(graph, arrays, mode, step, direction_seed, scalar_out):
    if mode == "reverse":
        h = step if step is not None else 1e-5
        out = forward(graph, arrays).array
        seed = np.ones_like(out)
        grads = backward(graph, arrays, seed)
        worst = 0.0
        for k, x in enumerate(arrays):
            ana = grads[k].array
            for idx in np.ndindex(x.shape):
                orig = x[idx]
                x[idx] = orig + h
                fp = scalar_out(arrays, seed)
                x[idx] = orig - h
                fm = scalar_out(arrays, seed)
                x[idx] = orig
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, _rel_err(float(ana[idx]), num))
        return worst
    if mode == "forward":
        h = step if step is not None else 1e-4
        rng = np.random.default_rng(direction_seed)
        dirs = [rng.standard_normal(x.shape) for x in arrays]
        dual = jvp(graph, arrays, dirs)
        plus = forward(graph, [x + h * d for x, d in zip(arrays, dirs)]).array
        minus = forward(graph, [x - h * d for x, d in zip(arrays, dirs)]).array
        num = (plus - minus) / (2.0 * h)
        ana = dual.tangent.array
        worst = 0.0
        for idx in np.ndindex(num.shape):
            worst = max(worst, _rel_err(float(ana[idx]), float(num[idx])))
        return worst
    raise GraphError(f"unknown mode {mode!r}")


def require_finite(arr, context=""):
    """Divergence detector used at module boundaries."""
    a = as_array(arr)
    if not np.all(np.isfinite(a)):
        raise DivergenceError(f"non-finite values detected{': ' + context if context else ''}")
    return a
