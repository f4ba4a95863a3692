"""Reverse-mode automatic differentiation with differentiable gradients.

Values are dense 64-bit float numpy arrays ("tensors": row-major, all finite
unless an operation legitimately produced otherwise).  Operations between
``Variable`` objects are recorded on an append-only ``DiffGraph`` tape.  The
backward pass of every primitive is itself written in terms of these same
primitives, so calling :func:`grad` with ``differentiable=True`` appends the
gradient computation to the tape and the result can be differentiated again.
This is what lets a training loss penalize input gradients: the penalty's
gradient with respect to network parameters is an ordinary second pass.

Broadcasting in elementwise operations is deliberately restricted: operands
must have identical shapes, or one of them must be a scalar or a trailing
suffix of the other's shape (e.g. adding a ``(out,)`` bias to a ``(batch,
out)`` matrix).  Anything fancier is rejected up front.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffGraph",
    "Variable",
    "ShapeError",
    "GraphError",
    "constant",
    "grad",
    "set_debug_check_finite",
    "save_tensor",
    "load_tensor",
    "tensor_bytes",
    "tensor_from_bytes",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "expand",
    "clamp",
    "exp",
    "log",
    "square",
    "absolute",
    "power",
    "reduce_sum",
    "reduce_max",
    "conv2d",
    "im2col",
    "col2im",
    "avg_pool",
    "avg_unpool",
    "hhrelu",
    "relu",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Raised on misuse of the tape (mixed graphs, non-scalar grad target)."""


_DEBUG_CHECK_FINITE = False


def set_debug_check_finite(enabled: bool) -> None:
    """Enable a debug mode that raises as soon as an op emits a non-finite value."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class _Node:
    """One recorded primitive application: inputs, output, tag, and its vjp."""

    __slots__ = ("op", "input_ids", "output_id", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.input_ids = tuple(v.vid for v in inputs)
        self.output_id = output.vid
        self.vjp = vjp


class DiffGraph:
    """Append-only operation tape.

    Nodes are stored in topological order by construction (an op can only
    consume Variables that already exist).  A differentiable gradient pass
    appends its own nodes to the same tape, enabling second differentiation.
    A graph and its Variables are confined to one thread; independent graphs
    may be used concurrently.
    """

    __slots__ = ("nodes", "roots", "recording", "_next_vid")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.roots: list[int] = []
        self.recording = True
        self._next_vid = 0

    def leaf(self, value, requires_grad: bool = False) -> "Variable":
        """Register a leaf variable (parameter or input) on this graph."""
        var = Variable(_as_array(value), graph=self, requires_grad=requires_grad)
        self.roots.append(var.vid)
        return var

    def _new_vid(self) -> int:
        vid = self._next_vid
        self._next_vid += 1
        return vid


class Variable:
    """A tensor value bound to (at most) one DiffGraph.

    Variables with ``graph=None`` are constants: they participate in
    arithmetic but receive no gradient and record nothing.
    """

    __slots__ = ("data", "graph", "requires_grad", "vid", "node_index")

    def __init__(self, data, graph=None, requires_grad=False):
        self.data = _as_array(data)
        self.graph = graph
        self.requires_grad = requires_grad
        self.vid = graph._new_vid() if graph is not None else -1
        self.node_index = None  # index of producing node, None for leaves

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "const" if self.graph is None else f"vid={self.vid}"
        return f"Variable({tag}, shape={self.shape})"

    # Arithmetic sugar; constants are coerced automatically.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(value) -> Variable:
    """Wrap a raw value as a graph-free constant Variable."""
    return Variable(_as_array(value))


def _coerce(value) -> Variable:
    if isinstance(value, Variable):
        return value
    return constant(value)


def _common_graph(inputs: Sequence[Variable]):
    graph = None
    for v in inputs:
        if v.graph is None:
            continue
        if graph is None:
            graph = v.graph
        elif graph is not v.graph:
            raise GraphError("operands belong to different graphs")
    return graph


def _apply(op: str, inputs: Sequence[Variable], value: np.ndarray,
           vjp: Callable) -> Variable:
    """Create the output Variable for a primitive, recording a node if live.

    ``vjp(grad_out)`` must return one cotangent per input (``None`` for
    inputs that cannot receive gradient) and must be expressed through these
    same primitives so that gradients stay differentiable.
    """
    if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    graph = _common_graph(inputs)
    if graph is None or not graph.recording:
        return Variable(value)
    out = Variable(value, graph=graph)
    node = _Node(op, tuple(inputs), out, vjp)
    graph.nodes.append(node)
    out.node_index = len(graph.nodes) - 1
    return out


# ---------------------------------------------------------------------------
# Broadcasting helpers (exact shape, scalar, or trailing-suffix only)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big):
        return False
    return big[len(big) - len(small):] == small


def _check_elementwise(a: Variable, b: Variable, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are neither equal nor "
            "scalar/trailing-suffix broadcastable")


def _unbroadcast(g: Variable, target_shape: tuple) -> Variable:
    """Reduce a broadcast cotangent back down to ``target_shape``."""
    if g.shape == target_shape:
        return g
    extra = len(g.shape) - len(target_shape)
    summed = reduce_sum(g, axis=tuple(range(extra)))
    if summed.shape != target_shape:  # scalar target
        summed = reshape(summed, target_shape)
    return summed


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Variable:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "add")
    return _apply(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Variable:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "sub")
    return _apply(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b) -> Variable:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "mul")
    return _apply(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(mul(g, b), a.shape),
                   _unbroadcast(mul(g, a), b.shape)))


def div(a, b) -> Variable:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "div")
    return _apply(
        "div", (a, b), a.data / b.data,
        lambda g: (_unbroadcast(div(g, b), a.shape),
                   _unbroadcast(neg(div(mul(g, a), square(b))), b.shape)))


def neg(a) -> Variable:
    a = _coerce(a)
    return _apply("neg", (a,), -a.data, lambda g: (neg(g),))


def exp(a) -> Variable:
    a = _coerce(a)
    out = _apply("exp", (a,), np.exp(a.data), None)
    # vjp multiplies by the (recorded) output so second order flows through it
    _set_vjp(out, lambda g: (mul(g, out),))
    return out


def log(a) -> Variable:
    a = _coerce(a)
    return _apply("log", (a,), np.log(a.data), lambda g: (div(g, a),))


def square(a) -> Variable:
    a = _coerce(a)
    return _apply("square", (a,), np.square(a.data),
                  lambda g: (mul(g, mul(a, 2.0)),))


def absolute(a) -> Variable:
    a = _coerce(a)
    sign = np.sign(a.data)
    return _apply("abs", (a,), np.abs(a.data), lambda g: (mul(g, sign),))


def power(a, n: int) -> Variable:
    """Integer power, including negative exponents for reciprocals."""
    a = _coerce(a)
    if not isinstance(n, (int, np.integer)):
        raise ShapeError("power expects an integer exponent")
    n = int(n)
    if n == 0:
        vjp = lambda g: (mul(g, 0.0),)
    elif n == 1:
        vjp = lambda g: (g,)
    else:
        vjp = lambda g: (mul(g, mul(power(a, n - 1), float(n))),)
    return _apply("power", (a,), a.data ** n, vjp)


def clamp(a, lo=None, hi=None) -> Variable:
    """Elementwise clip to [lo, hi]; either bound may be None.

    The derivative passes gradient on the closed interval, so a value sitting
    exactly at a bound still receives gradient.
    """
    a = _coerce(a)
    value = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)
    return _apply("clamp", (a,), value, lambda g: (mul(g, mask),))


def hhrelu(a, d: float = 1.0) -> Variable:
    """Rectifier with a quadratic toe so its first derivative is continuous.

    0 for x < 0, d*x^2 for 0 <= x < 1/(2d), x - 1/(4d) above.  Its derivative
    is clamp(2*d*x, 0, 1), which is itself differentiable almost everywhere,
    so losses built on this activation's input gradients stay trainable.
    """
    a = _coerce(a)
    if d <= 0:
        raise ValueError("hhrelu requires d > 0")
    x = a.data
    value = np.where(x < 0, 0.0, np.where(x < 1.0 / (2 * d), d * x * x,
                                          x - 1.0 / (4 * d)))
    return _apply("hhrelu", (a,), value,
                  lambda g: (mul(g, clamp(mul(a, 2.0 * d), 0.0, 1.0)),))


def relu(a) -> Variable:
    return clamp(a, lo=0.0)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a, shape) -> Variable:
    a = _coerce(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(a.shape, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old_shape = a.shape
    return _apply("reshape", (a,), a.data.reshape(shape),
                  lambda g: (reshape(g, old_shape),))


def transpose(a, axes=None) -> Variable:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply("transpose", (a,), np.transpose(a.data, axes),
                  lambda g: (transpose(g, inverse),))


def expand(a, shape) -> Variable:
    """Broadcast to ``shape`` (numpy rules); adjoint is a sum-reduce."""
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    value = np.broadcast_to(a.data, shape).copy()
    in_shape = a.shape

    def vjp(g):
        pad = len(shape) - len(in_shape)
        axes = list(range(pad))
        for i, s in enumerate(in_shape):
            if s == 1 and shape[pad + i] != 1:
                axes.append(pad + i)
        out = reduce_sum(g, axis=tuple(axes), keepdims=False) if axes else g
        if out.shape != in_shape:
            out = reshape(out, in_shape)
        return (out,)

    return _apply("expand", (a,), value, vjp)


# ---------------------------------------------------------------------------
# Reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False) -> Variable:
    a = _coerce(a)
    axes = _norm_axis(axis, a.data.ndim)
    value = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        kept = g
        if not keepdims and in_shape:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
            kept = reshape(g, kshape)
        return (expand(kept, in_shape),)

    return _apply("sum", (a,), value, vjp)


def reduce_max(a, axis=None, keepdims=False) -> Variable:
    a = _coerce(a)
    axes = _norm_axis(axis, a.data.ndim)
    value = a.data.max(axis=axes, keepdims=True)
    mask = (a.data == value).astype(np.float64)
    mask /= mask.sum(axis=axes, keepdims=True)  # split gradient across ties
    out_value = value if keepdims else value.squeeze(axes)
    in_shape = a.shape
    kshape = value.shape

    def vjp(g):
        kept = g if keepdims else reshape(g, kshape)
        return (mul(expand(kept, in_shape), mask),)

    return _apply("max", (a,), out_value, vjp)


# ---------------------------------------------------------------------------
# Linear algebra and convolution building blocks


def matmul(a, b) -> Variable:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return _apply("matmul", (a, b), a.data @ b.data,
                  lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def _conv_geometry(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"convolution window {kh}x{kw} stride {stride} pad {pad} "
                         f"does not fit input {h}x{w}")
    return oh, ow


def _im2col_value(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im_value(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def im2col(a, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Variable:
    """Extract convolution patches: (N,C,H,W) -> (N, C*kh*kw, OH*OW).

    Linear, with col2im as its exact adjoint, so convolutions built from it
    admit exact second derivatives.
    """
    a = _coerce(a)
    if a.data.ndim != 4:
        raise ShapeError("im2col expects a (N,C,H,W) input")
    x_shape = a.shape
    value = _im2col_value(a.data, kh, kw, stride, pad)
    return _apply("im2col", (a,), value,
                  lambda g: (col2im(g, x_shape, kh, kw, stride, pad),))


def col2im(a, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Variable:
    a = _coerce(a)
    x_shape = tuple(int(s) for s in x_shape)
    value = _col2im_value(a.data, x_shape, kh, kw, stride, pad)
    return _apply("col2im", (a,), value,
                  lambda g: (im2col(g, kh, kw, stride, pad),))


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Variable:
    """2-D convolution of (N,C,H,W) by (F,C,kh,kw) kernels via patch
    extraction plus matmul, so every piece has an exact adjoint and the
    whole op admits exact second derivatives."""
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects (N,C,H,W) input and (F,C,kh,kw) kernel")
    n, c, h, win = x.shape
    f, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    oh, ow = _conv_geometry(h, win, kh, kw, stride, pad)
    cols = im2col(x, kh, kw, stride=stride, pad=pad)
    _, ckk, l = cols.shape
    flat = reshape(transpose(cols, (0, 2, 1)), (n * l, ckk))
    out = matmul(flat, transpose(reshape(w, (f, ckk))))
    if b is not None:
        out = add(out, _coerce(b))
    maps = transpose(reshape(out, (n, l, f)), (0, 2, 1))
    return reshape(maps, (n, f, oh, ow))


def avg_pool(a, k: int) -> Variable:
    """Non-overlapping k x k average pooling over (N,C,H,W)."""
    a = _coerce(a)
    n, c, h, w = a.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool window {k} does not divide {h}x{w}")
    value = a.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    return _apply("avg_pool", (a,), value, lambda g: (avg_unpool(g, k),))


def avg_unpool(a, k: int) -> Variable:
    """Adjoint of avg_pool: spread each cell over its k x k window / k^2."""
    a = _coerce(a)
    value = np.repeat(np.repeat(a.data, k, axis=2), k, axis=3) / (k * k)
    return _apply("avg_unpool", (a,), value, lambda g: (avg_pool(g, k),))


# ---------------------------------------------------------------------------
# Backward pass


def _set_vjp(out: Variable, vjp) -> None:
    if out.graph is not None and out.node_index is not None:
        out.graph.nodes[out.node_index].vjp = vjp


def grad(output: Variable, wrt, differentiable: bool = False):
    """Gradients of a scalar ``output`` with respect to ``wrt`` Variables.

    Returns one gradient per ``wrt`` entry, each matching that Variable's
    shape.  With ``differentiable=True`` the results are Variables recorded
    on the same graph, so expressions of them can be differentiated again;
    otherwise plain float64 arrays are returned and nothing is recorded.
    Variables not reachable from ``output`` yield zeros.
    """
    single = isinstance(wrt, Variable)
    targets = [wrt] if single else list(wrt)
    if output.shape != ():
        raise GraphError(f"grad target must be scalar, got shape {output.shape}")
    graph = output.graph
    if graph is None:
        raise GraphError("grad target is a constant with no graph")
    for t in targets:
        if t.graph is not graph:
            raise GraphError("wrt Variable does not belong to the output's graph")

    was_recording = graph.recording
    graph.recording = bool(differentiable)
    try:
        cotangents: dict[int, Variable] = {}
        seed = graph.leaf(np.ones(())) if differentiable \
            else constant(np.ones(()))
        cotangents[output.vid] = seed
        end = output.node_index
        if end is not None:
            for node in reversed(graph.nodes[:end + 1]):
                g_out = cotangents.get(node.output_id)
                if g_out is None:
                    continue
                contribs = node.vjp(g_out)
                for inp, contrib in zip(node.inputs, contribs):
                    if contrib is None or inp.graph is None:
                        continue
                    prev = cotangents.get(inp.vid)
                    cotangents[inp.vid] = contrib if prev is None \
                        else add(prev, contrib)
        results = []
        for t in targets:
            got = cotangents.get(t.vid)
            if got is None:
                zero = np.zeros(t.shape, dtype=np.float64)
                got = Variable(zero, graph=graph) if differentiable \
                    else constant(zero)
            results.append(got if differentiable else got.data)
    finally:
        graph.recording = was_recording
    return results[0] if single else results


# ---------------------------------------------------------------------------
# "AETN" binary tensor file format: magic, u32 rank, u32 dims, f64 payload,
# all little-endian.  Round-trips are bit exact.

_AETN_MAGIC = b"AETN"


def tensor_bytes(arr) -> bytes:
    arr = _as_array(arr)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = arr.copy(order="C")
    header = _AETN_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != _AETN_MAGIC:
        raise ValueError("not an AETN tensor: bad magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise ValueError(f"AETN payload length {len(blob)} != expected {expected}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
