"""Small tape-based reverse-mode autodiff engine on top of numpy.

Ops record onto the :class:`Graph` that is active in the current context.
A graph in ``INFERENCE`` mode (or no graph at all) records nothing and
saves nothing, which is what the memory-bounded trainer relies on.

Every node saves only what its vector-Jacobian product needs, and the
saved element count is reported to the graph's :class:`MemMeter`.
Parameter leaves are never counted: they live for the whole run anyway.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

RECORDING = "recording"
INFERENCE = "inference"

LAYERNORM_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

_current_graph: contextvars.ContextVar[Graph | None] = contextvars.ContextVar(
    "promptmil_graph", default=None
)
_debug = False


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle finite-value assertions on op inputs."""
    global _debug
    _debug = bool(flag)


class MemMeter:
    """Counts saved-activation elements; a device-independent memory proxy."""

    def __init__(self) -> None:
        self.live_activation_elems = 0
        self.peak_activation_elems = 0

    def alloc(self, n: int) -> None:
        self.live_activation_elems += int(n)
        if self.live_activation_elems > self.peak_activation_elems:
            self.peak_activation_elems = self.live_activation_elems

    def free(self, n: int) -> None:
        self.live_activation_elems -= int(n)

    def reset(self) -> None:
        self.live_activation_elems = 0
        self.peak_activation_elems = 0

    def __repr__(self) -> str:
        return (
            f"MemMeter(live={self.live_activation_elems}, "
            f"peak={self.peak_activation_elems})"
        )


@dataclass
class Node:
    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: list = field(default_factory=list)
    saved_elems: int = 0


class Graph:
    """Op tape. Use as a context manager to make it the active graph."""

    def __init__(self, mode: str = RECORDING, meter: MemMeter | None = None):
        if mode not in (RECORDING, INFERENCE):
            raise ValueError(f"unknown graph mode {mode!r}")
        self.mode = mode
        self.meter = meter if meter is not None else MemMeter()
        self.nodes: list[Node | None] = []
        self.released = False
        self._saved_refs: dict[int, list] = {}
        self._token = None

    @property
    def recording(self) -> bool:
        return self.mode == RECORDING and not self.released

    def __enter__(self) -> Graph:
        self._token = _current_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_graph.reset(self._token)
        self._token = None

    def _save(self, arrays: Iterable[np.ndarray]) -> int:
        # the same buffer saved by two nodes is counted once
        count = 0
        for a in arrays:
            key = id(a)
            entry = self._saved_refs.get(key)
            if entry is None:
                self._saved_refs[key] = [a, 1]
                count += a.size
            else:
                entry[1] += 1
        self.meter.alloc(count)
        return count

    def _unsave(self, arrays: Iterable[np.ndarray]) -> None:
        for a in arrays:
            entry = self._saved_refs[id(a)]
            entry[1] -= 1
            if entry[1] == 0:
                del self._saved_refs[id(a)]
                self.meter.free(a.size)

    def append(self, node: Node) -> int:
        node.saved_elems = self._save(node.saved)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def release(self) -> None:
        """Drop every node and its saved activations."""
        for node in self.nodes:
            if node is not None:
                self._unsave(node.saved)
        self.nodes = []
        self.released = True

    @property
    def saved_elems(self) -> int:
        return sum(entry[0].size for entry in self._saved_refs.values())


def current_graph() -> Graph | None:
    return _current_graph.get()


def no_grad() -> Graph:
    """A fresh inference-mode graph, for ``with no_grad(): ...``."""
    return Graph(mode=INFERENCE)


class Tensor:
    """An array that can take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self._requires_grad = bool(requires_grad)
        self.name = name
        self.graph: Graph | None = None
        self.node_id: int | None = None

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        if self.node_id is not None:
            raise GraphError("requires_grad can only be set on leaf tensors")
        self._requires_grad = bool(flag)

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731
    __getitem__ = lambda self, idx: getitem(self, idx)  # noqa: E731

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> Tensor:
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1) -> Tensor:
        return transpose(self, a, b)

    @property
    def T(self) -> Tensor:
        return transpose(self, -2, -1)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _tracked(t: Tensor, graph: Graph) -> bool:
    if t.node_id is not None:
        if t.graph is not graph:
            raise GraphError("tensor belongs to a different graph")
        return True
    return t.requires_grad


def _check_finite(tensors) -> None:
    for t in tensors:
        assert np.all(np.isfinite(t.data)), "non-finite op input"


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp_builder) -> Tensor:
    """Wrap ``out``; if recording, append a node built by ``vjp_builder``.

    ``vjp_builder(needs)`` receives a per-input flag saying which input
    gradients are wanted and returns ``(vjp, saved_arrays)``.
    """
    if _debug:
        _check_finite(inputs)
    result = Tensor(out)
    graph = current_graph()
    if graph is None or not graph.recording:
        return result
    needs = tuple(_tracked(t, graph) for t in inputs)
    if not any(needs):
        return result
    vjp, saved = vjp_builder(needs)
    node = Node(op, inputs, vjp, list(saved))
    result.node_id = graph.append(node)
    result.graph = graph
    result._requires_grad = True
    return result


def _act(*items) -> list[np.ndarray]:
    """Arrays that count as saved activations (parameter leaves excluded)."""
    out = []
    for it in items:
        if isinstance(it, Tensor):
            if it.node_id is not None:
                out.append(it.data)
        else:
            out.append(it)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def build(needs):
        return (lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))), []

    return _make("add", a.data + b.data, (a, b), build)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def build(needs):
        return (lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))), []

    return _make("sub", a.data - b.data, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def build(needs):
        def vjp(g):
            ga = _unbroadcast(g * bd, sa) if needs[0] else None
            gb = _unbroadcast(g * ad, sb) if needs[1] else None
            return ga, gb
        saved = (_act(b) if needs[0] else []) + (_act(a) if needs[1] else [])
        return vjp, saved

    return _make("mul", ad * bd, (a, b), build)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    sa, sb = a.shape, b.shape
    out = a.data / b.data
    bd = b.data

    def build(needs):
        def vjp(g):
            ga = _unbroadcast(g / bd, sa) if needs[0] else None
            gb = _unbroadcast(-g * out / bd, sb) if needs[1] else None
            return ga, gb
        saved = _act(b) if (needs[0] or needs[1]) else []
        if needs[1]:
            saved = saved + [out]
        return vjp, saved

    return _make("div", out, (a, b), build)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda needs: ((lambda g: (g * out,)), [out]))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make("log", np.log(x), (a,), lambda needs: ((lambda g: (g / x,)), _act(a)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,),
                 lambda needs: ((lambda g: (g * (1.0 - out * out),)), [out]))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make("sigmoid", out, (a,),
                 lambda needs: ((lambda g: (g * out * (1.0 - out),)), [out]))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda needs: ((lambda g: (g * mask,)), [mask]))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def build(needs):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (lambda g: (g * sig,)), [sig]

    return _make("softplus", out, (a,), build)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def build(needs):
        def vjp(g):
            tt = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + tt) + 0.5 * x * (1.0 - tt * tt) * d_inner),)
        return vjp, _act(a)

    return _make("gelu", out, (a,), build)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def build(needs):
        def vjp(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), sa) if needs[0] else None
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), sb) if needs[1] else None
            return ga, gb
        saved = (_act(b) if needs[0] else []) + (_act(a) if needs[1] else [])
        return vjp, saved

    return _make("matmul", np.matmul(ad, bd), (a, b), build)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda needs: ((lambda g: (g.reshape(src),)), []))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return _make("broadcast", out, (a,), lambda needs: ((lambda g: (_unbroadcast(g, src),)), []))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("permute", np.transpose(a.data, axes), (a,),
                 lambda needs: ((lambda g: (np.transpose(g, inv),)), []))


def transpose(a, ax1: int = -2, ax2: int = -1) -> Tensor:
    a = as_tensor(a)
    return _make("transpose", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda needs: ((lambda g: (np.swapaxes(g, ax1, ax2),)), []))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def build(needs):
        return (lambda g: tuple(np.split(g, bounds, axis=axis))), []

    return _make("concat", out, ts, build)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src, dt = a.shape, a.dtype
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def build(needs):
        def vjp(g):
            full = np.zeros(src, dtype=dt)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)
        return vjp, []

    return _make("slice", np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (a,), build)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    axes = _norm_axis(axis, a.ndim)

    def build(needs):
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, src).copy(),)
        return vjp, []

    return _make("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), build)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([src[ax] for ax in axes])) if axes else 1

    def build(needs):
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, src).copy(),)
        return vjp, []

    return _make("mean", np.mean(a.data, axis=axes, keepdims=keepdims), (a,), build)


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    src = a.shape
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def build(needs):
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros(src, dtype=g.dtype)
            np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
            return (full,)
        return vjp, [idx]

    return _make("max", out, (a,), build)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)

    def build(needs):
        def vjp(g):
            return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
        return vjp, [out]

    return _make("softmax", out, (a,), build)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    z = np.exp(x - m)
    s = np.sum(z, axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis)

    def build(needs):
        probs = z / s

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * probs,)
        return vjp, [probs]

    return _make("logsumexp", out, (a,), build)


def layernorm(x, weight=None, bias=None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    w = as_tensor(weight) if weight is not None else None
    b = as_tensor(bias) if bias is not None else None
    d = x.shape[-1]
    for p, nm in ((w, "weight"), (b, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layernorm: {nm} shape {p.shape} does not match input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if w is not None:
        out = out * w.data
    if b is not None:
        out = out + b.data
    inputs = tuple(t for t in (x, w, b) if t is not None)
    wd = w.data if w is not None else None

    def build(needs):
        need_x = needs[0]
        need_w = w is not None and needs[1]
        need_b = b is not None and needs[-1]

        def vjp(g):
            grads = []
            if need_x:
                gh = g * wd if wd is not None else g
                gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                             - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
                grads.append(gx)
            else:
                grads.append(None)
            lead = tuple(range(g.ndim - 1))
            if w is not None:
                grads.append(np.sum(g * xhat, axis=lead) if need_w else None)
            if b is not None:
                grads.append(np.sum(g, axis=lead) if need_b else None)
            return tuple(grads)

        saved = []
        if need_x or need_w:
            saved = [xhat] + ([rstd] if need_x else [])
        return vjp, saved

    return _make("layernorm", out, inputs, build)


# ---------------------------------------------------------------- backward

def _backprop(output: Tensor, seed: np.ndarray, wrt, release: bool):
    graph = output.graph
    grads_out: dict[Tensor, np.ndarray] = {}
    if output.node_id is None and not output.requires_grad:
        raise GraphError("output was not recorded (inference mode or no trainable inputs)")
    if output.node_id is None:
        if output.requires_grad:
            grads_out[output] = np.array(seed, dtype=output.dtype, copy=True)
    else:
        if graph is None or graph.released:
            raise GraphError("graph has been released; cannot run backward twice")
        if graph.mode != RECORDING:
            raise GraphError("backward through an inference-mode graph")
        pending: dict[int, np.ndarray] = {output.node_id: np.array(seed, dtype=output.dtype)}
        leaf_grads: dict[int, list] = {}
        for nid in range(output.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = graph.nodes[nid]
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if t.node_id is not None:
                    prev = pending.get(t.node_id)
                    pending[t.node_id] = gi if prev is None else prev + gi
                elif t.requires_grad:
                    entry = leaf_grads.get(id(t))
                    if entry is None:
                        leaf_grads[id(t)] = [t, np.array(gi, copy=True)]
                    else:
                        entry[1] = entry[1] + gi
        for t, gi in leaf_grads.values():
            grads_out[t] = gi.reshape(t.shape)
        if release:
            graph.release()
    if wrt is not None:
        for t in wrt:
            if t not in grads_out:
                grads_out[t] = np.zeros(t.shape, dtype=t.dtype)
    return grads_out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None,
             release: bool = True) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every reachable trainable leaf.

    Leaves listed in ``wrt`` that the loss does not reach get zero arrays.
    The graph is released afterwards unless ``release=False``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    return _backprop(loss, np.ones(loss.shape, dtype=loss.dtype), wrt, release)


def backward_with_seed(output: Tensor, seed_grad, wrt: Iterable[Tensor] | None = None,
                       release: bool = True) -> dict[Tensor, np.ndarray]:
    """Backpropagate an external cotangent ``seed_grad`` from a non-scalar output.

    Equivalent to ``backward(sum(output * seed_grad))`` with the seed held
    constant.
    """
    seed = np.asarray(seed_grad.data if isinstance(seed_grad, Tensor) else seed_grad)
    if seed.shape != output.shape:
        raise ShapeError(
            f"seed shape {seed.shape} does not match output shape {output.shape}")
    return _backprop(output, seed.astype(output.dtype, copy=False), wrt, release)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Worst relative disagreement between autodiff and central differences.

    ``f`` must rebuild the scalar loss from the current values of ``params``
    every time it is called.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    with Graph():
        loss = f()
    grads = backward(loss, wrt=params)

    def value() -> float:
        with Graph(mode=INFERENCE):
            return float(f().data.reshape(-1)[0])

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check needs contiguous parameter buffers")
        analytic = grads[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst

