"""Reverse-mode automatic differentiation over small dense graphs, plus Adam.

Graphs are built once from symbolic nodes and are immutable afterwards;
`forward`/`gradient` keep all per-call state in local dictionaries, so the
same graph can be evaluated concurrently.  Tensors are plain numpy arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import signal as sig
from .errors import BindingError, ContractError, NumericError, ShapeError

Tensor = np.ndarray

# l2_norm is sqrt(sum(x^2) + eps) so its gradient exists at x == 0.
L2_EPS = 1e-12

_ids = itertools.count()


class Node:
    """One operation (or leaf/constant) in a computation graph."""

    __slots__ = ("id", "op", "inputs", "params", "name", "kind")

    def __init__(self, op, inputs=(), name=None, kind=None, **params):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.params = params
        self.name = name
        self.kind = kind

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{tag} #{self.id}>"


class Graph:
    """Immutable DAG rooted at a single node, with named bindable leaves.

    `watch` maps names to interior nodes whose forward values callers want
    to read back (e.g. loss components, masks).
    """

    def __init__(self, root: Node, watch: dict[str, Node] | None = None):
        self.root = root
        self.watch = dict(watch or {})
        self.nodes = _topo_order([root, *self.watch.values()])
        self.leaves = {n.name: n for n in self.nodes if n.op == "leaf"}

    def leaf_names(self, kind: str | None = None) -> list[str]:
        return [n.name for n in self.nodes if n.op == "leaf" and (kind is None or n.kind == kind)]


def _topo_order(roots) -> list[Node]:
    order, seen = [], set()
    stack = [(r, False) for r in reversed(roots)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for child in reversed(node.inputs):
            stack.append((child, False))
    return order


# ---------------------------------------------------------------------------
# graph builders

def leaf(name: str, kind: str = "input") -> Node:
    if kind not in ("input", "param"):
        raise ValueError(f"leaf kind must be 'input' or 'param', got {kind!r}")
    return Node("leaf", name=name, kind=kind)


def constant(value) -> Node:
    return Node("const", value=np.asarray(value, dtype=np.float64))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def add(a, b) -> Node:
    return Node("add", (_as_node(a), _as_node(b)))


def sub(a, b) -> Node:
    return Node("sub", (_as_node(a), _as_node(b)))


def mul(a, b) -> Node:
    return Node("mul", (_as_node(a), _as_node(b)))


def scalar_mul(a, c: float) -> Node:
    return Node("scalar_mul", (_as_node(a),), c=float(c))


def matmul(a, b) -> Node:
    return Node("matmul", (_as_node(a), _as_node(b)))


def sigmoid(a) -> Node:
    return Node("sigmoid", (_as_node(a),))


def tanh(a) -> Node:
    return Node("tanh", (_as_node(a),))


def relu(a) -> Node:
    return Node("relu", (_as_node(a),))


def conv1d(x, w, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of [C_in, L] (or [L]) with kernels [C_out, C_in, K]."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    return Node("conv1d", (_as_node(x), _as_node(w)), stride=int(stride), pad=int(pad))


def upsample_repeat(x, factor: int) -> Node:
    """Repeat each time step of [C, L] `factor` times along the last axis."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return Node("upsample_repeat", (_as_node(x),), factor=int(factor))


def frame(x, cfg: sig.StftConfig) -> Node:
    """Slice a 1-D signal into overlapping frames (same layout as signal.frame_signal)."""
    return Node("frame", (_as_node(x),), cfg=cfg)


def dft_magnitude(windowed_frames, cfg: sig.StftConfig) -> Node:
    """Smoothed one-sided DFT magnitudes of pre-windowed frames."""
    basis_c, basis_s = sig.dft_basis(cfg.frame_len)
    return Node("dft_magnitude", (_as_node(windowed_frames),), basis_c=basis_c, basis_s=basis_s)


def overlap_add(time_frames, cfg: sig.StftConfig, out_len: int) -> Node:
    """Windowed overlap-add synthesis back to a 1-D signal of out_len samples."""
    return Node("overlap_add", (_as_node(time_frames),), cfg=cfg, out_len=int(out_len))


def mse(a, b) -> Node:
    """Mean squared error (mean reduction over all elements)."""
    return Node("mse", (_as_node(a), _as_node(b)))


def l2_norm(a) -> Node:
    return Node("l2_norm", (_as_node(a),))


def concat(parts, axis: int = 0) -> Node:
    return Node("concat", tuple(_as_node(p) for p in parts), axis=int(axis))


def slice_(a, bounds) -> Node:
    """Slice leading axes by (start, stop) pairs, e.g. ((1, 5), (0, 3))."""
    bounds = tuple((int(s), int(e)) for s, e in bounds)
    return Node("slice", (_as_node(a),), bounds=bounds)


# ---------------------------------------------------------------------------
# forward evaluation

def _broadcast_check(a_shape, b_shape, op):
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a_shape} with {b_shape}") from exc


def _slice_key(bounds):
    return tuple(slice(s, e) for s, e in bounds)


def _conv_out_len(length, k, stride, pad):
    return (length + 2 * pad - k) // stride + 1


def _conv_phases(xp, stride):
    # Contiguous per-phase copies; BLAS on strided views is an order of
    # magnitude slower than on contiguous blocks.
    if stride == 1:
        return [xp]
    return [np.ascontiguousarray(xp[:, p::stride]) for p in range(stride)]


def _conv_forward(x2, w, stride, pad):
    # One small matmul per kernel tap; tap `off` reads phase off%stride at
    # offset off//stride, which is a contiguous slice of that phase buffer.
    # The kernel is re-laid-out tap-major first: a strided [C_out, C_in]
    # view per tap would knock the matmuls off the fast BLAS path.
    cout, cin, k = w.shape
    xp = np.pad(x2, ((0, 0), (pad, pad)))
    lout = _conv_out_len(x2.shape[1], k, stride, pad)
    phases = _conv_phases(xp, stride)
    w_taps = np.ascontiguousarray(w.transpose(2, 0, 1))
    out = np.zeros((cout, lout))
    for off in range(k):
        block = phases[off % stride][:, off // stride : off // stride + lout]
        out += w_taps[off] @ block
    return out


def _forward_op(node: Node, xs: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "add":
        _broadcast_check(xs[0].shape, xs[1].shape, "add")
        return xs[0] + xs[1]
    if op == "sub":
        _broadcast_check(xs[0].shape, xs[1].shape, "sub")
        return xs[0] - xs[1]
    if op == "mul":
        _broadcast_check(xs[0].shape, xs[1].shape, "mul")
        return xs[0] * xs[1]
    if op == "scalar_mul":
        return node.params["c"] * xs[0]
    if op == "matmul":
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b
    if op == "sigmoid":
        return expit(xs[0])
    if op == "tanh":
        return np.tanh(xs[0])
    if op == "relu":
        return np.maximum(xs[0], 0.0)
    if op == "conv1d":
        x, w = xs
        x2 = np.atleast_2d(x)
        if w.ndim != 3 or w.shape[1] != x2.shape[0]:
            raise ShapeError(f"conv1d: kernel {w.shape} does not match input {x.shape}")
        stride, pad = node.params["stride"], node.params["pad"]
        if x2.shape[1] + 2 * pad < w.shape[2]:
            raise ShapeError(f"conv1d: input of length {x2.shape[1]} shorter than kernel")
        return _conv_forward(x2, w, stride, pad)
    if op == "upsample_repeat":
        if xs[0].ndim != 2:
            raise ShapeError(f"upsample_repeat expects [C, L], got {xs[0].shape}")
        return np.repeat(xs[0], node.params["factor"], axis=1)
    if op == "frame":
        if xs[0].ndim != 1:
            raise ShapeError(f"frame expects a 1-D signal, got {xs[0].shape}")
        return sig.frame_signal(xs[0], node.params["cfg"])
    if op == "dft_magnitude":
        re = xs[0] @ node.params["basis_c"]
        im = xs[0] @ node.params["basis_s"]
        return np.sqrt(re * re + im * im + sig.EPS_MAG)
    if op == "overlap_add":
        return sig.overlap_add_frames(xs[0], node.params["cfg"], node.params["out_len"])
    if op == "mse":
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"mse: shapes differ, {xs[0].shape} vs {xs[1].shape}")
        d = xs[0] - xs[1]
        return np.mean(d * d)
    if op == "l2_norm":
        return np.sqrt(np.sum(xs[0] * xs[0]) + L2_EPS)
    if op == "concat":
        return np.concatenate(xs, axis=node.params["axis"])
    if op == "slice":
        return xs[0][_slice_key(node.params["bounds"])]
    raise ValueError(f"unknown op {op!r}")


def forward_values(graph: Graph, bindings: dict[str, np.ndarray]) -> dict[int, np.ndarray]:
    """Evaluate every node; returns a map from node id to value."""
    values: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        if node.op == "leaf":
            if node.name not in bindings:
                raise BindingError(f"leaf {node.name!r} is unbound")
            values[node.id] = np.asarray(bindings[node.name], dtype=np.float64)
        elif node.op == "const":
            values[node.id] = node.params["value"]
        else:
            values[node.id] = _forward_op(node, [values[i.id] for i in node.inputs])
    return values


def forward(graph: Graph, bindings: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate the graph root."""
    return forward_values(graph, bindings)[graph.root.id]


def watched(graph: Graph, values: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: values[node.id] for name, node in graph.watch.items()}


# ---------------------------------------------------------------------------
# reverse pass

def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _vjp(node: Node, values, g: np.ndarray) -> list[np.ndarray | None]:
    op = node.op
    xs = [values[i.id] for i in node.inputs]
    out = values[node.id]
    if op == "add":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]
    if op == "sub":
        return [_unbroadcast(g, xs[0].shape), -_unbroadcast(g, xs[1].shape)]
    if op == "mul":
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]
    if op == "scalar_mul":
        return [node.params["c"] * g]
    if op == "matmul":
        return [g @ xs[1].T, xs[0].T @ g]
    if op == "sigmoid":
        return [g * out * (1.0 - out)]
    if op == "tanh":
        return [g * (1.0 - out * out)]
    if op == "relu":
        return [g * (xs[0] > 0.0)]
    if op == "conv1d":
        x, w = xs
        x2 = np.atleast_2d(x)
        stride, pad = node.params["stride"], node.params["pad"]
        k = w.shape[2]
        lout = _conv_out_len(x2.shape[1], k, stride, pad)
        xp = np.pad(x2, ((0, 0), (pad, pad)))
        phases = _conv_phases(xp, stride)
        dphases = [np.zeros_like(p) for p in phases]
        w_taps = np.ascontiguousarray(w.transpose(2, 0, 1))
        dw_taps = np.empty_like(w_taps)
        for off in range(k):
            ph, q = off % stride, off // stride
            dw_taps[off] = g @ phases[ph][:, q : q + lout].T
            dphases[ph][:, q : q + lout] += w_taps[off].T @ g
        dw = dw_taps.transpose(1, 2, 0).copy()
        if stride == 1:
            dxp = dphases[0]
        else:
            dxp = np.empty_like(xp)
            for ph in range(stride):
                dxp[:, ph::stride] = dphases[ph]
        dx = dxp[:, pad : pad + x2.shape[1]]
        if x.ndim == 1:
            dx = dx[0]
        return [dx, dw]
    if op == "upsample_repeat":
        f = node.params["factor"]
        c, l = xs[0].shape
        return [g.reshape(c, l, f).sum(axis=2)]
    if op == "frame":
        cfg = node.params["cfg"]
        n = len(xs[0])
        frames = sig.num_frames(n, cfg)
        acc = np.zeros(sig.padded_len(frames, cfg))
        for t in range(frames):
            acc[t * cfg.hop : t * cfg.hop + cfg.frame_len] += g[t]
        return [acc[cfg.hop : cfg.hop + n]]
    if op == "dft_magnitude":
        bc, bs = node.params["basis_c"], node.params["basis_s"]
        re = xs[0] @ bc
        im = xs[0] @ bs
        scale = g / out
        return [(scale * re) @ bc.T + (scale * im) @ bs.T]
    if op == "overlap_add":
        cfg, out_len = node.params["cfg"], node.params["out_len"]
        frames = len(xs[0])
        dacc = np.zeros(sig.padded_len(frames, cfg))
        dacc[cfg.hop : cfg.hop + out_len] = g
        dacc /= sig.ola_norm(frames, cfg)
        win = sig.hann_window(cfg.frame_len)
        dframes = np.empty_like(xs[0])
        for t in range(frames):
            dframes[t] = dacc[t * cfg.hop : t * cfg.hop + cfg.frame_len] * win
        return [dframes]
    if op == "mse":
        d = xs[0] - xs[1]
        k = g * (2.0 / d.size)
        return [k * d, -k * d]
    if op == "l2_norm":
        return [g * xs[0] / out]
    if op == "concat":
        axis = node.params["axis"]
        sizes = [x.shape[axis] for x in xs]
        offsets = np.cumsum(sizes)[:-1]
        return list(np.split(g, offsets, axis=axis))
    if op == "slice":
        dx = np.zeros_like(xs[0])
        dx[_slice_key(node.params["bounds"])] = g
        return [dx]
    raise ValueError(f"unknown op {op!r}")


def backward(
    graph: Graph, values: dict[int, np.ndarray], wrts: list[str]
) -> dict[str, np.ndarray]:
    """Adjoints of the scalar root with respect to the named leaves."""
    root_val = values[graph.root.id]
    if np.size(root_val) != 1:
        raise ContractError(f"gradient requires a scalar root, got shape {np.shape(root_val)}")
    for name in wrts:
        if name not in graph.leaves:
            raise BindingError(f"graph has no leaf named {name!r}")
    adjoint: dict[int, np.ndarray] = {graph.root.id: np.ones_like(root_val)}
    for node in reversed(graph.nodes):
        g = adjoint.get(node.id)
        if g is None or node.op in ("leaf", "const"):
            continue
        for inp, contrib in zip(node.inputs, _vjp(node, values, g)):
            if contrib is None:
                continue
            prev = adjoint.get(inp.id)
            adjoint[inp.id] = contrib if prev is None else prev + contrib
    out = {}
    for name in wrts:
        node = graph.leaves[name]
        out[name] = adjoint.get(node.id, np.zeros_like(values[node.id]))
    return out


def gradient(graph: Graph, bindings: dict[str, np.ndarray], wrt: str) -> np.ndarray:
    """Exact reverse-mode gradient of the scalar root w.r.t. one leaf."""
    return backward(graph, forward_values(graph, bindings), [wrt])[wrt]


def gradients(graph: Graph, bindings: dict[str, np.ndarray], wrts) -> dict[str, np.ndarray]:
    """Gradients w.r.t. several leaves from a single reverse pass."""
    return backward(graph, forward_values(graph, bindings), list(wrts))


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Adam moments for one parameter tensor; lazily shaped on first step."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ShapeError(f"grad shape {grads.shape} != param shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, state


# ---------------------------------------------------------------------------
# verification oracle

def finite_diff_check(
    graph: Graph,
    bindings: dict[str, np.ndarray],
    wrt: str,
    h: float = 1e-5,
    num_points: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error of the reverse-mode gradient vs central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).  When
    `num_points` is given, that many coordinates of the leaf are sampled
    (seeded) instead of sweeping all of them.
    """
    analytic = gradient(graph, bindings, wrt)
    base = np.array(bindings[wrt], dtype=np.float64)
    if num_points is None or num_points >= base.size:
        idxs = np.arange(base.size)
    else:
        idxs = np.random.default_rng(seed).choice(base.size, size=num_points, replace=False)
    worst = 0.0
    probe = dict(bindings)
    for i in idxs:
        shifted = base.copy()
        shifted.flat[i] += h
        probe[wrt] = shifted
        f_plus = float(forward(graph, probe))
        shifted.flat[i] -= 2.0 * h
        f_minus = float(forward(graph, probe))
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = float(np.asarray(analytic).flat[i])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst
