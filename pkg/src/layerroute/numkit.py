"""Dense float64 arrays with reverse-mode differentiation.

Values are C-contiguous float64 numpy arrays ("dense arrays"); scalars are
rank-0 arrays. Every operation builds a `Node` that records its inputs and a
closure producing the input adjoints, so a forward pass leaves behind the
tape needed by `backward`. The op set is deliberately small: matrix product,
elementwise add/mul, GELU, softmax, log, reductions, concat/reshape, the
layer-mixing contraction used by fusion, and a fused cross-entropy.

Any operation that would produce a non-finite value raises NumericError
instead of propagating NaN/Inf. Gradients accumulate on leaf nodes across
repeated backward calls until `zero_grad` resets them.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def ensure_dense(x, name: str = "array") -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"operation '{op}' produced a non-finite value")


class Node:
    """One value in the differentiation tape.

    `parents` and `backward_fn` form the op record; `backward_fn(out_grad)`
    returns one adjoint per parent (None for parents that need none). Leaves
    have no parents; their `grad` persists and accumulates across backward
    calls.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "backward_fn")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        self.value = ensure_dense(value, op)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def parameter(x) -> Node:
    return Node(x, requires_grad=True)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value: np.ndarray, op: str, parents: tuple[Node, ...], backward_fn) -> Node:
    _check_finite(value, op)
    rg = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=rg, op=op, parents=parents,
                backward_fn=backward_fn if rg else None)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Node:
    """Elementwise sum. Supports same-shape, scalar on either side, and
    row-vector bias added to each row of a rank-2 array."""
    a, b = as_node(a), as_node(b)
    va, vb = a.value, b.value
    if va.shape == vb.shape:
        def bw(g):
            return (g if a.requires_grad else None,
                    g if b.requires_grad else None)
    elif vb.shape == ():
        def bw(g):
            return (g if a.requires_grad else None,
                    np.sum(g) if b.requires_grad else None)
    elif va.shape == ():
        def bw(g):
            return (np.sum(g) if a.requires_grad else None,
                    g if b.requires_grad else None)
    elif va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
        def bw(g):
            return (g if a.requires_grad else None,
                    g.sum(axis=0) if b.requires_grad else None)
    else:
        raise DimensionError(f"add: incompatible shapes {va.shape} and {vb.shape}")
    return _make(va + vb, "add", (a, b), bw)


def sub(a, b) -> Node:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Node:
    """Elementwise product; either side may be a scalar."""
    a, b = as_node(a), as_node(b)
    va, vb = a.value, b.value
    if not (va.shape == vb.shape or va.shape == () or vb.shape == ()):
        raise DimensionError(f"mul: incompatible shapes {va.shape} and {vb.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g * vb
            if va.shape == () and ga.shape != ():
                ga = np.sum(ga)
        if b.requires_grad:
            gb = g * va
            if vb.shape == () and gb.shape != ():
                gb = np.sum(gb)
        return (ga, gb)

    return _make(va * vb, "mul", (a, b), bw)


def scale(a, c: float) -> Node:
    return mul(a, constant(np.float64(c)))


def matmul(a, b) -> Node:
    """Matrix product of two rank-2 arrays."""
    a, b = as_node(a), as_node(b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2:
        raise DimensionError(f"matmul: expected rank-2 operands, got {va.shape} and {vb.shape}")
    if va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmul: inner extents differ for shapes {va.shape} and {vb.shape}")

    def bw(g):
        return (g @ vb.T if a.requires_grad else None,
                va.T @ g if b.requires_grad else None)

    return _make(va @ vb, "matmul", (a, b), bw)


def gelu(a) -> Node:
    """Smooth GELU (tanh form), elementwise."""
    a = as_node(a)
    x = a.value
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        if not a.requires_grad:
            return (None,)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)
        return (g * d,)

    return _make(out, "gelu", (a,), bw)


def log(a) -> Node:
    """Natural log, elementwise; the domain is strictly positive."""
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise NumericError("log: argument must be strictly positive")
    va = a.value

    def bw(g):
        return (g / va if a.requires_grad else None,)

    return _make(np.log(va), "log", (a,), bw)


def softmax(z) -> Node:
    """Softmax over the last axis (rank 1 or 2), max-subtracted for stability."""
    z = as_node(z)
    v = z.value
    if v.ndim not in (1, 2) or v.size == 0 or v.shape[-1] == 0:
        raise DimensionError(f"softmax: expected non-empty rank-1 or rank-2 input, got shape {v.shape}")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if not z.requires_grad:
            return (None,)
        dot = np.sum(g * w, axis=-1, keepdims=True)
        return ((g - dot) * w,)

    return _make(w, "softmax", (z,), bw)


# ---------------------------------------------------------------------------
# reductions and structure


def sum_all(a) -> Node:
    a = as_node(a)
    sh = a.value.shape

    def bw(g):
        return (np.full(sh, float(g)) if a.requires_grad else None,)

    return _make(np.sum(a.value), "sum_all", (a,), bw)


def mean_axis(a, axis: int) -> Node:
    """Mean along one axis (used for batch means and patch pooling)."""
    a = as_node(a)
    v = a.value
    if not (0 <= axis < v.ndim):
        raise DimensionError(f"mean_axis: axis {axis} out of range for shape {v.shape}")
    n = v.shape[axis]
    if n == 0:
        raise ContractError("mean_axis: cannot average over an empty axis")

    def bw(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, v.shape),)

    return _make(v.mean(axis=axis), "mean_axis", (a,), bw)


def concat(a, b) -> Node:
    """Concatenate along the last axis (rank 1 or 2 with matching leading extent)."""
    a, b = as_node(a), as_node(b)
    va, vb = a.value, b.value
    if va.ndim != vb.ndim or va.ndim not in (1, 2):
        raise DimensionError(f"concat: expected matching rank-1 or rank-2 inputs, got {va.shape} and {vb.shape}")
    if va.ndim == 2 and va.shape[0] != vb.shape[0]:
        raise DimensionError(f"concat: leading extents differ for shapes {va.shape} and {vb.shape}")
    k = va.shape[-1]

    def bw(g):
        return (g[..., :k] if a.requires_grad else None,
                g[..., k:] if b.requires_grad else None)

    return _make(np.concatenate([va, vb], axis=-1), "concat", (a, b), bw)


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise DimensionError(f"reshape: cannot reshape {a.value.shape} to {shape}")
    orig = a.value.shape

    def bw(g):
        return (g.reshape(orig) if a.requires_grad else None,)

    return _make(a.value.reshape(shape), "reshape", (a,), bw)


def layer_mix(w, stack) -> Node:
    """Contract per-layer weights with a layer stack of patch features.

    Shape cases:
      w[L],   stack[L,P,D]   -> [P,D]
      w[B,L], stack[B,L,P,D] -> [B,P,D]   (per-sample stacks)
      w[B,L], stack[L,P,D]   -> [B,P,D]   (one stack shared by the batch)
    """
    w, stack = as_node(w), as_node(stack)
    vw, vs = w.value, stack.value
    if vw.ndim == 1 and vs.ndim == 3 and vw.shape[0] == vs.shape[0]:
        spec = ("l,lpd->pd", "pd,lpd->l", "l,pd->lpd")
    elif vw.ndim == 2 and vs.ndim == 4 and vw.shape == vs.shape[:2]:
        spec = ("bl,blpd->bpd", "bpd,blpd->bl", "bl,bpd->blpd")
    elif vw.ndim == 2 and vs.ndim == 3 and vw.shape[1] == vs.shape[0]:
        spec = ("bl,lpd->bpd", "bpd,lpd->bl", "bl,bpd->lpd")
    else:
        raise DimensionError(f"layer_mix: incompatible shapes {vw.shape} and {vs.shape}")
    fwd, bw_w, bw_s = spec

    def bw(g):
        gw = np.einsum(bw_w, g, vs) if w.requires_grad else None
        gs = np.einsum(bw_s, vw, g) if stack.requires_grad else None
        return (gw, gs)

    return _make(np.einsum(fwd, vw, vs), "layer_mix", (w, stack), bw)


def cross_entropy_with_logits(logits, targets) -> Node:
    """Mean softmax cross-entropy of rank-2 logits against integer targets."""
    logits = as_node(logits)
    v = logits.value
    if v.ndim != 2 or v.shape[1] == 0:
        raise DimensionError(f"cross_entropy: expected rank-2 logits, got shape {v.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != v.shape[0]:
        raise DimensionError(f"cross_entropy: {v.shape[0]} rows but {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= v.shape[1]):
        raise ContractError(f"cross_entropy: target out of range [0, {v.shape[1]})")
    n = v.shape[0]
    m = v.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(v - m).sum(axis=1))
    loss = float(np.mean(lse - v[np.arange(n), t]))

    def bw(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(v - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.float64(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Node) -> list[Node]:
    """Post-order over the requires-grad subgraph; each node appears once."""
    topo: list[Node] = []
    state: dict[int, int] = {}
    stack = [root]
    while stack:
        node = stack[-1]
        st = state.get(id(node), 0)
        if st == 0:
            state[id(node)] = 1
            for p in node.parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if st == 1:
                state[id(node)] = 2
                topo.append(node)
    return topo


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every requires-grad leaf under root.

    The root must be scalar-valued. Adjoints of interior nodes live only for
    the duration of the call; leaf gradients persist on the nodes (and in the
    returned map) and add up across calls until reset.
    """
    if root.value.shape != ():
        raise ContractError(f"backward: root must be scalar-valued, got shape {root.value.shape}")
    if not root.requires_grad:
        return {}
    topo = _toposort(root)
    adjoint: dict[int, np.ndarray] = {id(root): np.float64(1.0)}
    grad_map: dict[Node, np.ndarray] = {}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            grad_map[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg
    for node, g in grad_map.items():
        if g.shape != node.value.shape:
            raise NumericError(f"backward: gradient shape {g.shape} does not match value shape {node.value.shape}")
        _check_finite(g, "backward")
    return grad_map


def zero_grad(nodes: Sequence[Node]) -> None:
    for n in nodes:
        n.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def fd_check(f: Callable[[list[Node]], Node], params: Sequence[np.ndarray],
             h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    `f` maps a list of Nodes (one per entry of `params`) to a scalar Node and
    must be deterministic. The step for each coordinate is h scaled by
    max(1, |coordinate|). Returns the max over all coordinates of
    |analytic - central| / max(1, |central|).
    """
    bases = [ensure_dense(p, "fd_check param") for p in params]
    leaves = [parameter(b.copy()) for b in bases]
    out = f(leaves)
    if out.value.shape != ():
        raise ContractError("fd_check: f must return a scalar node")
    backward(out)
    analytic = [np.zeros_like(b) if leaf.grad is None else np.array(leaf.grad)
                for leaf, b in zip(leaves, bases)]

    def eval_at(arrays: list[np.ndarray]) -> float:
        return float(f([constant(a) for a in arrays]).value)

    worst = 0.0
    for i, base in enumerate(bases):
        flat = base.reshape(-1)
        a_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            step = h * max(1.0, abs(flat[j]))
            probe = [b if k != i else b.copy() for k, b in enumerate(bases)]
            pf = probe[i].reshape(-1)
            pf[j] = flat[j] + step
            f_plus = eval_at(probe)
            pf[j] = flat[j] - step
            f_minus = eval_at(probe)
            central = (f_plus - f_minus) / (2.0 * step)
            rel = abs(a_flat[j] - central) / max(1.0, abs(central))
            if rel > worst:
                worst = rel
    return worst
