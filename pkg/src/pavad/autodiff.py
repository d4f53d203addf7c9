"""Dense reverse-mode automatic differentiation on a single tape.

Values are float64 numpy arrays throughout; float32 appears only at file
boundaries. A ``Graph`` records every operation in execution order, so the
backward pass is a single reverse sweep over the tape. Tensors are immutable
after creation except for their ``grad`` buffer, which belongs to the graph
that created them; one graph must stay on one thread.

Non-differentiable points (relu/hinge at 0, top-k ties) take subgradient 0
at the kink. ``grad_reverse`` is the one intentional gradient-surgery node:
identity forward, upstream gradient times ``-lam`` backward.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

_NORMALIZE_EPS = 1e-12
_BCE_EPS = 1e-7


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "graph")

    def __init__(self, data: np.ndarray, requires_grad: bool, graph: "Graph | None"):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.graph = graph

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # Operator sugar; scalars lift to constants on the same graph.
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, scalar_mul(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), scalar_mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only tape. Backward visits nodes in reverse insertion order once."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def tensor(self, data, requires_grad: bool = False) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        return Tensor(arr, requires_grad, self)

    def leaf(self, data: np.ndarray) -> Tensor:
        """Wrap a parameter array (shared, not copied) as a differentiable leaf."""
        arr = np.asarray(data, dtype=np.float64)
        return Tensor(arr, True, self)

    def constant(self, data) -> Tensor:
        return self.tensor(data, requires_grad=False)

    def _record(self, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
        requires = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires, self)
        if requires:
            self.nodes.append(_Node(inputs, out, backward_fn))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into the grad buffer of every leaf.

        Interior grads are transient per sweep; repeated calls without
        zeroing therefore accumulate leaf grads (two backwards = twice the
        gradient), matching the documented contract.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.data.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        produced = {id(n.output) for n in self.nodes}
        transient: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in produced and loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = transient.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = transient.get(id(t))
                    transient[id(t)] = gi if prev is None else prev + gi
                else:
                    t._accumulate(gi)

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.output.grad = None
            for t in node.inputs:
                t.grad = None


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.array(x, dtype=np.float64), False, like.graph)


def _graph_of(*tensors: Tensor) -> Graph:
    g = None
    for t in tensors:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif t.graph is not g:
                raise ValueError("tensors belong to different graphs")
    if g is None:
        raise ValueError("no graph attached to any input")
    return g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    out = a.data + b.data

    def backward(gout):
        return _unbroadcast(gout, a.data.shape), _unbroadcast(gout, b.data.shape)

    return g._record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    out = a.data * b.data

    def backward(gout):
        return (_unbroadcast(gout * b.data, a.data.shape),
                _unbroadcast(gout * a.data, b.data.shape))

    return g._record((a, b), out, backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    g = _graph_of(a)
    c = float(c)

    def backward(gout):
        return (gout * c,)

    return g._record((a,), a.data * c, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    g = _graph_of(a, b)
    out = a.data @ b.data

    def backward(gout):
        return gout @ b.data.T, a.data.T @ gout

    return g._record((a, b), out, backward)


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise ValueError(f"concat shape mismatch: {a.data.shape} vs {b.data.shape}")
    g = _graph_of(a, b)
    na = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def backward(gout):
        return gout[..., :na], gout[..., na:]

    return g._record((a, b), out, backward)


def stack_rows(parts: list[Tensor]) -> Tensor:
    """Stack 2-d tensors along rows (the time-unfold used for bank assignments)."""
    if not parts:
        raise ValueError("stack_rows needs at least one tensor")
    g = _graph_of(*parts)
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def backward(gout):
        grads = []
        start = 0
        for n in sizes:
            grads.append(gout[start:start + n])
            start += n
        return tuple(grads)

    return g._record(tuple(parts), out, backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    g = _graph_of(a)

    def backward(gout):
        return (gout.T,)

    return g._record((a,), a.data.T.copy(), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    g = _graph_of(a)
    out = a.data.reshape(shape)

    def backward(gout):
        return (gout.reshape(a.data.shape),)

    return g._record((a,), out, backward)


def row_l2_normalize(a: Tensor) -> Tensor:
    """Normalize each row to unit l2 norm; rows with norm <= eps scale by 1/eps."""
    if a.data.ndim != 2:
        raise ValueError("row_l2_normalize expects a matrix")
    g = _graph_of(a)
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    denom = np.maximum(norms, _NORMALIZE_EPS)
    out = a.data / denom

    def backward(gout):
        live = norms > _NORMALIZE_EPS
        dot = np.sum(out * gout, axis=1, keepdims=True)
        grad_live = (gout - out * dot) / denom
        grad_dead = gout / _NORMALIZE_EPS
        return (np.where(live, grad_live, grad_dead),)

    return g._record((a,), out, backward)


def softmax_last_dim(a: Tensor) -> Tensor:
    if a.data.shape[-1] == 0:
        raise ValueError("softmax over empty axis")
    g = _graph_of(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(gout):
        dot = np.sum(gout * out, axis=-1, keepdims=True)
        return (out * (gout - dot),)

    return g._record((a,), out, backward)


def sigmoid(a: Tensor) -> Tensor:
    g = _graph_of(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(gout):
        return (gout * out * (1.0 - out),)

    return g._record((a,), out, backward)


def relu(a: Tensor) -> Tensor:
    g = _graph_of(a)
    mask = a.data > 0

    def backward(gout):
        return (gout * mask,)

    return g._record((a,), a.data * mask, backward)


# max(0, x): identical rule to relu, named for its use in the ranking loss.
hinge = relu


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Temporal conv, kernel 3, zero-padded 'same'. x: TxD, w: dxDx3, b: d -> Txd."""
    if x.data.ndim != 2 or w.data.ndim != 3 or w.data.shape[2] != 3:
        raise ValueError("conv1d_same expects x: TxD, w: dxDx3")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv1d_same feature mismatch: x {x.data.shape} vs w {w.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"conv1d_same bias shape {b.data.shape} != ({w.data.shape[0]},)")
    g = _graph_of(x, w, b)
    T = x.data.shape[0]
    xp = np.pad(x.data, ((1, 1), (0, 0)))
    out = b.data[None, :].repeat(T, axis=0)
    for k in range(3):
        out = out + xp[k:k + T] @ w.data[:, :, k].T

    def backward(gout):
        db = gout.sum(axis=0)
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for k in range(3):
            dw[:, :, k] = gout.T @ xp[k:k + T]
            dxp[k:k + T] += gout @ w.data[:, :, k]
        return dxp[1:T + 1], dw, db

    return g._record((x, w, b), out, backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head softmax(QK^T/sqrt(dh))V over already-projected Txd inputs."""
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape or q.data.ndim != 2:
        raise ValueError("attention expects equal Txd q/k/v")
    d = q.data.shape[1]
    if heads < 1 or d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by heads {heads}")
    g = _graph_of(q, k, v)
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    out = np.empty_like(q.data)
    attns = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = (q.data[:, sl] @ k.data[:, sl].T) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        attn = e / e.sum(axis=-1, keepdims=True)
        attns.append(attn)
        out[:, sl] = attn @ v.data[:, sl]

    def backward(gout):
        dq = np.empty_like(q.data)
        dk = np.empty_like(k.data)
        dv = np.empty_like(v.data)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            attn = attns[h]
            go = gout[:, sl]
            dattn = go @ v.data[:, sl].T
            dv[:, sl] = attn.T @ go
            dot = np.sum(dattn * attn, axis=-1, keepdims=True)
            dlogits = attn * (dattn - dot)
            dq[:, sl] = (dlogits @ k.data[:, sl]) * scale
            dk[:, sl] = (dlogits.T @ q.data[:, sl]) * scale
        return dq, dk, dv

    return g._record((q, k, v), out, backward)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    g = _graph_of(a)
    n = a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(gout):
        return (np.expand_dims(gout, axis).repeat(n, axis=axis) / n,)

    return g._record((a,), out, backward)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    g = _graph_of(a)
    out = np.array(a.data.sum())

    def backward(gout):
        return (np.ones_like(a.data) * gout,)

    return g._record((a,), out, backward)


def squared_l2_norm(a: Tensor) -> Tensor:
    g = _graph_of(a)
    out = np.array(np.sum(a.data * a.data))

    def backward(gout):
        return (2.0 * a.data * gout,)

    return g._record((a,), out, backward)


def bce(pred: Tensor, target: float) -> Tensor:
    """Binary cross-entropy of a scalar probability against a fixed label.

    The prediction is clamped to [1e-7, 1 - 1e-7]; the clamp has subgradient
    zero where active, so saturated sigmoids cannot produce infinities.
    """
    if pred.data.shape != ():
        raise ValueError("bce expects a scalar prediction")
    g = _graph_of(pred)
    t = float(target)
    p = float(pred.data)
    pc = min(max(p, _BCE_EPS), 1.0 - _BCE_EPS)
    out = np.array(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)))
    inside = _BCE_EPS < p < 1.0 - _BCE_EPS

    def backward(gout):
        if not inside:
            return (np.zeros(()),)
        return (gout * ((1.0 - t) / (1.0 - pc) - t / pc),)

    return g._record((pred,), out, backward)


def topk_mean(values: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries of a vector; ties go to the lowest index.

    Backward routes gradient 1/k to exactly the selected indices.
    """
    if values.data.ndim != 1:
        raise ValueError("topk_mean expects a vector")
    n = values.data.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for length {n}")
    g = _graph_of(values)
    sel = np.argsort(-values.data, kind="stable")[:k]
    out = np.array(values.data[sel].mean())

    def backward(gout):
        grad = np.zeros_like(values.data)
        grad[sel] = gout / k
        return (grad,)

    return g._record((values,), out, backward)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    g = _graph_of(x)
    lam = float(lam)

    def backward(gout):
        return (gout * (-lam),)

    return g._record((x,), x.data.copy(), backward)
