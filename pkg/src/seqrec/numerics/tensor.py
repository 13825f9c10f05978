"""Dense tensors and a recording tape for reverse-mode differentiation.

Every primitive is a method on :class:`Tape`. When the tape records and at
least one input requires a gradient, the primitive appends a node holding a
backward closure; :meth:`Tape.backward` walks those nodes in reverse.

Inference code uses ``Tape(record=False)`` so nothing is retained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-d array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    ``train`` switches dropout on; ``seed`` fixes the dropout stream. A tape
    can be differentiated once; create a new one per step.
    """

    def __init__(self, record: bool = True, train: bool = False, seed: int | None = None):
        self.record = record
        self.train = train
        self.rng = np.random.default_rng(seed)
        self.nodes: list[_Node] = []
        self._consumed = False

    # -- plumbing -------------------------------------------------------
    def _as_tensor(self, x, like: Tensor | None = None) -> Tensor:
        if isinstance(x, Tensor):
            return x
        dtype = like.dtype if like is not None else None
        return Tensor(np.asarray(x, dtype=dtype))

    def _emit(self, kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=needs)
        if needs:
            self.nodes.append(_Node(kind, inputs, result, backward))
        return result

    def forward(self, kind: str, *inputs, **attrs) -> Tensor:
        """Dispatch a primitive by name, e.g. ``tape.forward("softmax", x, axis=-1)``."""
        fn = getattr(self, kind, None)
        if fn is None or kind.startswith("_") or kind in ("forward", "backward"):
            raise ValueError(f"unknown primitive {kind!r}")
        return fn(*inputs, **attrs)

    # -- linear algebra ---------------------------------------------------
    def matmul(self, a, b) -> Tensor:
        a = self._as_tensor(a)
        b = self._as_tensor(b, like=a)
        A, B = a.data, b.data
        if A.ndim == 0 or B.ndim == 0:
            raise ShapeError(f"matmul: operands must be at least 1-d, got {A.shape} and {B.shape}")
        inner_a = A.shape[-1]
        inner_b = B.shape[0] if B.ndim == 1 else B.shape[-2]
        if inner_a != inner_b:
            raise ShapeError(
                f"matmul: inner dimensions differ ({inner_a} vs {inner_b}) for shapes {A.shape} @ {B.shape}"
            )
        try:
            out = A @ B
        except ValueError as exc:
            raise ShapeError(f"matmul: batch dimensions do not broadcast for {A.shape} @ {B.shape}") from exc

        def backward(g):
            A2 = A[None, :] if A.ndim == 1 else A
            B2 = B[:, None] if B.ndim == 1 else B
            g2 = g
            if A.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if B.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            ga = g2 @ np.swapaxes(B2, -1, -2)
            gb = np.swapaxes(A2, -1, -2) @ g2
            if A.ndim == 1:
                ga = ga[..., 0, :]
            if B.ndim == 1:
                gb = gb[..., 0]
            return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

        return self._emit("matmul", (a, b), out, backward)

    # -- elementwise --------------------------------------------------------
    def _broadcast(self, kind, a, b):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def add(self, a, b) -> Tensor:
        a = self._as_tensor(a)
        b = self._as_tensor(b, like=a)
        self._broadcast("add", a, b)
        sa, sb = a.shape, b.shape
        return self._emit("add", (a, b), a.data + b.data,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Tensor:
        a = self._as_tensor(a)
        b = self._as_tensor(b, like=a)
        self._broadcast("sub", a, b)
        sa, sb = a.shape, b.shape
        return self._emit("sub", (a, b), a.data - b.data,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def multiply(self, a, b) -> Tensor:
        a = self._as_tensor(a)
        b = self._as_tensor(b, like=a)
        self._broadcast("multiply", a, b)
        A, B = a.data, b.data
        return self._emit("multiply", (a, b), A * B,
                          lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))

    def neg(self, x) -> Tensor:
        x = self._as_tensor(x)
        return self._emit("neg", (x,), -x.data, lambda g: (-g,))

    def square(self, x) -> Tensor:
        x = self._as_tensor(x)
        X = x.data
        return self._emit("square", (x,), X * X, lambda g: (2.0 * X * g,))

    def relu(self, x) -> Tensor:
        x = self._as_tensor(x)
        pos = x.data > 0
        return self._emit("relu", (x,), np.where(pos, x.data, 0.0).astype(x.dtype), lambda g: (g * pos,))

    def gelu(self, x) -> Tensor:
        """Tanh approximation of GELU."""
        x = self._as_tensor(x)
        X = x.data
        inner = _GELU_C * (X + 0.044715 * X ** 3)
        t = np.tanh(inner)
        out = 0.5 * X * (1.0 + t)

        def backward(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * X * X)
            return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * dinner),)

        return self._emit("gelu", (x,), out, backward)

    def relu_or_gelu(self, x, activation: str = "relu") -> Tensor:
        if activation == "relu":
            return self.relu(x)
        if activation == "gelu":
            return self.gelu(x)
        raise ValueError(f"unknown activation {activation!r}")

    def sigmoid(self, x) -> Tensor:
        x = self._as_tensor(x)
        s = _sigmoid(x.data)
        return self._emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))

    def log_sigmoid(self, x) -> Tensor:
        x = self._as_tensor(x)
        X = x.data
        out = -np.logaddexp(0.0, -X).astype(X.dtype)
        return self._emit("log_sigmoid", (x,), out, lambda g: (g * _sigmoid(-X),))

    def dropout(self, x, p: float, train: bool | None = None) -> Tensor:
        x = self._as_tensor(x)
        active = self.train if train is None else train
        if not active or p <= 0.0:
            return x
        if p >= 1.0:
            raise ValueError("dropout probability must be < 1")
        keep = (self.rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        return self._emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))

    # -- shape ----------------------------------------------------------
    def reshape(self, x, shape) -> Tensor:
        x = self._as_tensor(x)
        src = x.shape
        try:
            out = x.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
        return self._emit("reshape", (x,), out, lambda g: (g.reshape(src),))

    def transpose(self, x, axes) -> Tensor:
        x = self._as_tensor(x)
        inv = np.argsort(axes)
        return self._emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))

    def concat(self, tensors: Sequence, axis: int = -1) -> Tensor:
        ts = [self._as_tensor(t) for t in tensors]
        if not ts:
            raise ShapeError("concat: no inputs")
        ax = axis % ts[0].ndim
        ref = ts[0].shape
        for t in ts[1:]:
            if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
                raise ShapeError(f"concat(axis={axis}): shape {t.shape} does not match {ref} off the concat axis")
        sizes = [t.shape[ax] for t in ts]
        cuts = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, cuts, axis=ax))

        return self._emit("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=ax), backward)

    # -- reductions -----------------------------------------------------
    def sum(self, x, axis=None, keepdims: bool = False) -> Tensor:
        x = self._as_tensor(x)
        src = x.shape
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return self._emit("sum", (x,), np.asarray(out), backward)

    def mean(self, x, axis=None, keepdims: bool = False) -> Tensor:
        x = self._as_tensor(x)
        src = x.shape
        count = x.data.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))
        out = x.data.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, src).copy(),)

        return self._emit("mean", (x,), np.asarray(out), backward)

    # -- normalisation ----------------------------------------------------
    def softmax(self, x, axis: int = -1) -> Tensor:
        x = self._as_tensor(x)
        y = _softmax(x.data, axis)
        return self._emit("softmax", (x,), y,
                          lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, x, axis: int = -1) -> Tensor:
        x = self._as_tensor(x)
        out = _log_softmax(x.data, axis)
        y = np.exp(out)
        return self._emit("log_softmax", (x,), out,
                          lambda g: (g - y * g.sum(axis=axis, keepdims=True),))

    def layer_norm(self, x, gamma, beta, eps: float = 1e-5) -> Tensor:
        x = self._as_tensor(x)
        gamma = self._as_tensor(gamma, like=x)
        beta = self._as_tensor(beta, like=x)
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} must be ({d},)")
        X = x.data
        mu = X.mean(axis=-1, keepdims=True)
        xc = X - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * rstd
        G = gamma.data

        def backward(g):
            gx_hat = g * G
            gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                         - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
            lead = tuple(range(g.ndim - 1))
            return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

        return self._emit("layer_norm", (x, gamma, beta), xhat * G + beta.data, backward)

    # -- indexing -------------------------------------------------------
    def embedding_lookup(self, table, indices) -> Tensor:
        """Rows of ``table`` selected by an integer array of any shape."""
        table = self._as_tensor(table)
        idx = np.asarray(indices)
        if idx.dtype.kind not in "iu":
            raise ShapeError(f"embedding_lookup: indices must be integers, got {idx.dtype}")
        n = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError(f"embedding_lookup: index out of range for table with {n} rows")
        tshape = table.shape

        def backward(g):
            gt = np.zeros(tshape, dtype=g.dtype)
            np.add.at(gt, idx.reshape(-1), g.reshape((-1,) + tshape[1:]))
            return (gt,)

        return self._emit("embedding_lookup", (table,), table.data[idx], backward)

    # -- attention --------------------------------------------------------
    def scaled_dot_product_attention(self, q, k, v, mask=None) -> Tensor:
        """softmax(q kᵀ / sqrt(d) + mask) v.

        ``mask`` is a constant array broadcastable to ``(..., Lq, Lk)``: either
        boolean (True = visible) or additive (0 / -inf). Every query row needs
        at least one visible key.
        """
        q = self._as_tensor(q)
        k = self._as_tensor(k, like=q)
        v = self._as_tensor(v, like=q)
        Q, K, V = q.data, k.data, v.data
        if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
            raise ShapeError(
                f"scaled_dot_product_attention: q {Q.shape}, k {K.shape}, v {V.shape} are incompatible"
            )
        scale = 1.0 / math.sqrt(Q.shape[-1])
        scores = (Q @ np.swapaxes(K, -1, -2)) * scale
        if mask is not None:
            m = np.asarray(mask)
            if m.dtype == bool:
                scores = np.where(m, scores, -np.inf)
            else:
                scores = scores + m.astype(scores.dtype)
        row_max = scores.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(row_max)):
            raise ShapeError("scaled_dot_product_attention: a query row has every key masked")
        P = np.exp(scores - row_max)
        P /= P.sum(axis=-1, keepdims=True)
        out = P @ V

        def backward(g):
            gv = np.swapaxes(P, -1, -2) @ g
            gp = g @ np.swapaxes(V, -1, -2)
            gs = P * (gp - (gp * P).sum(axis=-1, keepdims=True)) * scale
            gq = gs @ K
            gk = np.swapaxes(gs, -1, -2) @ Q
            return _unbroadcast(gq, Q.shape), _unbroadcast(gk, K.shape), _unbroadcast(gv, V.shape)

        return self._emit("scaled_dot_product_attention", (q, k, v), out, backward)

    # -- losses -----------------------------------------------------------
    def softmax_cross_entropy(self, logits, targets, weights=None) -> Tensor:
        """Weighted mean of -log softmax(logits)[target] over rows.

        Rows with weight 0 contribute exactly nothing, whatever their target.
        """
        logits = self._as_tensor(logits)
        Z = logits.data
        if Z.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy: logits must be (N, C), got {Z.shape}")
        n, c = Z.shape
        t = np.asarray(targets).reshape(-1)
        if t.shape[0] != n:
            raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {n} rows")
        w = np.ones(n, dtype=Z.dtype) if weights is None else np.asarray(weights, dtype=Z.dtype).reshape(-1)
        if w.shape[0] != n:
            raise ShapeError(f"softmax_cross_entropy: {w.shape[0]} weights for {n} rows")
        total = w.sum()
        if total <= 0:
            raise ValueError("softmax_cross_entropy: total weight is zero")
        active = w != 0
        t = np.where(active, t, 0).astype(np.int64)
        if np.any(t[active] < 0) or np.any(t[active] >= c):
            raise ShapeError(f"softmax_cross_entropy: target out of range for {c} classes")
        logp = _log_softmax(Z, -1)
        rows = np.arange(n)
        nll = -logp[rows, t]
        loss = np.asarray((w[active] * nll[active]).sum() / total, dtype=Z.dtype)

        def backward(g):
            grad = np.exp(logp)
            grad[rows, t] -= 1.0
            grad *= (w / total)[:, None]
            return (grad * g,)

        return self._emit("softmax_cross_entropy", (logits,), loss, backward)

    # -- differentiation --------------------------------------------------
    def backward(self, loss: Tensor) -> list[Tensor]:
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Gradients accumulate into existing ``.grad`` arrays, so callers zero
        them between steps. Returns the leaves that received a gradient.
        """
        if self._consumed:
            raise TapeError("tape already differentiated; record a new tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        if not loss.requires_grad:
            return []
        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.nodes.clear()
        return list(leaves.values())


def backward(tape: Tape, loss: Tensor) -> list[Tensor]:
    return tape.backward(loss)


def forward(tape: Tape, kind: str, *inputs, **attrs) -> Tensor:
    return tape.forward(kind, *inputs, **attrs)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array softmax for inference paths."""
    return _softmax(np.asarray(x), axis)

