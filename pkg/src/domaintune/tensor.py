"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Design notes
------------
* Values are 1-D or 2-D numpy arrays in C order.  There is no batch axis;
  callers loop over examples and average gradients via ``grad_scale``.
* A ``Tape`` records one node per primitive op, in execution order.  Calling
  ``Tape.backward`` seeds the scalar loss and walks the node list once, in
  reverse, accumulating ``+=`` into the ``grad`` buffer of every tensor that
  has ``requires_grad`` set.  Tensors that never participate keep their
  zero-initialised grad.
* Recording only happens while a tape is active *and* at least one input
  requires grad, so evaluation code that runs outside a tape pays no
  bookkeeping cost.
* Ops validate shapes eagerly and raise ``ShapeError`` naming both operands;
  misuse of an op outside its contract raises ``ContractError``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """An op was invoked outside its documented contract."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A value plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {list(arr.shape)}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> list[int]:
        return list(self.data.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of ops; a context manager so forward passes nest cleanly."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, grad_scale: float = 1.0) -> None:
        """Accumulate d(loss)/d(leaf) into every recorded leaf's grad buffer.

        ``grad_scale`` seeds the loss gradient; passing ``1/n`` lets callers
        average per-example losses without building an explicit mean node.
        Each node is visited exactly once, in reverse execution order.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += grad_scale
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is not None and g.any():
                node.backward_fn(g)
                # consume the intermediate grad so a later backward call on
                # this tape (one per example loss) does not double count
                g[...] = 0.0


def _record(output: Tensor, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output.grad = np.zeros_like(output.data)
        _ACTIVE_TAPES[-1].nodes.append(_Node(output, backward_fn))
    return output

def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a."""
    bias = False
    if a.data.shape == b.data.shape:
        pass
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        bias = True
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g.sum(axis=0) if bias else g)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * c)

    return _record(out, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    na = a.data.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def backward(g: np.ndarray) -> None:
        _accum(a, g[:na])
        _accum(b, g[na:])

    return _record(out, (a, b), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for shape {a.shape}")
    out = Tensor(a.data[start:stop].copy())

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[start:stop] += g

    return _record(out, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.data.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[:, start:stop] += g

    return _record(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def backward(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0
    out = Tensor(np.where(keep, a.data, 0.0))

    def backward(g: np.ndarray) -> None:
        _accum(a, g * keep)

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn once at forward time."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * mask)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * mask)

    return _record(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward(g: np.ndarray) -> None:
        _accum(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _record(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or gain.data.ndim != 1 or bias.data.ndim != 1:
        raise ShapeError(
            f"layer_norm: x {x.shape} must be 2-D, gain {gain.shape} and bias {bias.shape} 1-D")
    n = x.data.shape[1]
    if gain.data.shape[0] != n or bias.data.shape[0] != n:
        raise ShapeError(
            f"layer_norm: width {n} does not match gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g: np.ndarray) -> None:
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        _accum(x, dx)

    return _record(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup needs a 2-D table, got shape {table.shape}")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup ids must be a flat sequence")
    vocab = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise IndexError(f"token id {bad} out of range for table with {vocab} rows")
    out = Tensor(table.data[idx])

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            np.add.at(table.grad, idx, g)

    return _record(out, (table,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward(g: np.ndarray) -> None:
        _accum(a, g)  # 0-d grad broadcasts over the input

    return _record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ContractError("mean_all of an empty tensor")
    size = a.data.size
    out = Tensor(a.data.mean())

    def backward(g: np.ndarray) -> None:
        _accum(a, g / size)

    return _record(out, (a,), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} vs {target.shape}")
    if pred.data.size == 0:
        raise ContractError("mse_loss of empty tensors")
    diff = pred.data - target.data
    out = Tensor((diff * diff).mean())
    c = 2.0 / pred.data.size

    def backward(g: np.ndarray) -> None:
        _accum(pred, g * c * diff)
        _accum(target, -g * c * diff)

    return _record(out, (pred, target), backward)


def cross_entropy_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean token NLL of ``targets`` under row-wise softmax of ``logits``.

    The log-softmax is fused for stability; the backward pass is the familiar
    (softmax - onehot) / num_rows.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits needs 2-D logits, got {logits.shape}")
    idx = np.asarray(list(targets), dtype=np.int64)
    rows, vocab = logits.data.shape
    if idx.size == 0:
        raise ContractError("cross_entropy_logits: empty target sequence")
    if idx.shape[0] != rows:
        raise ShapeError(
            f"cross_entropy_logits: {rows} logit rows vs {idx.shape[0]} targets")
    if idx.min() < 0 or idx.max() >= vocab:
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise IndexError(f"target id {bad} out of range for vocab {vocab}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    out = Tensor(-logp[np.arange(rows), idx].mean())

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            d = e / denom
            d[np.arange(rows), idx] -= 1.0
            logits.grad += (g / rows) * d

    return _record(out, (logits,), backward)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` splits of the width.

    ``mask`` is an additive float array of shape [queries x keys] (0 keeps,
    -inf hides) shared across heads.  The whole head loop runs as one fused
    node with a hand-derived backward pass, which keeps tapes short.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    m, d = q.data.shape
    n, dk = k.data.shape
    nv, dv = v.data.shape
    if dk != d or dv != d or nv != n:
        raise ShapeError(
            f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if num_heads < 1 or d % num_heads != 0:
        raise ContractError(f"width {d} is not divisible into {num_heads} heads")
    if mask is not None and mask.shape != (m, n):
        raise ShapeError(
            f"attention mask shape {list(mask.shape)} does not match [{m} x {n}]")
    dh = d // num_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(m, num_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(n, num_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(n, num_heads, dh).transpose(1, 0, 2)
    s = (qh @ kh.transpose(0, 2, 1)) * inv_sqrt
    if mask is not None:
        s = s + mask
    z = s - s.max(axis=2, keepdims=True)
    e = np.exp(z)
    aw = e / e.sum(axis=2, keepdims=True)
    o = aw @ vh
    out = Tensor(np.ascontiguousarray(o.transpose(1, 0, 2)).reshape(m, d))

    def backward(g: np.ndarray) -> None:
        gh = g.reshape(m, num_heads, dh).transpose(1, 0, 2)
        _accum(v, np.ascontiguousarray(
            (aw.transpose(0, 2, 1) @ gh).transpose(1, 0, 2)).reshape(n, d))
        da = gh @ vh.transpose(0, 2, 1)
        ds = aw * (da - (da * aw).sum(axis=2, keepdims=True))
        ds *= inv_sqrt
        _accum(q, np.ascontiguousarray((ds @ kh).transpose(1, 0, 2)).reshape(m, d))
        _accum(k, np.ascontiguousarray(
            (ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2)).reshape(n, d))

    return _record(out, (q, k, v), backward)
