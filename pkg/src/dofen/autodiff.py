"""Tape-based reverse-mode automatic differentiation over numpy arrays.

The engine provides exactly the operations the forest-ensemble forward pass
needs. Graphs are dynamic: each forward pass records onto the innermost
active ``Tape``, and ``backward`` replays that tape in exact reverse order.
Broadcasting is limited to the shapes these operations define; anything else
is rejected eagerly with a diagnostic naming the offending dimension.

Tensors are immutable after forward construction except for their ``grad``
slot. A single tape is single-threaded; independent tapes may run on
separate threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .precision import active_dtype
from .rng import RngStream


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_on_tape", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        # np.array keeps 0-d scalars 0-d (ascontiguousarray would promote them).
        self.data = np.array(data, dtype=active_dtype(), order="C", copy=None)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._on_tape = False
        self._tape: "Tape | None" = None

    @classmethod
    def _from_array(cls, arr: np.ndarray) -> "Tensor":
        # Internal: wrap an op result without changing its dtype.
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._on_tape = False
        out._tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


# One stack per process; forward passes nest tapes explicitly.
_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one forward pass.

    Each record holds the output tensor, its input tensors and a backward
    rule mapping the output gradient to per-input gradients. Records are
    appended in execution order, so inputs always precede the operations
    that consume them.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self._records.append((out, inputs, rule))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _track(out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._on_tape for t in inputs):
        out._on_tape = True
        out._tape = tape
        tape._append(out, inputs, rule)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Gradients accumulate additively, so a tensor used on several paths
    receives the sum of its path gradients.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss.grad = np.asarray(1.0, dtype=loss.data.dtype)
    for out, inputs, rule in reversed(loss._tape._records):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not (t.requires_grad or t._on_tape):
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


# ---------------------------------------------------------------------------
# Core compute ops
# ---------------------------------------------------------------------------

def grouped_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Independent affine map per group: out[b,g,:] = x[b,g,:] @ weight[g] + bias[g].

    x: [B, G, I], weight: [G, I, O], bias: [G, O] -> [B, G, O].
    """
    _require(x.data.ndim == 3, f"grouped_linear: input must be rank 3, got shape {x.shape}")
    _require(weight.data.ndim == 3, f"grouped_linear: weight must be rank 3, got shape {weight.shape}")
    _require(bias.data.ndim == 2, f"grouped_linear: bias must be rank 2, got shape {bias.shape}")
    B, G, I = x.shape
    _require(G >= 1, f"grouped_linear: need at least one group, got G={G}")
    _require(
        weight.shape[0] == G,
        f"grouped_linear: group dimension mismatch, input has G={G} but weight has G={weight.shape[0]}",
    )
    _require(
        weight.shape[1] == I,
        f"grouped_linear: input-feature dimension mismatch, input has I={I} but weight has I={weight.shape[1]}",
    )
    O = weight.shape[2]
    _require(
        bias.shape == (G, O),
        f"grouped_linear: bias shape {bias.shape} does not match (G={G}, O={O})",
    )

    out = np.einsum("bgi,gio->bgo", x.data, weight.data) + bias.data[None, :, :]

    def rule(g):
        dx = np.einsum("bgo,gio->bgi", g, weight.data)
        dw = np.einsum("bgi,bgo->gio", x.data, g)
        db = g.sum(axis=0)
        return dx, dw, db

    return _track(Tensor._from_array(out), (x, weight, bias), rule)


def group_layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, group) row over its trailing axis, then scale/shift.

    x: [B, G, I], gain/shift: [G, I]. eps keeps the variance denominator
    positive; a constant row therefore normalizes to zeros.
    """
    _require(x.data.ndim == 3, f"group_layer_norm: input must be rank 3, got shape {x.shape}")
    B, G, I = x.shape
    _require(I >= 1, "group_layer_norm: trailing axis must be non-empty (I >= 1)")
    _require(eps > 0, f"group_layer_norm: eps must be positive, got {eps}")
    _require(
        gain.shape == (G, I),
        f"group_layer_norm: gain shape {gain.shape} does not match (G={G}, I={I})",
    )
    _require(
        shift.shape == (G, I),
        f"group_layer_norm: shift shape {shift.shape} does not match (G={G}, I={I})",
    )

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = gain.data[None] * normed + shift.data[None]

    def rule(g):
        dgain = (g * normed).sum(axis=0)
        dshift = g.sum(axis=0)
        gx = g * gain.data[None]
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - normed * (gx * normed).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dshift

    return _track(Tensor._from_array(out), (x, gain, shift), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, computed with max subtraction.

    Outputs are positive and each trailing slice sums to 1. NaN inputs
    propagate NaN.
    """
    _require(x.data.shape[-1] >= 1, "softmax: trailing axis must be non-empty")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _track(Tensor._from_array(out), (x,), rule)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a [V, D] table; backward scatters gradients additively."""
    _require(table.data.ndim == 2, f"embedding_lookup: table must be rank 2, got shape {table.shape}")
    idx = np.asarray(indices)
    _require(np.issubdtype(idx.dtype, np.integer), "embedding_lookup: indices must be integers")
    V = table.shape[0]
    if idx.size:
        bad = (idx < 0) | (idx >= V)
        if bad.any():
            offender = int(idx.ravel()[np.flatnonzero(bad.ravel())[0]])
            raise ValueError(
                f"embedding_lookup: index {offender} out of range for table with {V} rows"
            )
    out = table.data[idx]

    def rule(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _track(Tensor._from_array(out), (table,), rule)


def dropout(x: Tensor, rate: float, training: bool, rng: RngStream) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors by 1/(1-rate).

    Identity (bit-exact, no rng draw) when rate is 0 or training is off.
    """
    _require(0.0 <= rate < 1.0, f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    mask = keep / x.data.dtype.type(1.0 - rate)
    out = x.data * mask

    def rule(g):
        return (g * mask,)

    return _track(Tensor._from_array(out), (x,), rule)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def rule(g):
        return (g * (x.data > 0),)

    return _track(Tensor._from_array(out), (x,), rule)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under [B, C] logits (log-sum-exp safe)."""
    _require(logits.data.ndim == 2, f"cross_entropy: logits must be rank 2, got shape {logits.shape}")
    B, C = logits.shape
    _require(B >= 1, "cross_entropy: batch must be non-empty")
    y = np.asarray(labels)
    _require(y.shape == (B,), f"cross_entropy: labels shape {y.shape} does not match batch {B}")
    if y.size and ((y < 0) | (y >= C)).any():
        offender = int(y[np.argmax((y < 0) | (y >= C))])
        raise ValueError(f"cross_entropy: label {offender} out of range for {C} classes")

    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    picked = logits.data[np.arange(B), y]
    out = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)

    def rule(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(B), y] -= 1.0
        return (g * p / B,)

    return _track(Tensor._from_array(out), (logits,), rule)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target of the same shape."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    _require(
        t.shape == pred.shape,
        f"mse: target shape {t.shape} does not match prediction shape {pred.shape}",
    )
    _require(pred.size >= 1, "mse: batch must be non-empty")
    diff = pred.data - t
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def rule(g):
        return (g * 2.0 * diff / diff.size,)

    return _track(Tensor._from_array(out), (pred,), rule)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.data.shape),)

    return _track(Tensor._from_array(out), (x,), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def rule(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _track(Tensor._from_array(out), (x,), rule)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather slices along ``axis``; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices)
    _require(idx.ndim == 1, "take: indices must be one-dimensional")
    n = x.shape[axis]
    if idx.size and ((idx < 0) | (idx >= n)).any():
        offender = int(idx[np.argmax((idx < 0) | (idx >= n))])
        raise ValueError(f"take: index {offender} out of range for axis {axis} with extent {n}")
    out = np.take(x.data, idx, axis=axis)
    key = (slice(None),) * axis + (idx,)

    def rule(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, key, g)
        return (dx,)

    return _track(Tensor._from_array(out), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _require(len(tensors) >= 1, "concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, cuts, axis=axis))

    return _track(Tensor._from_array(out), tuple(tensors), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def rule(g):
        return (g * factor,)

    return _track(Tensor._from_array(out), (x,), rule)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def rule(g):
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape)),)

    return _track(Tensor._from_array(out), (x,), rule)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; no gradient there."""
    keep_b = np.broadcast_to(np.asarray(keep, dtype=bool), x.data.shape)
    out = np.where(keep_b, x.data, x.data.dtype.type(value))

    def rule(g):
        return (g * keep_b,)

    return _track(Tensor._from_array(out), (x,), rule)


def weighted_pool(scores: Tensor, table: Tensor) -> Tensor:
    """Per-head weighted sum of embedding rows.

    scores: [B, R, H, E], table: [R, E, H, K] -> out[b,r,h,:] =
    sum_e scores[b,r,h,e] * table[r,e,h,:]. The forward sums over the E axis
    of the broadcast product so that a singleton head axis reduces in exactly
    the same order as a head-free computation.
    """
    _require(scores.data.ndim == 4, f"weighted_pool: scores must be rank 4, got {scores.shape}")
    _require(table.data.ndim == 4, f"weighted_pool: table must be rank 4, got {table.shape}")
    B, R, H, E = scores.shape
    _require(
        table.shape[0] == R and table.shape[1] == E and table.shape[2] == H,
        f"weighted_pool: table shape {table.shape} does not match scores (R={R}, E={E}, H={H})",
    )
    # [B,R,H,E,1] * [1,R,H,E,K] summed over E
    out = (scores.data[:, :, :, :, None] * table.data.transpose(0, 2, 1, 3)[None]).sum(axis=3)

    def rule(g):
        ds = np.einsum("brhk,rehk->brhe", g, table.data)
        dt = np.einsum("brhe,brhk->rehk", scores.data, g)
        return ds, dt

    return _track(Tensor._from_array(out), (scores, table), rule)


def weighted_pool_single(scores: Tensor, table: Tensor) -> Tensor:
    """Head-free twin of :func:`weighted_pool`.

    scores: [B, R, E], table: [R, E, K] -> [B, R, K]. Same reduction order as
    the multi-head version with one head, so the two are bit-identical there.
    """
    _require(scores.data.ndim == 3, f"weighted_pool_single: scores must be rank 3, got {scores.shape}")
    B, R, E = scores.shape
    _require(
        table.shape[0] == R and table.shape[1] == E,
        f"weighted_pool_single: table shape {table.shape} does not match scores (R={R}, E={E})",
    )
    out = (scores.data[:, :, :, None] * table.data[None]).sum(axis=2)

    def rule(g):
        ds = np.einsum("brk,rek->bre", g, table.data)
        dt = np.einsum("bre,brk->rek", scores.data, g)
        return ds, dt

    return _track(Tensor._from_array(out), (scores, table), rule)


# ---------------------------------------------------------------------------
# Dense (single-group) conveniences
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense affine map: x [N, I] @ weight [I, O] + bias [O]."""
    B = x.shape[0]
    x3 = reshape(x, (B, 1, x.shape[1]))
    w3 = reshape(weight, (1,) + tuple(weight.shape))
    b2 = reshape(bias, (1, bias.shape[0]))
    return reshape(grouped_linear(x3, w3, b2), (B, weight.shape[1]))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Dense layer norm over the trailing axis of x [N, I]."""
    B, I = x.shape
    x3 = reshape(x, (B, 1, I))
    g2 = reshape(gain, (1, I))
    s2 = reshape(shift, (1, I))
    return reshape(group_layer_norm(x3, g2, s2, eps), (B, I))


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` must be deterministic given fixed rng streams and return a scalar
    tensor. Every element of every parameter is perturbed by +/- h. The
    relative error of one element is |analytic - central| / max(|analytic|,
    |central|, 1e-12).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = f().item()
            flat[i] = original - h
            f_minus = f().item()
            flat[i] = original
            central = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(float(aflat[i])), abs(central), 1e-12)
            worst = max(worst, abs(float(aflat[i]) - central) / denom)
    return worst
