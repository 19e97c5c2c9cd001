"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every forward operation as a node; ``Tape.backward``
walks the node list in reverse and accumulates vector-Jacobian products
into every registered parameter. The op set is deliberately small: what
a channel-aligned attention LSTM with an MSE loss needs, plus a handful
of fused ops (affine, gate, cell) that keep the Python overhead of long
unrolled recurrences tolerable.

Node handles are plain ints. A tape is single-threaded; run concurrent
sequences on separate tapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckReport",
    "ShapeError",
    "finite_difference",
    "grad_check",
    "MASK_LOGIT",
]

# Logit offset applied to masked softmax entries; large enough that the
# masked probability underflows to exactly 0.0 in float64.
MASK_LOGIT = -1e9


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class Tensor:
    """Dense float64 array with a validated shape.

    Values are stored row-major. Construction rejects NaN/Inf and
    zero-length extents; ``shape``, when given, must account for every
    value.
    """

    __slots__ = ("values",)

    def __init__(self, values, shape=None):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ShapeError(f"extents must be positive, got {shape}")
            if arr.size != math.prod(shape):
                raise ShapeError(
                    f"{arr.size} values cannot fill shape {shape}"
                )
            arr = arr.reshape(shape)
        elif any(s <= 0 for s in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.values = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.values
    return np.asarray(x, dtype=np.float64)


# Node kinds. Kept as module-level ints so the backward dispatch is a
# list lookup rather than a string compare.
_LEAF = 0
_MATMUL = 1
_ADD = 2
_TANH = 3
_SIGMOID = 4
_HADAMARD = 5
_SOFTMAX = 6
_CONCAT = 7
_MSE = 8
_DOT = 9
_PICK = 10
_SCALE = 11
_CMUL = 12
_AFFINE = 13
_AFFINE_TANH = 14
_GATE_SIGMOID = 15
_GATE_TANH = 16
_CELL = 17
_MUL_TANH = 18
_HARD_SELECT = 19

_KIND_NAMES = {
    _LEAF: "leaf", _MATMUL: "matmul", _ADD: "add", _TANH: "tanh",
    _SIGMOID: "sigmoid", _HADAMARD: "hadamard", _SOFTMAX: "softmax",
    _CONCAT: "concat", _MSE: "mse", _DOT: "dot", _PICK: "pick",
    _SCALE: "scale", _CMUL: "cmul", _AFFINE: "affine",
    _AFFINE_TANH: "affine_tanh", _GATE_SIGMOID: "gate_sigmoid",
    _GATE_TANH: "gate_tanh", _CELL: "cell", _MUL_TANH: "mul_tanh",
    _HARD_SELECT: "hard_select",
}


class Tape:
    """Topologically ordered record of one forward computation."""

    def __init__(self):
        self._kinds: list[int] = []
        self._parents: list[tuple[int, ...]] = []
        self._values: list[np.ndarray] = []
        self._aux: list = []
        # parameter name -> node id, insertion-ordered
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._kinds)

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    def kind_name(self, node: int) -> str:
        return _KIND_NAMES[self._kinds[node]]

    def _push(self, kind: int, parents: tuple[int, ...], value, aux=None) -> int:
        self._kinds.append(kind)
        self._parents.append(parents)
        self._values.append(value)
        self._aux.append(aux)
        return len(self._kinds) - 1

    # -- leaves ---------------------------------------------------------

    def const(self, value) -> int:
        """Record a constant input; no gradient is tracked for it."""
        return self._push(_LEAF, (), _as_array(value))

    def param(self, name: str, value) -> int:
        """Register a named parameter leaf. Names must be unique per tape."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        node = self._push(_LEAF, (), _as_array(value))
        self.params[name] = node
        return node

    # -- primitive ops --------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        av, bv = self._values[a], self._values[b]
        if bv.ndim != 2 or av.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
            raise ShapeError(
                f"matmul needs (r,k)@(k,c) or (k,)@(k,c), got {av.shape} @ {bv.shape}"
            )
        return self._push(_MATMUL, (a, b), av @ bv)

    def add(self, a: int, b: int) -> int:
        av, bv = self._values[a], self._values[b]
        if av.shape != bv.shape:
            raise ShapeError(f"add shapes differ: {av.shape} vs {bv.shape}")
        return self._push(_ADD, (a, b), av + bv)

    def tanh(self, a: int) -> int:
        return self._push(_TANH, (a,), np.tanh(self._values[a]))

    def sigmoid(self, a: int) -> int:
        return self._push(_SIGMOID, (a,), expit(self._values[a]))

    def hadamard(self, a: int, b: int) -> int:
        av, bv = self._values[a], self._values[b]
        if av.shape != bv.shape:
            raise ShapeError(f"hadamard shapes differ: {av.shape} vs {bv.shape}")
        return self._push(_HADAMARD, (a, b), av * bv)

    def elementwise(self, kind: str, *args: int) -> int:
        """Dispatch by name over {tanh, sigmoid, add, hadamard}."""
        try:
            op = {"tanh": self.tanh, "sigmoid": self.sigmoid,
                  "add": self.add, "hadamard": self.hadamard}[kind]
        except KeyError:
            raise ValueError(f"unknown elementwise kind {kind!r}") from None
        return op(*args)

    def softmax(self, logits: int) -> int:
        v = self._values[logits]
        if v.ndim != 1 or v.size < 1:
            raise ShapeError(f"softmax needs a non-empty vector, got {v.shape}")
        e = np.exp(v - v.max())
        return self._push(_SOFTMAX, (logits,), e / e.sum())

    def concat(self, parts: list[int]) -> int:
        if not parts:
            raise ShapeError("concat needs at least one part")
        vals = [self._values[p] for p in parts]
        for v in vals:
            if v.ndim != 1:
                raise ShapeError(f"concat parts must be vectors, got {v.shape}")
        offsets = np.cumsum([0] + [v.size for v in vals])
        return self._push(_CONCAT, tuple(parts), np.concatenate(vals), offsets)

    def mse(self, pred: int, target: int) -> int:
        pv, tv = self._values[pred], self._values[target]
        if pv.shape != tv.shape:
            raise ShapeError(f"mse shapes differ: {pv.shape} vs {tv.shape}")
        if pv.size == 0:
            raise ShapeError("mse of zero elements is undefined")
        diff = pv - tv
        return self._push(_MSE, (pred, target), np.asarray((diff * diff).mean()), diff)

    def dot(self, a: int, b: int) -> int:
        av, bv = self._values[a], self._values[b]
        if av.ndim != 1 or av.shape != bv.shape:
            raise ShapeError(f"dot needs equal-length vectors, got {av.shape}/{bv.shape}")
        return self._push(_DOT, (a, b), np.asarray(av @ bv))

    def pick(self, a: int, index: int) -> int:
        v = self._values[a]
        if v.ndim != 1 or not (0 <= index < v.size):
            raise ShapeError(f"pick index {index} out of range for {v.shape}")
        return self._push(_PICK, (a,), np.asarray(v[index]), index)

    def scale(self, v: int, s: int) -> int:
        """Multiply tensor ``v`` by scalar node ``s``; both receive gradients."""
        sv = self._values[s]
        if sv.size != 1:
            raise ShapeError(f"scale factor must be scalar, got {sv.shape}")
        return self._push(_SCALE, (v, s), self._values[v] * sv)

    def cmul(self, v: int, c: float) -> int:
        """Multiply by a Python constant (no gradient for the constant)."""
        return self._push(_CMUL, (v,), self._values[v] * c, float(c))

    # -- fused ops (hot path of the unrolled recurrence) -----------------

    def affine(self, x: int, w: int, b: int) -> int:
        xv, wv, bv = self._values[x], self._values[w], self._values[b]
        if xv.ndim != 1 or wv.ndim != 2 or xv.size != wv.shape[0] or bv.shape != (wv.shape[1],):
            raise ShapeError(
                f"affine needs (k,)@(k,c)+(c,), got {xv.shape}, {wv.shape}, {bv.shape}"
            )
        return self._push(_AFFINE, (x, w, b), xv @ wv + bv)

    def affine_tanh(self, x: int, w: int, b: int) -> int:
        node = self.affine(x, w, b)
        self._kinds[node] = _AFFINE_TANH
        self._values[node] = np.tanh(self._values[node])
        return node

    def _gate(self, kind: int, act, x: int, u: int, h: int, r: int, b: int) -> int:
        xv, uv, hv, rv, bv = (self._values[i] for i in (x, u, h, r, b))
        if xv.size != uv.shape[0] or hv.size != rv.shape[0] or uv.shape[1] != rv.shape[1]:
            raise ShapeError("gate operand shapes inconsistent")
        return self._push(kind, (x, u, h, r, b), act(xv @ uv + hv @ rv + bv))

    def gate_sigmoid(self, x: int, u: int, h: int, r: int, b: int) -> int:
        """sigmoid(x @ u + h @ r + b) as one node."""
        return self._gate(_GATE_SIGMOID, expit, x, u, h, r, b)

    def gate_tanh(self, x: int, u: int, h: int, r: int, b: int) -> int:
        """tanh(x @ u + h @ r + b) as one node."""
        return self._gate(_GATE_TANH, np.tanh, x, u, h, r, b)

    def cell(self, g: int, s_prev: int, i: int, z: int) -> int:
        """g * s_prev + i * z, the LSTM memory update, as one node."""
        return self._push(
            _CELL, (g, s_prev, i, z),
            self._values[g] * self._values[s_prev] + self._values[i] * self._values[z],
        )

    def mul_tanh(self, o: int, s: int) -> int:
        """o * tanh(s) as one node."""
        ts = np.tanh(self._values[s])
        return self._push(_MUL_TANH, (o, s), self._values[o] * ts, ts)

    def hard_select(self, a: int, h: int, index: int) -> int:
        """Forward the selected vector ``h``; backward as if it were a[index] * h.

        The straight-through surrogate: the forward value is the unscaled
        selected channel, while gradients flow to both the channel and the
        selecting attention weight as though the output were their product.
        """
        av = self._values[a]
        if av.ndim != 1 or not (0 <= index < av.size):
            raise ShapeError(f"hard_select index {index} out of range for {av.shape}")
        return self._push(_HARD_SELECT, (a, h), self._values[h], (index, av[index]))

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss node w.r.t. every registered parameter.

        Parameters not reachable from the loss get zero gradients.
        Accumulation is by addition in reverse node order, so replaying an
        identical tape yields bit-identical gradients.
        """
        loss_val = self._values[loss]
        if loss_val.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss_val.shape}")
        grads: list = [None] * len(self._kinds)
        grads[loss] = np.ones_like(loss_val)
        kinds, parents, values, aux = self._kinds, self._parents, self._values, self._aux
        for i in range(loss, -1, -1):
            g = grads[i]
            kind = kinds[i]
            if g is None or kind == _LEAF:
                continue
            _VJPS[kind](parents[i], values, aux[i], values[i], g, grads)
        out = {}
        for name, node in self.params.items():
            gn = grads[node]
            out[name] = gn if gn is not None else np.zeros_like(self._values[node])
        return out


def _acc(grads, i, val):
    cur = grads[i]
    grads[i] = val if cur is None else cur + val


def _vjp_matmul(parents, values, aux, out, g, grads):
    a, b = parents
    av, bv = values[a], values[b]
    _acc(grads, a, g @ bv.T)
    _acc(grads, b, np.outer(av, g) if av.ndim == 1 else av.T @ g)


def _vjp_add(parents, values, aux, out, g, grads):
    _acc(grads, parents[0], g)
    _acc(grads, parents[1], g)


def _vjp_tanh(parents, values, aux, out, g, grads):
    _acc(grads, parents[0], g * (1.0 - out * out))


def _vjp_sigmoid(parents, values, aux, out, g, grads):
    _acc(grads, parents[0], g * out * (1.0 - out))


def _vjp_hadamard(parents, values, aux, out, g, grads):
    a, b = parents
    _acc(grads, a, g * values[b])
    _acc(grads, b, g * values[a])


def _vjp_softmax(parents, values, aux, out, g, grads):
    _acc(grads, parents[0], out * (g - out @ g))


def _vjp_concat(parents, values, aux, out, g, grads):
    for p, lo, hi in zip(parents, aux[:-1], aux[1:]):
        _acc(grads, p, g[lo:hi])


def _vjp_mse(parents, values, aux, out, g, grads):
    # aux holds pred - target
    d = (2.0 / aux.size) * g * aux
    _acc(grads, parents[0], d)
    _acc(grads, parents[1], -d)


def _vjp_dot(parents, values, aux, out, g, grads):
    a, b = parents
    _acc(grads, a, g * values[b])
    _acc(grads, b, g * values[a])


def _vjp_pick(parents, values, aux, out, g, grads):
    full = np.zeros_like(values[parents[0]])
    full[aux] = g
    _acc(grads, parents[0], full)


def _vjp_scale(parents, values, aux, out, g, grads):
    v, s = parents
    _acc(grads, v, g * values[s])
    _acc(grads, s, np.asarray((g * values[v]).sum()))


def _vjp_cmul(parents, values, aux, out, g, grads):
    _acc(grads, parents[0], g * aux)


def _vjp_affine(parents, values, aux, out, g, grads):
    x, w, b = parents
    _acc(grads, x, g @ values[w].T)
    _acc(grads, w, np.outer(values[x], g))
    _acc(grads, b, g)


def _vjp_affine_tanh(parents, values, aux, out, g, grads):
    _vjp_affine(parents, values, aux, out, g * (1.0 - out * out), grads)


def _vjp_gate(parents, values, d, grads):
    x, u, h, r, b = parents
    _acc(grads, x, d @ values[u].T)
    _acc(grads, u, np.outer(values[x], d))
    _acc(grads, h, d @ values[r].T)
    _acc(grads, r, np.outer(values[h], d))
    _acc(grads, b, d)


def _vjp_gate_sigmoid(parents, values, aux, out, g, grads):
    _vjp_gate(parents, values, g * out * (1.0 - out), grads)


def _vjp_gate_tanh(parents, values, aux, out, g, grads):
    _vjp_gate(parents, values, g * (1.0 - out * out), grads)


def _vjp_cell(parents, values, aux, out, g, grads):
    gate, s_prev, i, z = parents
    _acc(grads, gate, g * values[s_prev])
    _acc(grads, s_prev, g * values[gate])
    _acc(grads, i, g * values[z])
    _acc(grads, z, g * values[i])


def _vjp_mul_tanh(parents, values, aux, out, g, grads):
    o, s = parents
    _acc(grads, o, g * aux)
    _acc(grads, s, g * values[o] * (1.0 - aux * aux))


def _vjp_hard_select(parents, values, aux, out, g, grads):
    a, h = parents
    index, a_k = aux
    _acc(grads, h, g * a_k)
    full = np.zeros_like(values[a])
    full[index] = g @ values[h]
    _acc(grads, a, full)


_VJPS: list = [None] * 20
_VJPS[_MATMUL] = _vjp_matmul
_VJPS[_ADD] = _vjp_add
_VJPS[_TANH] = _vjp_tanh
_VJPS[_SIGMOID] = _vjp_sigmoid
_VJPS[_HADAMARD] = _vjp_hadamard
_VJPS[_SOFTMAX] = _vjp_softmax
_VJPS[_CONCAT] = _vjp_concat
_VJPS[_MSE] = _vjp_mse
_VJPS[_DOT] = _vjp_dot
_VJPS[_PICK] = _vjp_pick
_VJPS[_SCALE] = _vjp_scale
_VJPS[_CMUL] = _vjp_cmul
_VJPS[_AFFINE] = _vjp_affine
_VJPS[_AFFINE_TANH] = _vjp_affine_tanh
_VJPS[_GATE_SIGMOID] = _vjp_gate_sigmoid
_VJPS[_GATE_TANH] = _vjp_gate_tanh
_VJPS[_CELL] = _vjp_cell
_VJPS[_MUL_TANH] = _vjp_mul_tanh
_VJPS[_HARD_SELECT] = _vjp_hard_select


# -- verification ---------------------------------------------------------

BuildFn = Callable[[dict], tuple[Tape, int]]


def finite_difference(loss_fn: Callable[[dict], float], params: dict,
                      h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of ``loss_fn`` w.r.t. every entry of ``params``."""
    grads = {}
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name, value in work.items():
        grad = np.zeros_like(value)
        flat, gflat = value.ravel(), grad.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn(work)
            flat[j] = orig - h
            down = loss_fn(work)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        grads[name] = grad
    return grads


@dataclass
class GradCheckReport:
    """Per-parameter agreement between reverse-mode and central differences."""

    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_err: float = 0.0
    tol: float = 1e-4
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.max_rel_err < self.tol


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def grad_check(build: BuildFn, params: dict, h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-5) -> GradCheckReport:
    """Compare ``Tape.backward`` against central finite differences.

    ``build`` must deterministically construct a tape and return
    ``(tape, loss_node)`` given a parameter dict. The relative error uses
    ``|a - b| / max(|a|, |b|, floor)``; the floor keeps exactly-zero
    gradients from dividing finite-difference roundoff by ~0.

    If ``build`` raises, the report carries the error and no check runs.
    """
    try:
        tape, loss = build(params)
        analytic = tape.backward(loss)
    except Exception as exc:  # degenerate input: report, don't check
        return GradCheckReport(tol=tol, error=f"{type(exc).__name__}: {exc}")

    def loss_value(p: dict) -> float:
        t, node = build(p)
        return float(t.value(node))

    numeric = finite_difference(loss_value, params, h=h)
    report = GradCheckReport(tol=tol)
    for name in params:
        err = _rel_err(analytic[name], numeric[name], floor)
        report.per_param[name] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report
