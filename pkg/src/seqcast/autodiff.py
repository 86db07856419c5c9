"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

A ``Tape`` records primitive operations in topological order during the
forward pass.  ``backward`` seeds a scalar root with ones and accumulates
vector-Jacobian products back to the leaves.  A ``NodeRef`` can be marked
detached: it carries the forward value but blocks all adjoint flow into the
subgraph behind it, which is how scheduled-sampling feedback is cut out of
the gradient.

The primitive set is deliberately small (10 kinds) so every adjoint rule can
be audited and checked against finite differences.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

OP_KINDS = frozenset(
    {"matmul", "add", "hadamard", "concat", "sigmoid", "tanh",
     "scale", "slice", "sum", "square"}
)

# Fault-injection hook for the gradcheck CLI: name of an op kind whose
# adjoint gets deliberately corrupted.  Never set outside verification runs.
_ADJOINT_FAULT: str | None = None


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's contract."""


class TapeError(RuntimeError):
    """Structural misuse of a tape (wrong tape, empty tape, non-scalar root)."""


class NodeRef:
    """Handle to a node on a tape.

    ``detached`` refs contribute their forward value but zero adjoint flow
    to their parents.
    """

    __slots__ = ("tape", "index", "detached")

    def __init__(self, tape: "Tape", index: int, detached: bool = False):
        self.tape = tape
        self.index = index
        self.detached = detached

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.index].shape

    def __repr__(self) -> str:  # pragma: no cover
        tag = ", detached" if self.detached else ""
        return f"NodeRef({self.index}, {self.tape.kinds[self.index]}{tag})"


def detach(x: NodeRef) -> NodeRef:
    """Value-transparent, gradient-opaque view of ``x``."""
    return NodeRef(x.tape, x.index, detached=True)


class Tape:
    """Append-only record of one unrolled computation.

    Tapes are build-once: forward values are never mutated after
    registration, and ``backward`` may be called repeatedly with identical
    results.  Single-owner: never share a tape across threads.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[NodeRef, ...]] = []
        self.values: list[np.ndarray] = []
        self.aux: list = []
        self.grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self.kinds)

    def _register(self, kind: str, parents: tuple, value: np.ndarray, aux) -> NodeRef:
        self.kinds.append(kind)
        self.parents.append(parents)
        self.values.append(value)
        self.aux.append(aux)
        return NodeRef(self, len(self.kinds) - 1)

    def leaf(self, value) -> NodeRef:
        """Register an input/parameter node with no parents."""
        arr = np.asarray(value, dtype=np.float64)
        return self._register("leaf", (), arr, None)

    def value(self, ref: NodeRef) -> np.ndarray:
        return self.values[ref.index]

    def grad(self, ref: NodeRef) -> np.ndarray:
        """Adjoint of the last backward() root w.r.t. ``ref`` (zeros if unreached)."""
        if self.grads is None:
            raise TapeError("grad() before backward()")
        if ref.index >= len(self.grads) or self.grads[ref.index] is None:
            return np.zeros_like(self.values[ref.index])
        return self.grads[ref.index]

    # -- forward ----------------------------------------------------------

    def apply(self, kind: str, inputs: Sequence[NodeRef], **aux) -> NodeRef:
        """Apply a primitive op to nodes already on this tape."""
        if kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {kind!r}")
        for r in inputs:
            if r.tape is not self:
                raise TapeError(f"{kind}: input node belongs to a different tape")
        vals = [self.values[r.index] for r in inputs]

        if kind == "matmul":
            a, b = _arity(kind, vals, 2)
            if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
            out = a @ b
        elif kind == "add":
            a, b = _arity(kind, vals, 2)
            if a.shape != b.shape:
                raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
            out = a + b
        elif kind == "hadamard":
            a, b = _arity(kind, vals, 2)
            if a.shape != b.shape:
                raise ShapeError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
            out = a * b
        elif kind == "concat":
            if not vals:
                raise ShapeError("concat: needs at least one input")
            if any(v.ndim != 1 for v in vals):
                raise ShapeError(f"concat: all inputs must be 1-d, got {[v.shape for v in vals]}")
            out = np.concatenate(vals)
        elif kind == "sigmoid":
            (a,) = _arity(kind, vals, 1)
            out = _sigmoid(a)
        elif kind == "tanh":
            (a,) = _arity(kind, vals, 1)
            out = np.tanh(a)
        elif kind == "square":
            (a,) = _arity(kind, vals, 1)
            out = a * a
        elif kind == "scale":
            (a,) = _arity(kind, vals, 1)
            out = a * aux["factor"]
        elif kind == "slice":
            (a,) = _arity(kind, vals, 1)
            if a.ndim != 1:
                raise ShapeError(f"slice: input must be 1-d, got {a.shape}")
            start, stop = aux["start"], aux["stop"]
            if not (0 <= start <= stop <= a.shape[0]):
                raise ShapeError(f"slice: [{start}:{stop}] out of range for length {a.shape[0]}")
            out = a[start:stop].copy()
        elif kind == "sum":
            (a,) = _arity(kind, vals, 1)
            out = np.asarray(a.sum())
        else:  # pragma: no cover
            raise AssertionError(kind)

        return self._register(kind, tuple(inputs), out, aux or None)

    # convenience wrappers keep call sites readable
    def matmul(self, a, b):
        return self.apply("matmul", (a, b))

    def add(self, a, b):
        return self.apply("add", (a, b))

    def hadamard(self, a, b):
        return self.apply("hadamard", (a, b))

    def concat(self, *xs):
        return self.apply("concat", xs)

    def sigmoid(self, x):
        return self.apply("sigmoid", (x,))

    def tanh(self, x):
        return self.apply("tanh", (x,))

    def square(self, x):
        return self.apply("square", (x,))

    def scale(self, x, factor: float):
        return self.apply("scale", (x,), factor=float(factor))

    def slice(self, x, start: int, stop: int):
        return self.apply("slice", (x,), start=int(start), stop=int(stop))

    def sum(self, x):
        return self.apply("sum", (x,))


def op_apply(kind: str, inputs: Sequence[NodeRef], **aux) -> NodeRef:
    """Free-function form of :meth:`Tape.apply`; the tape is taken from the inputs."""
    if not inputs:
        raise ShapeError(f"{kind}: needs at least one input")
    return inputs[0].tape.apply(kind, inputs, **aux)


def _arity(kind, vals, n):
    if len(vals) != n:
        raise ShapeError(f"{kind}: expected {n} inputs, got {len(vals)}")
    return vals


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay overflow-free for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- backward --------------------------------------------------------------


def backward(tape: Tape, root: NodeRef) -> list[np.ndarray | None]:
    """Populate adjoints of ``root`` w.r.t. every node at or below it.

    ``root`` must be scalar-shaped.  Detached parent links block adjoint
    flow; a node consumed by several ops accumulates adjoints additively.
    Repeated calls on the same tape recompute identical gradients.
    """
    if root.tape is not tape:
        raise TapeError("backward: root belongs to a different tape")
    if len(tape) == 0:
        raise TapeError("backward on empty tape")
    if tape.values[root.index].size != 1:
        raise TapeError(f"backward: root must be scalar, got shape {root.shape}")

    grads: list[np.ndarray | None] = [None] * (root.index + 1)
    grads[root.index] = np.ones_like(tape.values[root.index])

    for i in range(root.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        kind = tape.kinds[i]
        if kind == "leaf":
            continue
        parents = tape.parents[i]
        aux = tape.aux[i]

        if kind == "matmul":
            a, b = parents
            av, bv = tape.values[a.index], tape.values[b.index]
            if bv.ndim == 1:
                _acc(grads, a, np.outer(g, bv))
                _acc(grads, b, av.T @ g)
            else:
                _acc(grads, a, g @ bv.T)
                _acc(grads, b, av.T @ g)
        elif kind == "add":
            _acc(grads, parents[0], g)
            _acc(grads, parents[1], g)
        elif kind == "hadamard":
            a, b = parents
            _acc(grads, a, g * tape.values[b.index])
            _acc(grads, b, g * tape.values[a.index])
        elif kind == "concat":
            off = 0
            for p in parents:
                n = tape.values[p.index].shape[0]
                _acc(grads, p, g[off:off + n])
                off += n
        elif kind == "sigmoid":
            y = tape.values[i]
            _acc(grads, parents[0], g * y * (1.0 - y))
        elif kind == "tanh":
            y = tape.values[i]
            _acc(grads, parents[0], g * (1.0 - y * y))
        elif kind == "square":
            _acc(grads, parents[0], 2.0 * g * tape.values[parents[0].index])
        elif kind == "scale":
            _acc(grads, parents[0], g * aux["factor"])
        elif kind == "slice":
            p = parents[0]
            gx = np.zeros_like(tape.values[p.index])
            gx[aux["start"]:aux["stop"]] = g
            _acc(grads, p, gx)
        elif kind == "sum":
            p = parents[0]
            _acc(grads, p, np.full_like(tape.values[p.index], float(g)))
        else:  # pragma: no cover
            raise AssertionError(kind)

        if _ADJOINT_FAULT is not None and kind == _ADJOINT_FAULT:
            for p in parents:
                if not p.detached and grads[p.index] is not None:
                    grads[p.index] = grads[p.index] * 1.01

    tape.grads = grads
    return grads


def _acc(grads, ref: NodeRef, g: np.ndarray) -> None:
    if ref.detached:
        return
    i = ref.index
    if grads[i] is None:
        grads[i] = np.array(g, dtype=np.float64)
    else:
        grads[i] = grads[i] + g


# -- gradient-check oracle ---------------------------------------------------


def finite_difference_grad(
    f: Callable[[np.ndarray], float], params: np.ndarray, eps: float
) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``params``.

    ``f`` must be deterministic given its argument; it is re-evaluated twice
    per coordinate on a perturbed copy of ``params``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(p))
        flat[i] = orig - eps
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"finite_difference_grad: non-finite evaluation at coordinate {i}"
            )
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
