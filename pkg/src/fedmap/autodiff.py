"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tape records a computation graph with a single scalar root. Graphs are
built by calling the op functions below on `Var` handles; `Tape.forward`
evaluates the graph for a set of input arrays (replayable with fresh
inputs), `Tape.backward` returns the gradient of the root with respect to
every input. All arithmetic is float64 and every reduction runs in a fixed
serial order, so replaying the same tape on the same inputs is
bit-identical.

Only scalar roots are supported: every objective in this package is a
scalar loss. No broadcasting beyond the documented op signatures, no
higher-order derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import (
    cox_nll as _cox_kernel,
    sigmoid as _sigmoid,
    softmax_xent_bwd as _xent_bwd,
    softmax_xent_fwd as _xent_fwd,
    softplus as _softplus,
)

__all__ = [
    "Tape",
    "Var",
    "add",
    "sub",
    "mul",
    "scale",
    "matvec",
    "affine",
    "relu",
    "softplus",
    "square",
    "log",
    "exp",
    "asum",
    "mean",
    "dot",
    "concat",
    "flatten",
    "sumsq",
    "xent_logits",
    "cox_partial_nll",
    "check_gradient",
    "finite_diff_gradient",
]


@dataclass(frozen=True)
class Var:
    """Handle to one node of a Tape."""

    tape: "Tape"
    idx: int

    @property
    def shape(self):
        return self.tape._shapes[self.idx]

    def __add__(self, other):
        return add(self, _lift(self.tape, other, self.shape))

    def __radd__(self, other):
        return add(_lift(self.tape, other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Computation graph with cached values and adjoints.

    A tape instance is single-threaded; use one tape per thread. After
    `forward` has run, `backward` may be called any number of times;
    `reset` clears cached values so the same graph can be replayed.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._aux: list = []
        self._shapes: list[tuple[int, ...]] = []
        self._values: list = []
        self._adjoints: list = []
        self._cache: dict[int, object] = {}
        self._input_ids: list[int] = []
        self._root: int | None = None
        self._ran_forward = False

    # ---- graph construction -------------------------------------------------

    def _append(self, op: str, args: tuple[int, ...], shape, aux=None) -> Var:
        self._ops.append(op)
        self._args.append(args)
        self._aux.append(aux)
        self._shapes.append(tuple(shape))
        self._values.append(None)
        self._adjoints.append(None)
        return Var(self, len(self._ops) - 1)

    def input(self, shape) -> Var:
        """Declare a differentiable input leaf of the given shape."""
        if isinstance(shape, int):
            shape = (shape,)
        v = self._append("input", (), shape)
        self._input_ids.append(v.idx)
        return v

    def constant(self, value) -> Var:
        """Embed a fixed array; gradients do not flow out of it."""
        arr = np.asarray(value, dtype=np.float64)
        v = self._append("const", (), arr.shape, aux=arr)
        return v

    def set_root(self, var: Var) -> None:
        if var.tape is not self:
            raise ValueError("root Var belongs to a different tape")
        if self._shapes[var.idx] != ():
            raise ValueError(
                f"root must be scalar, node {var.idx} has shape {self._shapes[var.idx]}"
            )
        self._root = var.idx

    @property
    def n_inputs(self) -> int:
        return len(self._input_ids)

    # ---- execution ----------------------------------------------------------

    def forward(self, *inputs) -> float:
        """Evaluate the graph on the given input arrays, return the root value."""
        if self._root is None:
            raise RuntimeError("no root set on this tape")
        if len(inputs) != len(self._input_ids):
            raise ValueError(
                f"tape expects {len(self._input_ids)} inputs, got {len(inputs)}"
            )
        self.reset()
        for node_id, arr in zip(self._input_ids, inputs):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._shapes[node_id]:
                raise ValueError(
                    f"input node {node_id}: expected shape {self._shapes[node_id]}, "
                    f"got {arr.shape}"
                )
            self._values[node_id] = arr
        for idx in range(len(self._ops)):
            if self._values[idx] is None:
                self._values[idx] = self._eval(idx)
        self._ran_forward = True
        return float(self._values[self._root])

    def value(self, var: Var) -> np.ndarray:
        if not self._ran_forward:
            raise RuntimeError("forward has not run")
        return self._values[var.idx]

    def backward(self) -> list[np.ndarray]:
        """Gradient of the root with respect to every input, in declaration order."""
        if not self._ran_forward:
            raise RuntimeError("backward called before forward")
        n = len(self._ops)
        self._adjoints = [None] * n
        self._adjoints[self._root] = np.ones(())
        for idx in range(n - 1, -1, -1):
            g = self._adjoints[idx]
            if g is None:
                continue
            self._propagate(idx, g)
        out = []
        for node_id in self._input_ids:
            g = self._adjoints[node_id]
            if g is None:
                g = np.zeros(self._shapes[node_id])
            out.append(np.asarray(g, dtype=np.float64))
        return out

    def reset(self) -> None:
        """Drop cached values and adjoints; the graph itself is kept."""
        for idx in range(len(self._ops)):
            if self._ops[idx] == "const":
                self._values[idx] = self._aux[idx]
            else:
                self._values[idx] = None
            self._adjoints[idx] = None
        self._cache.clear()
        self._ran_forward = False

    # ---- op semantics --------------------------------------------------------

    def _eval(self, idx: int):
        op = self._ops[idx]
        args = [self._values[a] for a in self._args[idx]]
        aux = self._aux[idx]
        if op == "input":
            raise ValueError(f"input node {idx} was not fed a value")
        if op == "add":
            return args[0] + args[1]
        if op == "sub":
            return args[0] - args[1]
        if op == "mul":
            return args[0] * args[1]
        if op == "scale":
            return args[0] * aux
        if op == "matvec":
            return args[0] @ args[1]
        if op == "affine":
            x, w, b = args
            return x @ w.T + b
        if op == "relu":
            return np.maximum(args[0], 0.0)
        if op == "softplus":
            return _softplus(args[0])
        if op == "square":
            return args[0] * args[0]
        if op == "log":
            return np.log(args[0])
        if op == "exp":
            return np.exp(args[0])
        if op == "sum":
            return np.asarray(args[0].sum())
        if op == "mean":
            return np.asarray(args[0].mean())
        if op == "dot":
            return np.asarray(args[0] @ args[1])
        if op == "concat":
            return np.concatenate(args)
        if op == "reshape":
            return args[0].reshape(aux)
        if op == "xent":
            loss, probs = _xent_fwd(args[0], aux)
            self._cache[idx] = probs
            return np.asarray(loss)
        if op == "coxnll":
            order, events_sorted, group_start = aux
            loss, grad_sorted = _cox_kernel(
                args[0][order], events_sorted, group_start
            )
            grad = np.empty_like(args[0])
            grad[order] = grad_sorted
            self._cache[idx] = grad
            return np.asarray(loss)
        raise AssertionError(f"unknown op {op!r} at node {idx}")

    def _accumulate(self, node_id: int, contrib) -> None:
        if self._adjoints[node_id] is None:
            self._adjoints[node_id] = np.zeros(self._shapes[node_id])
        self._adjoints[node_id] += contrib

    def _propagate(self, idx: int, g) -> None:
        op = self._ops[idx]
        if op in ("input", "const"):
            return
        args = self._args[idx]
        vals = [self._values[a] for a in args]
        aux = self._aux[idx]
        if op == "add":
            self._accumulate(args[0], g)
            self._accumulate(args[1], g)
        elif op == "sub":
            self._accumulate(args[0], g)
            self._accumulate(args[1], -g)
        elif op == "mul":
            self._accumulate(args[0], g * vals[1])
            self._accumulate(args[1], g * vals[0])
        elif op == "scale":
            self._accumulate(args[0], g * aux)
        elif op == "matvec":
            self._accumulate(args[0], np.outer(g, vals[1]))
            self._accumulate(args[1], vals[0].T @ g)
        elif op == "affine":
            x, w, _ = vals
            if x.ndim == 1:
                self._accumulate(args[0], g @ w)
                self._accumulate(args[1], np.outer(g, x))
                self._accumulate(args[2], g)
            else:
                self._accumulate(args[0], g @ w)
                self._accumulate(args[1], g.T @ x)
                self._accumulate(args[2], g.sum(axis=0))
        elif op == "relu":
            self._accumulate(args[0], g * (vals[0] > 0.0))
        elif op == "softplus":
            self._accumulate(args[0], g * _sigmoid(vals[0]))
        elif op == "square":
            self._accumulate(args[0], 2.0 * g * vals[0])
        elif op == "log":
            self._accumulate(args[0], g / vals[0])
        elif op == "exp":
            self._accumulate(args[0], g * self._values[idx])
        elif op == "sum":
            self._accumulate(args[0], np.broadcast_to(g, vals[0].shape))
        elif op == "mean":
            self._accumulate(args[0], np.broadcast_to(g / vals[0].size, vals[0].shape))
        elif op == "dot":
            self._accumulate(args[0], g * vals[1])
            self._accumulate(args[1], g * vals[0])
        elif op == "concat":
            offset = 0
            for a, v in zip(args, vals):
                self._accumulate(a, g[offset:offset + v.size])
                offset += v.size
        elif op == "reshape":
            self._accumulate(args[0], g.reshape(vals[0].shape))
        elif op == "xent":
            probs = self._cache[idx]
            self._accumulate(args[0], _xent_bwd(probs, aux, float(g)))
        elif op == "coxnll":
            self._accumulate(args[0], float(g) * self._cache[idx])
        else:
            raise AssertionError(f"unknown op {op!r} at node {idx}")


# ---- op constructors ----------------------------------------------------------


def _lift(tape: Tape, value, shape) -> Var:
    if isinstance(value, Var):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape == () and shape != ():
        arr = np.full(shape, float(arr))
    return tape.constant(arr)


def _same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("vars belong to different tapes")
    return tape


def _check(cond: bool, node_hint: str, msg: str):
    if not cond:
        raise ValueError(f"{node_hint}: {msg}")


def add(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _check(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return tape._append("add", (a.idx, b.idx), a.shape)


def sub(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _check(a.shape == b.shape, "sub", f"shape mismatch {a.shape} vs {b.shape}")
    return tape._append("sub", (a.idx, b.idx), a.shape)


def mul(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _check(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    return tape._append("mul", (a.idx, b.idx), a.shape)


def scale(a: Var, c: float) -> Var:
    return a.tape._append("scale", (a.idx,), a.shape, aux=float(c))


def matvec(w: Var, x: Var) -> Var:
    """w @ x for a (m, n) matrix and an (n,) vector."""
    tape = _same_tape(w, x)
    _check(len(w.shape) == 2 and len(x.shape) == 1, "matvec", "needs (m,n) @ (n,)")
    _check(w.shape[1] == x.shape[0], "matvec",
           f"inner dims differ: {w.shape} @ {x.shape}")
    return tape._append("matvec", (w.idx, x.idx), (w.shape[0],))


def affine(x: Var, w: Var, b: Var) -> Var:
    """Row-wise x @ w.T + b for x of shape (batch, n) or (n,)."""
    tape = _same_tape(x, w, b)
    _check(len(w.shape) == 2 and len(b.shape) == 1, "affine", "needs 2-d w, 1-d b")
    _check(w.shape[0] == b.shape[0], "affine",
           f"bias length {b.shape} does not match rows of {w.shape}")
    if len(x.shape) == 1:
        _check(x.shape[0] == w.shape[1], "affine",
               f"inner dims differ: {x.shape} vs {w.shape}")
        out_shape = (w.shape[0],)
    else:
        _check(len(x.shape) == 2 and x.shape[1] == w.shape[1], "affine",
               f"inner dims differ: {x.shape} vs {w.shape}")
        out_shape = (x.shape[0], w.shape[0])
    return tape._append("affine", (x.idx, w.idx, b.idx), out_shape)


def relu(a: Var) -> Var:
    return a.tape._append("relu", (a.idx,), a.shape)


def softplus(a: Var) -> Var:
    return a.tape._append("softplus", (a.idx,), a.shape)


def square(a: Var) -> Var:
    return a.tape._append("square", (a.idx,), a.shape)


def log(a: Var) -> Var:
    return a.tape._append("log", (a.idx,), a.shape)


def exp(a: Var) -> Var:
    return a.tape._append("exp", (a.idx,), a.shape)


def asum(a: Var) -> Var:
    """Sum of all entries, as a scalar node."""
    return a.tape._append("sum", (a.idx,), ())


def mean(a: Var) -> Var:
    return a.tape._append("mean", (a.idx,), ())


def dot(a: Var, b: Var) -> Var:
    tape = _same_tape(a, b)
    _check(a.shape == b.shape and len(a.shape) == 1, "dot",
           f"needs equal-length vectors, got {a.shape} and {b.shape}")
    return tape._append("dot", (a.idx, b.idx), ())


def concat(vars_: list[Var]) -> Var:
    tape = _same_tape(*vars_)
    for v in vars_:
        _check(len(v.shape) == 1, "concat", f"needs 1-d parts, got {v.shape}")
    n = sum(v.shape[0] for v in vars_)
    return tape._append("concat", tuple(v.idx for v in vars_), (n,))


def flatten(a: Var) -> Var:
    n = int(np.prod(a.shape)) if a.shape else 1
    return a.tape._append("reshape", (a.idx,), (n,), aux=(n,))


def sumsq(a: Var) -> Var:
    """Sum of squared entries; the workhorse of the quadratic penalties."""
    return asum(square(a))


def xent_logits(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy of integer labels against (batch, classes) logits."""
    labels = np.asarray(labels, dtype=np.int64)
    _check(len(logits.shape) == 2, "xent", f"needs (batch, classes) logits, got {logits.shape}")
    _check(labels.shape == (logits.shape[0],), "xent",
           f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    _check(labels.min() >= 0 and labels.max() < logits.shape[1], "xent",
           "label out of class range")
    return logits.tape._append("xent", (logits.idx,), (), aux=labels)


def cox_partial_nll(log_hazard: Var, times, events) -> Var:
    """Breslow negative partial log-likelihood (mean per event) as a scalar node.

    Ties in survival time share a risk set (Breslow approximation). Requires
    at least one event and strictly positive times.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    _check(len(log_hazard.shape) == 1, "coxnll",
           f"needs 1-d log-hazards, got {log_hazard.shape}")
    _check(times.shape == log_hazard.shape and events.shape == log_hazard.shape,
           "coxnll", "times/events must match log-hazard length")
    _check(bool(np.all(times > 0.0)), "coxnll", "survival times must be positive")
    _check(int(events.sum()) >= 1, "coxnll",
           "partial likelihood undefined with zero events")
    order = np.argsort(-times, kind="stable")
    ts = times[order]
    group_start = np.empty(ts.shape[0], dtype=np.bool_)
    group_start[0] = True
    group_start[1:] = ts[1:] != ts[:-1]
    aux = (order, events[order], group_start)
    return log_hazard.tape._append("coxnll", (log_hazard.idx,), (), aux=aux)


# ---- gradient checking ----------------------------------------------------------


def finite_diff_gradient(tape: Tape, inputs, h: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of the tape root, coordinate by coordinate.

    Only uses forward evaluation, so it is independent of the backward pass
    it is used to check.
    """
    inputs = [np.asarray(x, dtype=np.float64).copy() for x in inputs]
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat = x.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = tape.forward(*inputs)
            flat[i] = orig - h
            fm = tape.forward(*inputs)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite value at input {k}, coordinate {i}"
                )
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradient(tape: Tape, inputs, h: float = 1e-4) -> float:
    """Max relative error between backward and central finite differences.

    The error at each coordinate is |ad - fd| / max(1, |ad|, |fd|), so tiny
    gradients are compared absolutely rather than blowing up the ratio.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape.forward(*inputs)
    analytic = tape.backward()
    numeric = finite_diff_gradient(tape, inputs, h=h)
    worst = 0.0
    for ad, fd in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(ad), np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(ad - fd) / denom)))
    return worst
