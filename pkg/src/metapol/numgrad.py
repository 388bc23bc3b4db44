"""Dense float64 tensors with reverse-mode automatic differentiation.

A forward pass builds a define-by-run tape of primitive operations on a
Graph. backward() walks the tape once in reverse and accumulates adjoints
into the named parameter leaves. Everything is numpy float64; there is no
broadcasting, no views, no in-place mutation of recorded values.

The op set is deliberately small: it is exactly what the state/action
encoders, the bilinear Q head, the baseline MLP and the TD loss need.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np


class GradError(Exception):
    """Shape mismatch, non-finite values, or misuse of the tape."""


def _finite(arr: np.ndarray) -> bool:
    # sum() is a single C reduction; any inf or nan poisons it (inf-inf
    # gives nan), so this detects non-finite content without the python
    # dispatch overhead of isfinite().all() on every small tensor
    return math.isfinite(float(np.sum(arr)))


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not _finite(arr):
        raise GradError("non-finite value entering the graph")
    return arr


class Graph:
    """Operation tape for one forward pass plus gradient accumulators."""

    __slots__ = ("_tape", "_params")

    def __init__(self) -> None:
        self._tape: list[Var] = []
        self._params: dict[str, Var] = {}

    def bind(self, store: "ParamStore") -> dict[str, "Var"]:
        """Wrap every parameter tensor as a leaf of this graph."""
        leaves = {}
        for name in store.names():
            v = Var(store[name], graph=self, param_name=name)
            self._tape.append(v)
            self._params[name] = v
            leaves[name] = v
        return leaves

    def backward(self, loss: "Var") -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns one gradient array per bound parameter, zeros for
        parameters the loss does not depend on. Each tape node is
        visited exactly once.
        """
        if loss.graph is not self:
            raise GradError("loss does not belong to this graph")
        if loss.data.ndim != 0:
            raise GradError("backward() needs a scalar loss")
        for v in self._tape:
            v.grad = None
        loss.grad = np.ones(())
        for v in reversed(self._tape):
            if v.grad is None or v._vjp is None:
                continue
            v._vjp(v.grad)
        out = {}
        for name, leaf in self._params.items():
            out[name] = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        return out


class Var:
    """One tape node: a float64 array plus its adjoint slot."""

    __slots__ = ("data", "grad", "graph", "param_name", "_vjp")

    def __init__(self, data, graph: Graph | None = None, param_name: str | None = None,
                 vjp: Callable[[np.ndarray], None] | None = None, checked: bool = False):
        self.data = data if checked else _as_f64(data)
        self.grad: np.ndarray | None = None
        self.graph = graph
        self.param_name = param_name
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, param={self.param_name})"


def const(data) -> Var:
    """A constant: participates in forward math, never receives gradient."""
    return Var(data)


def _accum(v: Var, g: np.ndarray) -> None:
    # vjps never mutate adjoint arrays, so storing by reference is safe
    if v.grad is None:
        v.grad = g
    else:
        v.grad = v.grad + g


def _graph_of(*vs: Var) -> Graph | None:
    g = None
    for v in vs:
        if v.graph is not None:
            if g is None:
                g = v.graph
            elif g is not v.graph:
                raise GradError("operands come from different graphs")
    return g


def _make(data: np.ndarray, graph: Graph | None, vjp) -> Var:
    if not _finite(data):
        raise GradError("non-finite result")
    out = Var(data, graph=graph, vjp=vjp if graph is not None else None, checked=True)
    if graph is not None:
        graph._tape.append(out)
    return out


def add(a: Var, b: Var) -> Var:
    if a.data.shape != b.data.shape:
        raise GradError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    g = _graph_of(a, b)
    data = a.data + b.data

    def vjp(grad):
        if a.graph is not None:
            _accum(a, grad)
        if b.graph is not None:
            _accum(b, grad)

    return _make(data, g, vjp)


def matmul(a: Var, b: Var) -> Var:
    """matrix @ matrix, matrix @ vector, or vector . vector."""
    if a.data.ndim == 1 and b.data.ndim == 1:
        if a.data.shape != b.data.shape:
            raise GradError("dot shape mismatch")
    elif a.data.shape[-1] != b.data.shape[0]:
        raise GradError(f"matmul shape mismatch {a.data.shape} x {b.data.shape}")
    g = _graph_of(a, b)
    data = a.data @ b.data

    def vjp(grad):
        if a.data.ndim == 2 and b.data.ndim == 1:
            if a.graph is not None:
                _accum(a, np.outer(grad, b.data))
            if b.graph is not None:
                _accum(b, a.data.T @ grad)
        elif a.data.ndim == 1 and b.data.ndim == 1:
            if a.graph is not None:
                _accum(a, grad * b.data)
            if b.graph is not None:
                _accum(b, grad * a.data)
        else:
            if a.graph is not None:
                _accum(a, grad @ b.data.T)
            if b.graph is not None:
                _accum(b, a.data.T @ grad)

    return _make(data, g, vjp)


def relu(x: Var) -> Var:
    g = _graph_of(x)
    data = np.maximum(x.data, 0.0)

    def vjp(grad):
        if x.graph is not None:
            _accum(x, grad * (x.data > 0.0))

    return _make(data, g, vjp)


def concat(parts: Sequence[Var]) -> Var:
    """Concatenate 1-D vectors."""
    if not parts:
        raise GradError("concat of nothing")
    for p in parts:
        if p.data.ndim != 1:
            raise GradError("concat expects 1-D parts")
    g = _graph_of(*parts)
    data = np.concatenate([p.data for p in parts])
    sizes = [p.data.shape[0] for p in parts]

    def vjp(grad):
        ofs = 0
        for p, n in zip(parts, sizes):
            if p.graph is not None:
                _accum(p, grad[ofs:ofs + n])
            ofs += n

    return _make(data, g, vjp)


def embed_lookup(table: Var, index: int) -> Var:
    """Select one row of an embedding table."""
    if table.data.ndim != 2:
        raise GradError("embed_lookup expects a 2-D table")
    n = table.data.shape[0]
    if not 0 <= index < n:
        raise GradError(f"row {index} out of range for table with {n} rows")
    g = _graph_of(table)
    data = table.data[index].copy()

    def vjp(grad):
        if table.graph is not None:
            full = np.zeros_like(table.data)
            full[index] = grad
            _accum(table, full)

    return _make(data, g, vjp)


def mean_rows(rows: Sequence[Var]) -> Var:
    """Mean of equal-length 1-D vectors."""
    if not rows:
        raise GradError("mean of nothing")
    shape = rows[0].data.shape
    for r in rows:
        if r.data.shape != shape or r.data.ndim != 1:
            raise GradError("mean_rows expects equal-shape vectors")
    g = _graph_of(*rows)
    data = rows[0].data.copy()
    for r in rows[1:]:
        data += r.data
    data /= len(rows)
    inv = 1.0 / len(rows)

    def vjp(grad):
        scaled = grad * inv
        for r in rows:
            if r.graph is not None:
                _accum(r, scaled)

    return _make(data, g, vjp)


def stack_rows(rows: Sequence[Var]) -> Var:
    """Stack 1-D vectors into a matrix, one row each."""
    if not rows:
        raise GradError("stack of nothing")
    g = _graph_of(*rows)
    data = np.stack([r.data for r in rows])

    def vjp(grad):
        for i, r in enumerate(rows):
            if r.graph is not None:
                _accum(r, grad[i])

    return _make(data, g, vjp)


def hadamard(a: Var, b: Var) -> Var:
    if a.data.shape != b.data.shape:
        raise GradError("hadamard shape mismatch")
    g = _graph_of(a, b)
    data = a.data * b.data

    def vjp(grad):
        if a.graph is not None:
            _accum(a, grad * b.data)
        if b.graph is not None:
            _accum(b, grad * a.data)

    return _make(data, g, vjp)


def scalar_scale(x: Var, c: float) -> Var:
    g = _graph_of(x)
    data = x.data * c

    def vjp(grad):
        if x.graph is not None:
            _accum(x, grad * c)

    return _make(data, g, vjp)


def pick(x: Var, index: int) -> Var:
    """Select one component of a vector as a scalar."""
    if x.data.ndim != 1:
        raise GradError("pick expects a vector")
    if not 0 <= index < x.data.shape[0]:
        raise GradError("pick index out of range")
    g = _graph_of(x)
    data = np.asarray(x.data[index])

    def vjp(grad):
        if x.graph is not None:
            full = np.zeros_like(x.data)
            full[index] = grad
            _accum(x, full)

    return _make(data, g, vjp)


def pack(scalars: Sequence[Var]) -> Var:
    """Collect scalar values into a 1-D vector."""
    if not scalars:
        raise GradError("pack of nothing")
    for s in scalars:
        if s.data.ndim != 0:
            raise GradError("pack expects scalars")
    g = _graph_of(*scalars)
    data = np.array([float(s.data) for s in scalars])

    def vjp(grad):
        for i, s in enumerate(scalars):
            if s.graph is not None:
                _accum(s, np.asarray(grad[i]))

    return _make(data, g, vjp)


def mse(pred: Var, target: np.ndarray) -> Var:
    """Mean squared error against a constant target vector."""
    tgt = _as_f64(target)
    if pred.data.shape != tgt.shape or pred.data.ndim != 1:
        raise GradError("mse expects matching 1-D shapes")
    g = _graph_of(pred)
    diff = pred.data - tgt
    data = np.asarray(np.mean(diff * diff))
    n = tgt.shape[0]

    def vjp(grad):
        if pred.graph is not None:
            _accum(pred, grad * (2.0 / n) * diff)

    return _make(data, g, vjp)


_STORE_IDS = itertools.count()


class ParamStore:
    """Named float64 tensors with a stable iteration order.

    The version counter increments on every mutation so that callers
    caching derived quantities (action matrices, encoded templates) can
    tell when they are stale. (uid, version) identifies a snapshot
    globally; version alone only orders mutations of one store.
    """

    def __init__(self) -> None:
        self._arrays: dict[str, np.ndarray] = {}
        self.version: int = 0
        self.uid: int = next(_STORE_IDS)

    @property
    def stamp(self) -> tuple[int, int]:
        return (self.uid, self.version)

    def add(self, name: str, array) -> None:
        if name in self._arrays:
            raise GradError(f"duplicate parameter {name!r}")
        self._arrays[name] = _as_f64(array).copy()
        self.version += 1

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def set_(self, name: str, array) -> None:
        if name not in self._arrays:
            raise GradError(f"unknown parameter {name!r}")
        self._arrays[name] = _as_f64(array).copy()
        self.version += 1

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._arrays.items())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self._arrays.items():
            out._arrays[name] = arr.copy()
        out.version += 1
        return out

    def load(self, other: "ParamStore") -> None:
        """Overwrite every tensor in place from another store (target sync)."""
        if self.names() != other.names():
            raise GradError("stores hold different parameter sets")
        for name in self._arrays:
            if self._arrays[name].shape != other._arrays[name].shape:
                raise GradError(f"shape changed for {name!r}")
            self._arrays[name] = other._arrays[name].copy()
        self.version += 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._arrays.items()}

    def save(self, path) -> None:
        np.savez(path, **self._arrays)

    @staticmethod
    def load_file(path) -> "ParamStore":
        out = ParamStore()
        with np.load(path) as data:
            for name in data.files:
                out._arrays[name] = np.asarray(data[name], dtype=np.float64)
        out.version += 1
        return out


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float,
             clip_norm: float = 0.0, in_place: bool = True) -> ParamStore:
    """One stochastic-gradient step; optionally returns an updated copy.

    clip_norm > 0 rescales the whole gradient to that global L2 norm when
    it is larger.
    """
    scale = 1.0
    if clip_norm > 0.0:
        norm = grad_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / norm
    target = params if in_place else params.copy()
    for name, g in grads.items():
        arr = target._arrays[name]
        if arr.shape != g.shape:
            raise GradError(f"gradient shape mismatch for {name!r}")
        target._arrays[name] = arr - lr * scale * g
    target.version += 1
    return target


def finite_diff_check(f: Callable[[ParamStore, Graph | None], Var], params: ParamStore,
                      eps: float = 1e-5, rng: np.random.Generator | None = None,
                      coords_per_tensor: int = 2) -> float:
    """Max relative error between backward() and central differences.

    f(store, graph) must rebuild the full forward pass and return the
    scalar loss Var; with graph=None it runs detached. A random subset of
    coordinates per tensor is probed. Relative error uses the larger of
    the two derivatives with a 0.1 floor so near-zero pairs compare on an
    absolute scale.
    """
    rng = rng or np.random.default_rng(0)
    g = Graph()
    loss = f(params, g)
    grads = g.backward(loss)
    worst = 0.0
    for name in params.names():
        arr = params[name]
        count = min(coords_per_tensor, arr.size)
        flat_idx = rng.choice(arr.size, size=count, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            keep = arr[idx]
            arr[idx] = keep + eps
            params.version += 1
            hi = f(params, None).item()
            arr[idx] = keep - eps
            params.version += 1
            lo = f(params, None).item()
            arr[idx] = keep
            params.version += 1
            numeric = (hi - lo) / (2.0 * eps)
            analytic = grads[name][idx]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 0.1)
            worst = max(worst, err)
    return worst
