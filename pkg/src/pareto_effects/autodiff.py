"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every operation creates a :class:`Var` and, when any input is tracked, appends
it to the tape of that input.  ``Tape.backward`` walks the recorded nodes in
reverse creation order, so a single forward pass can be differentiated from
several roots (one per task loss).

Only the handful of operations needed by small dense networks and their losses
are provided.  All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericalOverflowError(FloatingPointError):
    """A forward value or gradient stopped being finite."""

    def __init__(self, layer: str | None, op: str):
        self.layer = layer
        self.op = op
        super().__init__(f"non-finite value in op {op!r} (layer {layer or '<unnamed>'})")


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def watch(self, store: "ParamStore") -> dict[str, "Var"]:
        """Register every parameter block of ``store`` as a differentiable leaf."""
        return {name: Var(store.view(name), tape=self, param=name, tag=name)
                for name, _, _ in store.layout}

    def backward(self, root: "Var", store: "ParamStore") -> np.ndarray:
        """Gradient of the scalar ``root`` w.r.t. the flat values of ``store``."""
        if root.value.size != 1:
            raise ValueError("backward() needs a scalar root")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        flat = np.zeros(store.size)
        limit = root._index if root._index is not None else -1
        for node in reversed(self.nodes[: limit + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not _finite(g):
                raise NumericalOverflowError(node.tag, node.op + " (backward)")
            if node.param is not None:
                flat[store.slice(node.param)] += g.reshape(-1)
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent.tape is None or pg is None:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return flat


class Var:
    __slots__ = ("value", "parents", "backward_fn", "tape", "op", "tag", "param", "_index")
    # make ndarray <op> Var defer to the reflected Var operator
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, tape=None, op="leaf",
                 tag=None, param=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.op = op
        self.tag = tag
        self.param = param
        self._index = None
        if tape is not None:
            self._index = len(tape.nodes)
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _finite(a: np.ndarray) -> bool:
    # a sum is non-finite iff some entry is (or the entries are astronomically large)
    with np.errstate(over="ignore", invalid="ignore"):
        return math.isfinite(float(np.sum(a)))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(value, parents: Sequence[Var], backward_fn, op: str, tag: str | None = None) -> Var:
    tape = next((p.tape for p in parents if p.tape is not None), None)
    if tag is None:
        tag = next((p.tag for p in parents if p.tag is not None), None)
    if not _finite(value):
        raise NumericalOverflowError(tag, op)
    if tape is None:
        return Var(value, op=op, tag=tag)
    return Var(value, parents=tuple(parents), backward_fn=backward_fn, tape=tape, op=op, tag=tag)


def _run(fn, *args):
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return fn(*args)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = _run(np.divide, av, bv)
    return _make(out, (a, b), lambda g: (g / bv, -g * av / (bv * bv)), "div")


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def exp(a) -> Var:
    a = as_var(a)
    out = _run(np.exp, a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    out = _run(np.log, av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def sin(a) -> Var:
    a = as_var(a)
    av = a.value
    return _make(np.sin(av), (a,), lambda g: (g * np.cos(av),), "sin")


def cos(a) -> Var:
    a = as_var(a)
    av = a.value
    return _make(np.cos(av), (a,), lambda g: (-g * np.sin(av),), "cos")


def sqrt(a) -> Var:
    a = as_var(a)
    out = _run(np.sqrt, a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Var:
    a = as_var(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_var(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- activations -----------------------------------------------------------------

def relu(a) -> Var:
    a = as_var(a)
    av = a.value
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),), "relu")


def elu(a) -> Var:
    a = as_var(a)
    av = a.value
    neg = _run(np.expm1, np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg)
    return _make(out, (a,), lambda g: (g * np.where(av > 0, 1.0, neg + 1.0),), "elu")


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def identity(a) -> Var:
    return as_var(a)


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "identity": identity,
    "relu": relu,
    "elu": elu,
    "tanh": tanh,
}


# -- reductions and structure --------------------------------------------------

def mean(a) -> Var:
    a = as_var(a)
    shape, n = a.value.shape, a.value.size
    return _make(np.mean(a.value), (a,), lambda g: (np.full(shape, g / n),), "mean")


def total(a) -> Var:
    a = as_var(a)
    shape = a.value.shape
    return _make(np.sum(a.value), (a,), lambda g: (np.full(shape, g),), "sum")


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, parts, back, "concat")


def column(a, j: int) -> Var:
    """Column ``j`` of a 2-D value, kept as an (n, 1) block."""
    a = as_var(a)
    shape = a.value.shape

    def back(g):
        full = np.zeros(shape)
        full[:, j:j + 1] = g
        return (full,)

    return _make(a.value[:, j:j + 1], (a,), back, "column")


def affine(x, W, b, name: str | None = None) -> Var:
    """``x @ W + b`` for an (n, in) batch."""
    x, W, b = as_var(x), as_var(W), as_var(b)
    xv, Wv = x.value, W.value
    out = _run(lambda: xv @ Wv + b.value)

    def back(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return _make(out, (x, W, b), back, "affine", tag=name)


# -- parameters ------------------------------------------------------------------

@dataclass
class ParamStore:
    """Flat float64 parameter vector with named, contiguous blocks."""

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...], int]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self._index = {name: (tuple(shape), off) for name, shape, off in self.layout}
        self._slices = {name: slice(off, off + int(np.prod(shape, dtype=int)))
                        for name, shape, off in self.layout}
        if len(self._index) != len(self.layout):
            raise ValueError("duplicate parameter names in layout")
        expected = 0
        for name, shape, off in self.layout:
            if off != expected:
                raise ValueError(f"layout gap or overlap at {name!r}")
            expected += int(np.prod(shape, dtype=int))
        if expected != self.values.size:
            raise ValueError(f"layout covers {expected} values, vector has {self.values.size}")

    @classmethod
    def from_blocks(cls, blocks: Iterable[tuple[str, np.ndarray]]) -> "ParamStore":
        layout, chunks, off = [], [], 0
        for name, arr in blocks:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append((name, tuple(arr.shape), off))
            chunks.append(arr.reshape(-1))
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def slice(self, name: str) -> slice:
        return self._slices[name]

    def view(self, name: str) -> np.ndarray:
        shape, _ = self._index[name]
        return self.values[self.slice(name)].reshape(shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self.view(name) for name in self.names}

    def mask(self, prefixes: Sequence[str]) -> np.ndarray:
        """Boolean mask over ``values`` selecting blocks whose name starts with a prefix."""
        m = np.zeros(self.size, dtype=bool)
        for name in self.names:
            if any(name.startswith(p) for p in prefixes):
                m[self.slice(name)] = True
        return m

    def copy(self) -> "ParamStore":
        return ParamStore(self.values.copy(), list(self.layout))

    def with_values(self, values: np.ndarray) -> "ParamStore":
        return ParamStore(np.array(values, dtype=np.float64), list(self.layout))

    def checksum(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    # serialization: JSON, or a binary file of <magic><u32 header length><JSON header><float64 LE values>

    def header(self) -> dict:
        return {"layout": [[n, list(s), o] for n, s, o in self.layout], "size": self.size}

    def to_json(self) -> dict:
        return {**self.header(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "ParamStore":
        layout = [(n, tuple(s), int(o)) for n, s, o in doc["layout"]]
        return cls(np.asarray(doc["values"], dtype=np.float64), layout)

    def save_binary(self, path) -> None:
        head = json.dumps(self.header()).encode()
        with open(path, "wb") as fh:
            fh.write(b"PSTORE1\0")
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load_binary(cls, path) -> "ParamStore":
        raw = Path(path).read_bytes()
        if raw[:8] != b"PSTORE1\0":
            raise ValueError(f"{path}: not a parameter snapshot")
        (n,) = struct.unpack("<I", raw[8:12])
        head = json.loads(raw[12:12 + n])
        values = np.frombuffer(raw[12 + n:], dtype="<f8").astype(np.float64)
        layout = [(name, tuple(s), int(o)) for name, s, o in head["layout"]]
        return cls(values, layout)


# -- dense networks --------------------------------------------------------------

@dataclass(frozen=True)
class DenseNet:
    """Fully connected chain; ``activation`` after hidden layers, ``out_activation`` at the end."""

    name: str
    widths: tuple[int, ...]
    activation: str = "elu"
    out_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"{self.name}: need at least two positive widths, got {self.widths}")
        for act in (self.activation, self.out_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_names(self) -> list[str]:
        out = []
        for k in range(self.n_layers):
            out += [f"{self.name}.W{k}", f"{self.name}.b{k}"]
        return out

    def init_blocks(self, rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
        blocks = []
        for k in range(self.n_layers):
            fan_in, fan_out = self.widths[k], self.widths[k + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            blocks.append((f"{self.name}.W{k}", rng.uniform(-lim, lim, size=(fan_in, fan_out))))
            blocks.append((f"{self.name}.b{k}", np.zeros(fan_out)))
        return blocks

    def describe(self) -> dict:
        return {"name": self.name, "widths": list(self.widths),
                "activation": self.activation, "out_activation": self.out_activation}


def forward(net: DenseNet, params, x) -> Var:
    """Evaluate ``net`` on a vector (in,) or a batch (n, in).

    ``params`` is a ParamStore (plain evaluation) or a name -> Var mapping from
    :meth:`Tape.watch` (recorded evaluation).  A vector input gives a vector output.
    """
    if isinstance(params, ParamStore):
        params = params.arrays()
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    single = xv.ndim == 1
    if xv.shape[-1] != net.widths[0]:
        raise ValueError(f"{net.name}: expected input width {net.widths[0]}, got {xv.shape[-1]}")
    h = as_var(xv[None, :]) if single and not isinstance(x, Var) else as_var(x)
    if single and isinstance(x, Var):
        h = _make(xv[None, :], (x,), lambda g: (g[0],), "expand")
    for k in range(net.n_layers):
        h = affine(h, params[f"{net.name}.W{k}"], params[f"{net.name}.b{k}"],
                   name=f"{net.name}.layer{k}")
        act = net.activation if k < net.n_layers - 1 else net.out_activation
        h = ACTIVATIONS[act](h)
    if single:
        h = _make(h.value[0], (h,), lambda g: (g[None, :],), "squeeze")
    return h


def value_and_grad(loss: Callable[[dict[str, Var]], Var], params: ParamStore) -> tuple[float, np.ndarray]:
    tape = Tape()
    leaves = tape.watch(params)
    out = loss(leaves)
    return out.item(), tape.backward(out, params)


def grad(loss: Callable[[dict[str, Var]], Var], params: ParamStore) -> np.ndarray:
    """d loss / d params.values for a loss written with the ops of this module."""
    return value_and_grad(loss, params)[1]
