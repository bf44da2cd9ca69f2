"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (VAE, velocity field, cost gradients) runs on this
substrate. Tensors are plain numpy arrays wrapped with shape/finiteness
validation; a Tape records the forward graph and plays it backwards once.
64-bit floats throughout: the instability probes use delta=1e-6 finite
differences, which 32-bit cannot resolve.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN/inf; never propagated silently."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape or a non-scalar root."""


class CheckpointError(RuntimeError):
    """Unreadable or version-mismatched checkpoint document."""


def _as_f64(values) -> np.ndarray:
    # note: not ascontiguousarray, which silently promotes 0-d to (1,)
    return np.asarray(values, dtype=np.float64, order="C")


@dataclass(frozen=True)
class Tensor:
    """Immutable dense tensor: row-major float64 data plus shape."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_f64(self.data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def tolist(self):
        return self.data.tolist()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    return value


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    # maps upstream gradient -> per-parent gradient contributions
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    is_leaf: bool = False


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return shape == ()


class Tape:
    """Single-use forward graph. Node ids are ints; inputs of a node always
    reference strictly earlier nodes, so one reverse sweep suffices.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    # -- graph construction ------------------------------------------------

    def leaf(self, values) -> int:
        """Register a differentiable input (parameter or probed variable)."""
        value = _check_finite("leaf", _as_f64(values))
        return self._push(_Node("leaf", (), value, None, is_leaf=True))

    def constant(self, values) -> int:
        """Register a non-differentiated input (data, masks, stencils)."""
        value = _check_finite("constant", _as_f64(values))
        return self._push(_Node("constant", (), value, None))

    def value(self, node: int) -> np.ndarray:
        return self._nodes[node].value

    def tensor(self, node: int) -> Tensor:
        return Tensor(self._nodes[node].value)

    def _push(self, node: _Node) -> int:
        for p in node.parents:
            if not 0 <= p < len(self._nodes):
                raise TapeError(f"op '{node.op}' references unknown node {p}")
        self._nodes.append(node)
        return len(self._nodes) - 1

    def _binary_shapes(self, op: str, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        va, vb = self._nodes[a].value, self._nodes[b].value
        if va.shape != vb.shape and not (_is_scalar_shape(va.shape) or _is_scalar_shape(vb.shape)):
            raise ShapeError(f"op '{op}': shapes {va.shape} and {vb.shape} differ and neither is scalar")
        return va, vb

    @staticmethod
    def _reduce_to(shape: tuple[int, ...], grad: np.ndarray) -> np.ndarray:
        # only scalar-with-tensor broadcasting exists, so either shapes match
        # or the target is a scalar
        if grad.shape == shape:
            return grad
        return np.asarray(grad.sum(), dtype=np.float64)

    # -- forward ops ---------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        va, vb = self._binary_shapes("add", a, b)
        out = _check_finite("add", va + vb)
        vjp = lambda g: (self._reduce_to(va.shape, g), self._reduce_to(vb.shape, g))
        return self._push(_Node("add", (a, b), out, vjp))

    def sub(self, a: int, b: int) -> int:
        va, vb = self._binary_shapes("sub", a, b)
        out = _check_finite("sub", va - vb)
        vjp = lambda g: (self._reduce_to(va.shape, g), self._reduce_to(vb.shape, -g))
        return self._push(_Node("sub", (a, b), out, vjp))

    def elem_mul(self, a: int, b: int) -> int:
        va, vb = self._binary_shapes("elem_mul", a, b)
        out = _check_finite("elem_mul", va * vb)
        vjp = lambda g: (self._reduce_to(va.shape, g * vb), self._reduce_to(vb.shape, g * va))
        return self._push(_Node("elem_mul", (a, b), out, vjp))

    def scalar_mul(self, a: int, c: float) -> int:
        c = float(c)
        if not math.isfinite(c):
            raise NonFiniteError("scalar_mul with non-finite scalar")
        va = self._nodes[a].value
        out = _check_finite("scalar_mul", va * c)
        return self._push(_Node("scalar_mul", (a,), out, lambda g: (g * c,)))

    def matmul(self, a: int, b: int) -> int:
        va, vb = self._nodes[a].value, self._nodes[b].value
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul needs (m,k)@(k,n) 2-D operands, got {va.shape} @ {vb.shape}")
        out = _check_finite("matmul", va @ vb)
        vjp = lambda g: (g @ vb.T, va.T @ g)
        return self._push(_Node("matmul", (a, b), out, vjp))

    def relu(self, a: int) -> int:
        va = self._nodes[a].value
        out = np.maximum(va, 0.0)
        # gradient at exactly 0 is defined as 0 (tie-break)
        mask = (va > 0.0).astype(np.float64)
        return self._push(_Node("relu", (a,), out, lambda g: (g * mask,)))

    def sin(self, a: int) -> int:
        va = self._nodes[a].value
        out = _check_finite("sin", np.sin(va))
        return self._push(_Node("sin", (a,), out, lambda g: (g * np.cos(va),)))

    def cos(self, a: int) -> int:
        va = self._nodes[a].value
        out = _check_finite("cos", np.cos(va))
        return self._push(_Node("cos", (a,), out, lambda g: (-g * np.sin(va),)))

    def tanh(self, a: int) -> int:
        va = self._nodes[a].value
        out = _check_finite("tanh", np.tanh(va))
        return self._push(_Node("tanh", (a,), out, lambda g: (g * (1.0 - out * out),)))

    def exp(self, a: int) -> int:
        va = self._nodes[a].value
        out = _check_finite("exp", np.exp(va))
        return self._push(_Node("exp", (a,), out, lambda g: (g * out,)))

    def sqrt(self, a: int) -> int:
        va = self._nodes[a].value
        if np.any(va <= 0.0):
            raise NonFiniteError("sqrt of non-positive value (gradient undefined)")
        out = _check_finite("sqrt", np.sqrt(va))
        return self._push(_Node("sqrt", (a,), out, lambda g: (g * (0.5 / out),)))

    def square(self, a: int) -> int:
        va = self._nodes[a].value
        out = _check_finite("square", va * va)
        return self._push(_Node("square", (a,), out, lambda g: (g * 2.0 * va,)))

    def sum(self, a: int) -> int:
        va = self._nodes[a].value
        out = _check_finite("sum", np.asarray(va.sum(), dtype=np.float64))
        return self._push(_Node("sum", (a,), out, lambda g: (np.full(va.shape, float(g)),)))

    def mean(self, a: int) -> int:
        va = self._nodes[a].value
        n = va.size
        if n == 0:
            raise ShapeError("mean of an empty tensor")
        out = _check_finite("mean", np.asarray(va.mean(), dtype=np.float64))
        return self._push(_Node("mean", (a,), out, lambda g: (np.full(va.shape, float(g) / n),)))

    def concat(self, parts: Sequence[int], axis: int = 0) -> int:
        if not parts:
            raise ShapeError("concat of zero parts")
        values = [self._nodes[p].value for p in parts]
        ndim = values[0].ndim
        if any(v.ndim != ndim for v in values):
            raise ShapeError("concat operands must share rank")
        out = _check_finite("concat", np.concatenate(values, axis=axis))
        sizes = [v.shape[axis] for v in values]
        offsets = np.cumsum([0] + sizes)

        def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
            pieces = []
            for i in range(len(values)):
                sl = [slice(None)] * ndim
                sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                pieces.append(g[tuple(sl)])
            return tuple(pieces)

        return self._push(_Node("concat", tuple(parts), out, vjp))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        va = self._nodes[a].value
        if int(np.prod(shape)) != va.size:
            raise ShapeError(f"reshape {va.shape} -> {shape} changes element count")
        out = np.ascontiguousarray(va.reshape(shape))
        return self._push(_Node("reshape", (a,), out, lambda g: (g.reshape(va.shape),)))

    def slice(self, a: int, axis: int, start: int, stop: int) -> int:
        va = self._nodes[a].value
        if not (0 <= axis < va.ndim):
            raise ShapeError(f"slice axis {axis} out of range for shape {va.shape}")
        if not (0 <= start <= stop <= va.shape[axis]):
            raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {va.shape}")
        sl = [slice(None)] * va.ndim
        sl[axis] = slice(start, stop)
        out = np.ascontiguousarray(va[tuple(sl)])

        def vjp(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros_like(va)
            full[tuple(sl)] = g
            return (full,)

        return self._push(_Node("slice", (a,), out, vjp))

    # -- reverse sweep -------------------------------------------------------

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Gradient of the scalar at `root` w.r.t. every leaf.

        Leaves not reachable from the root get zero gradients. The tape is
        consumed afterwards: one backward pass per forward build.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        root_val = self._nodes[root].value
        if not _is_scalar_shape(root_val.shape):
            raise TapeError(f"backward root must be scalar, got shape {root_val.shape}")
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[root] = np.asarray(1.0, dtype=np.float64)
        for nid in range(root, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            for parent, contrib in zip(node.parents, node.vjp(g)):
                if grads[parent] is None:
                    grads[parent] = np.array(contrib, dtype=np.float64)
                else:
                    grads[parent] = grads[parent] + contrib

        out: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self._nodes):
            if node.is_leaf:
                g = grads[nid]
                if g is None:
                    g = np.zeros_like(node.value)
                out[nid] = _check_finite("backward", np.asarray(g, dtype=np.float64))
        return out


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """Standard Adam moments, one pair per named parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter dict."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out: dict[str, np.ndarray] = {}
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        out[name] = _check_finite("adam_step", p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# -- checkpoint format ----------------------------------------------------------


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned JSON checkpoint: name -> {shape, flat f64 data}. Floats are
    serialized via repr and round-trip exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(arr.shape), "data": _as_f64(arr).reshape(-1).tolist()}
            for name, arr in tensors.items()
        },
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path!r}: {exc}") from exc
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path!r} has format_version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    tensors = {}
    for name, entry in doc["tensors"].items():
        arr = _as_f64(entry["data"]).reshape(entry["shape"])
        tensors[name] = _check_finite("load_checkpoint", arr)
    return tensors, doc.get("meta", {})
