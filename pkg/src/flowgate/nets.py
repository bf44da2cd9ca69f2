"""Small MLPs over the tape engine, plus a batch-size-invariant inference path.

Two forward implementations exist on purpose:

* `tape_forward` builds the graph on a Tape for training and for the
  guidance gradient.
* `infer` is a plain-numpy path used at sampling time. It routes matmuls
  through einsum, whose accumulation order does not depend on the batch
  size, so evaluating a batch of probe points is bit-identical to
  evaluating them one at a time.

Hidden activations are tanh; output layers are linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tape


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim, *self.hidden, self.out_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def init_params(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    """Xavier-style init: W ~ N(0, 1/fan_in), b = 0."""
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        params[f"{prefix}W{i}"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def leaves_for(tape: Tape, params: dict[str, np.ndarray]) -> dict[str, int]:
    """Register every parameter as a tape leaf; returns name -> node id."""
    return {name: tape.leaf(arr) for name, arr in sorted(params.items())}


def tape_forward(
    tape: Tape,
    nodes: dict[str, int],
    spec: MlpSpec,
    x: int,
    prefix: str = "",
) -> int:
    """MLP forward on the tape; `x` is a (B, in_dim) node.

    Bias rows are expanded to the batch via ones @ b, which keeps every op
    inside the no-broadcast contract of the tape.
    """
    batch = tape.value(x).shape[0]
    ones = tape.constant(np.ones((batch, 1)))
    h = x
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        w = nodes[f"{prefix}W{i}"]
        b = nodes[f"{prefix}b{i}"]
        b_row = tape.reshape(b, (1, spec.layer_dims[i][1]))
        h = tape.add(tape.matmul(h, w), tape.matmul(ones, b_row))
        if i < n_layers - 1:
            h = tape.tanh(h)
    return h


def infer(params: dict[str, np.ndarray], spec: MlpSpec, x: np.ndarray, prefix: str = "") -> np.ndarray:
    """Plain-numpy forward for (B, in_dim) input; batch-size invariant."""
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(f"infer expects (B, {spec.in_dim}) input, got {x.shape}")
    h = x
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = np.einsum("ij,jk->ik", h, params[f"{prefix}W{i}"]) + params[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = np.tanh(h)
    return h
