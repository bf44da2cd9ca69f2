"""Differentiable executability costs and the latent guidance gradient.

Four terms: ReLU-squared joint-limit barriers, ReLU-squared sphere
collision barriers, joint smoothness (velocity + weighted acceleration),
and CoM stability (same form on the CoM path). Sums run over frames, not
means, so the guidance scale is horizon-dependent; the schedule is exposed
in config for that reason.

Smoothness/stability derivatives are per-frame deltas (finite differences
on the frame index, no dt division). The derivative weights (beta_q = 50,
beta_c = 10), the +-0.2 gradient clamp, and the 500->10000 guidance scale
are jointly consistent only at that scale; dividing by a 0.04 s frame step
would inflate the acceleration term by ~4e5 and reduce the guidance
direction to smoothness noise. Hard limit screening and tracking metrics
keep physical rad/s units; this choice is local to the cost terms.

Costs are evaluated on (last history frame || decoded future) so the
finite-difference derivatives at the seam are defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .kinematics import ChainModel, JointTrajectory
from .nets import leaves_for
from .tensor import NonFiniteError, Tape
from .vae import VaeParams, decode_tape


@dataclass(frozen=True)
class CostWeights:
    lambda_lim: float = 1.0
    lambda_col: float = 0.01
    lambda_sm: float = 0.1
    lambda_stab: float = 1.0
    beta_q: float = 50.0
    beta_c: float = 10.0

    def __post_init__(self):
        if min(self.lambda_lim, self.lambda_col, self.lambda_sm, self.lambda_stab) < 0:
            raise ValueError("cost weights must be >= 0")
        if self.beta_q < 0 or self.beta_c < 0:
            raise ValueError("derivative weights must be >= 0")


@dataclass(frozen=True)
class GuidanceSchedule:
    """Time-dependent guidance scale, linear in integration time u, with a
    per-element clamp applied to the raw gradient before scaling."""

    alpha_start: float = 500.0
    alpha_end: float = 10000.0
    clamp: float = 0.2

    def __post_init__(self):
        if self.alpha_start > self.alpha_end:
            raise ValueError("alpha_start must be <= alpha_end")
        if self.clamp <= 0:
            raise ValueError("gradient clamp must be positive")

    def alpha(self, u: float) -> float:
        return self.alpha_start + (self.alpha_end - self.alpha_start) * u


# -- plain-number costs -----------------------------------------------------------


def c_lim(traj: JointTrajectory, model: ChainModel) -> float:
    """Sum of ReLU(q - q_max)^2 + ReLU(q_min - q)^2 over frames and joints."""
    q = traj.frames
    hi = np.maximum(q - np.asarray(model.joint_max), 0.0)
    lo = np.maximum(np.asarray(model.joint_min) - q, 0.0)
    return float(np.sum(hi * hi) + np.sum(lo * lo))


def c_col(traj: JointTrajectory, model: ChainModel) -> float:
    """Sum of ReLU((r_a + r_b + margin) - d_ab)^2 over frames and pairs."""
    total = 0.0
    for q in traj.frames:
        centers = kin.sphere_centers(model, q)
        for a, b in model.collision_pairs:
            onset = model.spheres[a].radius + model.spheres[b].radius + model.margin
            gap = onset - float(np.linalg.norm(centers[a] - centers[b]))
            if gap > 0.0:
                total += gap * gap
    return total


def c_sm(traj: JointTrajectory, beta_q: float = 50.0) -> float:
    """Joint smoothness: sum over frames of ||qdot||^2 + beta_q * ||qddot||^2,
    derivatives taken as per-frame deltas."""
    d1, d2 = kin.derivative_stencils(traj.n_frames, 1.0)
    qd, qdd = d1 @ traj.frames, d2 @ traj.frames
    return float(np.sum(qd * qd) + beta_q * np.sum(qdd * qdd))


def c_stab(traj: JointTrajectory, model: ChainModel, beta_c: float = 10.0) -> float:
    """CoM stability: same form on the per-frame-differenced CoM path."""
    coms = np.stack([kin.com(model, q) for q in traj.frames])
    d1, d2 = kin.derivative_stencils(traj.n_frames, 1.0)
    cd = d1 @ coms
    cdd = d2 @ coms
    return float(np.sum(cd * cd) + beta_c * np.sum(cdd * cdd))


def total_cost(
    traj: JointTrajectory, model: ChainModel, weights: CostWeights
) -> tuple[float, dict[str, float]]:
    """Weighted sum of the four terms plus the per-term breakdown."""
    breakdown = {
        "lim": c_lim(traj, model),
        "col": c_col(traj, model),
        "sm": c_sm(traj, weights.beta_q),
        "stab": c_stab(traj, model, weights.beta_c),
    }
    total = (
        weights.lambda_lim * breakdown["lim"]
        + weights.lambda_col * breakdown["col"]
        + weights.lambda_sm * breakdown["sm"]
        + weights.lambda_stab * breakdown["stab"]
    )
    return total, breakdown


# -- tape costs -------------------------------------------------------------------


def cost_tape(
    tape: Tape,
    q_node: int,
    model: ChainModel,
    weights: CostWeights,
) -> tuple[int, dict[str, int]]:
    """Total-cost scalar node for a (T, n) trajectory node; also returns the
    per-term scalar nodes so a non-finite failure names its term."""
    t_frames = tape.value(q_node).shape[0]
    terms: dict[str, int] = {}

    try:
        hi_row = tape.constant(np.tile(np.asarray(model.joint_max), (t_frames, 1)))
        lo_row = tape.constant(np.tile(np.asarray(model.joint_min), (t_frames, 1)))
        terms["lim"] = tape.add(
            tape.sum(tape.square(tape.relu(tape.sub(q_node, hi_row)))),
            tape.sum(tape.square(tape.relu(tape.sub(lo_row, q_node)))),
        )

        fk = kin.fk_tape(tape, model, q_node)
    except NonFiniteError as exc:
        raise NonFiniteError(f"cost term 'lim': {exc}") from exc

    try:
        col = tape.constant(0.0)
        for a, b in model.collision_pairs:
            onset = model.spheres[a].radius + model.spheres[b].radius + model.margin
            dist = kin.pair_distance_tape(tape, fk, (a, b))
            onset_col = tape.constant(np.full((t_frames, 1), onset))
            col = tape.add(col, tape.sum(tape.square(tape.relu(tape.sub(onset_col, dist)))))
        terms["col"] = col
    except NonFiniteError as exc:
        raise NonFiniteError(f"cost term 'col': {exc}") from exc

    try:
        d1, d2 = kin.derivative_stencils(t_frames, 1.0)
        d1_node, d2_node = tape.constant(d1), tape.constant(d2)
        qd = tape.matmul(d1_node, q_node)
        qdd = tape.matmul(d2_node, q_node)
        terms["sm"] = tape.add(
            tape.sum(tape.square(qd)),
            tape.scalar_mul(tape.sum(tape.square(qdd)), weights.beta_q),
        )
    except NonFiniteError as exc:
        raise NonFiniteError(f"cost term 'sm': {exc}") from exc

    try:
        com_xy = tape.concat([fk.com_x, fk.com_y], axis=1)
        cd = tape.matmul(d1_node, com_xy)
        cdd = tape.matmul(d2_node, com_xy)
        terms["stab"] = tape.add(
            tape.sum(tape.square(cd)),
            tape.scalar_mul(tape.sum(tape.square(cdd)), weights.beta_c),
        )
    except NonFiniteError as exc:
        raise NonFiniteError(f"cost term 'stab': {exc}") from exc

    total = tape.add(
        tape.add(
            tape.scalar_mul(terms["lim"], weights.lambda_lim),
            tape.scalar_mul(terms["col"], weights.lambda_col),
        ),
        tape.add(
            tape.scalar_mul(terms["sm"], weights.lambda_sm),
            tape.scalar_mul(terms["stab"], weights.lambda_stab),
        ),
    )
    return total, terms


def grad_wrt_latent(
    z: np.ndarray,
    history: np.ndarray,
    vp: VaeParams,
    model: ChainModel,
    weights: CostWeights,
) -> tuple[np.ndarray, dict[str, float]]:
    """Gradient of total_cost(Dec(history, z)) w.r.t. z, plus the per-term
    cost breakdown at z. The caller applies clamping and the alpha(u) scale.

    The cost runs over (last history frame || decoded future), so seam
    derivatives are defined.
    """
    tape = Tape()
    z_node = tape.leaf(z[None, :])
    param_nodes = leaves_for(tape, vp.params)
    future = decode_tape(tape, vp, param_nodes, history, z_node)
    seam = tape.constant(history[-1:, :])
    traj_node = tape.concat([seam, future], axis=0)
    try:
        total, terms = cost_tape(tape, traj_node, model, weights)
        breakdown = {name: float(tape.value(node)) for name, node in terms.items()}
        grads = tape.backward(total)
    except NonFiniteError as exc:
        raise NonFiniteError(f"guidance gradient non-finite: {exc}") from exc
    return grads[z_node][0], breakdown
