"""Deterministic PD tracker over per-joint double-integrator dynamics.

Stands in for a learned tracking controller: torque-saturated PD at 50 Hz
with semi-implicit Euler integration and hard velocity clamping. The only
job of this stage is to make tracking error a monotone function of
reference infeasibility, which the metric suite measures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kinematics import ChainModel, derivative_stencils, link_endpoints
from .tensor import NonFiniteError, ShapeError


@dataclass(frozen=True)
class TrackerConfig:
    """Gains sized for stable 50 Hz semi-implicit integration: the fast
    closed-loop pole must stay below the tick rate (kd * dt / I < 2)."""

    kp: float = 180.0
    kd: float = 4.0
    tau_max: float = 6.0
    inertia: float = 0.05
    control_dt: float = 0.02  # 50 Hz

    def __post_init__(self):
        if min(self.kp, self.kd, self.tau_max, self.inertia, self.control_dt) <= 0:
            raise ValueError("tracker gains, limits, and timing must be positive")


@dataclass
class TrackerState:
    q: np.ndarray
    qd: np.ndarray

    @classmethod
    def at_rest(cls, q: np.ndarray) -> "TrackerState":
        q = np.asarray(q, dtype=np.float64)
        return cls(q=q.copy(), qd=np.zeros_like(q))


def tracker_step(
    cfg: TrackerConfig,
    model: ChainModel,
    state: TrackerState,
    q_ref: np.ndarray,
    qd_ref: np.ndarray,
) -> TrackerState:
    """One 50 Hz tick: saturated PD torque, semi-implicit Euler, velocity
    clamp, and mechanical hard stops at the joint limits.

    The hard stops make infeasible references measurably expensive: a
    reference beyond a limit pins the joint at the stop and the tracking
    error grows with the violation depth.
    """
    if q_ref.shape != state.q.shape or qd_ref.shape != state.q.shape:
        raise ShapeError("reference dimensions must match tracker state")
    tau = cfg.kp * (q_ref - state.q) + cfg.kd * (qd_ref - state.qd)
    tau = np.clip(tau, -cfg.tau_max, cfg.tau_max)
    qdd = tau / cfg.inertia
    qd = state.qd + cfg.control_dt * qdd
    qd = np.clip(qd, -np.asarray(model.vel_limit), np.asarray(model.vel_limit))
    q = state.q + cfg.control_dt * qd
    lo, hi = np.asarray(model.joint_min), np.asarray(model.joint_max)
    hit = (q < lo) | (q > hi)
    q = np.clip(q, lo, hi)
    qd = np.where(hit, 0.0, qd)  # plastic stop: no bounce
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise NonFiniteError("tracker state became non-finite")
    return TrackerState(q=q, qd=qd)


def upsample_reference(frames: np.ndarray, frame_dt: float, control_dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear joint-space interpolation of a (F, n) frame block to the control
    rate, starting one control tick after frames[0].

    Returns (q_ref ticks, qd_ref ticks); the velocity target is the slope of
    the active frame segment (piecewise constant).
    """
    if frames.shape[0] < 2:
        raise ShapeError("need at least 2 frames to interpolate")
    ratio = frame_dt / control_dt
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
        raise ValueError("frame_dt must be an integer multiple of control_dt")
    ratio = int(round(ratio))
    n_seg = frames.shape[0] - 1
    q_ticks = []
    qd_ticks = []
    for k in range(n_seg):
        slope = (frames[k + 1] - frames[k]) / frame_dt
        for j in range(1, ratio + 1):
            q_ticks.append(frames[k] + slope * (j * control_dt))
            qd_ticks.append(slope)
    return np.stack(q_ticks), np.stack(qd_ticks)


# -- metrics ------------------------------------------------------------------------


def compute_metrics(
    reference: np.ndarray, executed: np.ndarray, model: ChainModel, dt: float
) -> tuple[float, float, float]:
    """(MPJPE in mm, velocity error in m/s, acceleration error in m/s^2)
    between aligned frame sequences, measured on FK link positions."""
    if reference.shape != executed.shape:
        raise ShapeError(f"length mismatch: {reference.shape} vs {executed.shape}")
    t_frames = reference.shape[0]
    ref_p = np.stack([link_endpoints(model, q) for q in reference])  # (T, L, 2)
    exe_p = np.stack([link_endpoints(model, q) for q in executed])
    mpjpe = float(np.mean(np.linalg.norm(ref_p - exe_p, axis=2))) * 1000.0
    if t_frames < 3:
        return mpjpe, 0.0, 0.0
    d1, d2 = derivative_stencils(t_frames, dt)
    flat_ref = ref_p.reshape(t_frames, -1)
    flat_exe = exe_p.reshape(t_frames, -1)
    dv = (d1 @ flat_ref - d1 @ flat_exe).reshape(t_frames, -1, 2)
    da = (d2 @ flat_ref - d2 @ flat_exe).reshape(t_frames, -1, 2)
    e_vel = float(np.mean(np.linalg.norm(dv, axis=2)))
    e_acc = float(np.mean(np.linalg.norm(da, axis=2)))
    return mpjpe, e_vel, e_acc


def jv_sc_rates(frames: np.ndarray, model: ChainModel) -> tuple[float, float]:
    """(joint-limit violation %, self-collision %) over reference frames.

    Self-collision counts actual sphere overlap (d < r_a + r_b); the margin
    zone feeds the barrier cost but is not a collision.
    """
    if frames.size == 0:
        return 0.0, 0.0
    lo, hi = np.asarray(model.joint_min), np.asarray(model.joint_max)
    jv = np.any((frames < lo) | (frames > hi), axis=1)
    sc = np.zeros(frames.shape[0], dtype=bool)
    from .kinematics import sphere_centers

    for t, q in enumerate(frames):
        centers = sphere_centers(model, q)
        for a, b in model.collision_pairs:
            contact = model.spheres[a].radius + model.spheres[b].radius
            if np.linalg.norm(centers[a] - centers[b]) < contact:
                sc[t] = True
                break
    return float(jv.mean() * 100.0), float(sc.mean() * 100.0)


def pairwise_multimodality(generations: Sequence[np.ndarray]) -> float:
    """Mean over unordered pairs of the frame-averaged joint-angle L2 distance."""
    n = len(generations)
    if n < 2:
        raise ValueError("multimodality needs at least 2 generations")
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            dist = np.linalg.norm(generations[i] - generations[j], axis=1)
            total += float(dist.mean())
            count += 1
    return total / count


def multimodality(
    sample_fn: Callable[[int], np.ndarray], n: int = 10, seeds: Sequence[int] | None = None
) -> float:
    """Diversity of repeated generations under one prompt: sample_fn(seed)
    returns a (T, n_joints) frame block."""
    if n < 2:
        raise ValueError("multimodality needs n >= 2")
    seeds = list(seeds) if seeds is not None else list(range(n))
    generations = [sample_fn(seed) for seed in seeds[:n]]
    return pairwise_multimodality(generations)


@dataclass
class EpisodeReport:
    """Per-episode outcome; rate metrics are computed on the common prefix
    before the first failure."""

    success: bool
    failure_frame: int | None
    jv_rate: float
    sc_rate: float
    mpjpe_mm: float
    e_vel: float
    e_acc: float
    mmodality: float | None = None
    r_scores: list[float] = field(default_factory=list)
    gate_log: list[dict] = field(default_factory=list)
    n_reference_frames: int = 0
    n_fallbacks: int = 0

    def to_json(self) -> str:
        doc = {
            "success": self.success,
            "failure_frame": self.failure_frame,
            "jv_rate": self.jv_rate,
            "sc_rate": self.sc_rate,
            "mpjpe_mm": self.mpjpe_mm,
            "e_vel": self.e_vel,
            "e_acc": self.e_acc,
            "mmodality": self.mmodality,
            "r_scores": self.r_scores,
            "gate_log": self.gate_log,
            "n_reference_frames": self.n_reference_frames,
            "n_fallbacks": self.n_fallbacks,
        }
        return json.dumps(doc, allow_nan=False)
