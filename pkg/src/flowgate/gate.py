"""Training-free 3-stage safety gate plus the safe fallback policy.

Stage 1 rejects semantically out-of-distribution prompts by Mahalanobis
distance in embedding space. Stage 2 probes the velocity field's
directional sensitivity and rejects unstable generations. Stage 3 is the
deterministic hard screen over joint position/velocity/acceleration
limits. Any rejection hands control to the fallback: the prompt stream is
overridden with "stand" while the reference interpolates to the nominal
pose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kinematics import ChainModel, JointTrajectory, derivative_stencils
from .tensor import NonFiniteError

FieldFn = Callable[[np.ndarray], np.ndarray]  # (B, d_z) -> (B, d_z), conditioning bound


@dataclass(frozen=True)
class GateDecision:
    stage: int
    accept: bool
    score: float
    reason: str | None
    t: float  # episode time in seconds (deterministic, not wall clock)

    def __post_init__(self):
        if not self.accept and not self.reason:
            raise ValueError("rejections must carry a reason code")

    def to_json_line(self) -> str:
        return json.dumps(
            {"stage": self.stage, "accept": self.accept, "score": self.score,
             "reason": self.reason, "t": self.t},
            allow_nan=False,
        )


# -- stage 1: semantic OOD filter ---------------------------------------------------


try:
    import numba as _numba_m

    @_numba_m.njit(fastmath=False)
    def _mahalanobis_sq(diff, cov_inv):  # pragma: no cover
        return diff @ cov_inv @ diff

except Exception:  # pragma: no cover - numba unavailable
    def _mahalanobis_sq(diff, cov_inv):
        return diff @ cov_inv @ diff


@dataclass
class SemanticGate:
    mu: np.ndarray
    cov_reg: np.ndarray
    cov_inv: np.ndarray
    tau_sem: float
    percentile: float
    eps_reg: float

    def mahalanobis_sq(self, e: np.ndarray) -> float:
        return float(_mahalanobis_sq(np.ascontiguousarray(e - self.mu), self.cov_inv))


def calibrate_semantic(
    embeddings: np.ndarray, percentile: float = 90.0, eps_reg: float = 1e-3
) -> SemanticGate:
    """Fit (mu, regularized covariance) and set tau_sem at the requested
    percentile of training distances, ties broken toward acceptance."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n, d = emb.shape
    if n < d + 1:
        raise ValueError(f"need at least dim+1 = {d + 1} embeddings, got {n}")
    mu = emb.mean(axis=0)
    cov = np.cov(emb, rowvar=False, ddof=1)
    cov_reg = cov + eps_reg * np.eye(d)
    try:
        np.linalg.cholesky(cov_reg)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance singular even after regularization") from exc
    cov_inv = np.linalg.inv(cov_reg)
    diffs = emb - mu
    d2 = np.einsum("ij,jk,ik->i", diffs, cov_inv, diffs)
    k = max(1, int(np.ceil(percentile / 100.0 * n)))
    tau = float(np.sort(d2)[k - 1])
    return SemanticGate(mu=mu, cov_reg=cov_reg, cov_inv=cov_inv, tau_sem=tau,
                        percentile=percentile, eps_reg=eps_reg)


def stage1(gate: SemanticGate, e: np.ndarray, t: float = 0.0) -> GateDecision:
    """Accept iff the embedding's squared Mahalanobis distance d2 <= tau_sem."""
    d2 = gate.mahalanobis_sq(e)
    accept = d2 <= gate.tau_sem
    return GateDecision(stage=1, accept=accept, score=d2,
                        reason=None if accept else "semantic_ood", t=t)


# -- stage 2: generation instability filter ------------------------------------------


@dataclass(frozen=True)
class InstabilityProbe:
    m: int = 16
    delta: float = 1e-6
    seed: int = 0
    tau_stab: float = 5.0
    eval_points: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least 2 probes")
        if self.delta <= 0:
            raise ValueError("probe perturbation must be positive")


def draw_probes(seed: int, m: int, dim: int) -> np.ndarray:
    """M unit probe directions from a seeded Gaussian."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70726F62]))
    eps = rng.standard_normal((m, dim))
    return eps / np.linalg.norm(eps, axis=1, keepdims=True)


def directional_sensitivities(
    field: FieldFn,
    z: np.ndarray,
    probes: np.ndarray,
    delta: float,
    mode: str = "batched",
) -> np.ndarray:
    """g_m = eps_m . (v(z + delta eps_m) - v(z)) / delta for every probe.

    "batched" runs all probe points through the field in one pass; because
    the inference path is batch-size invariant this is bit-identical to
    "serial", which evaluates one point at a time.
    """
    if mode == "batched":
        rows = np.concatenate([z[None, :], z[None, :] + delta * probes], axis=0)
        values = field(rows)
        v0, v_probe = values[0], values[1:]
    elif mode == "serial":
        v0 = field(z[None, :])[0]
        v_probe = np.stack([field((z + delta * p)[None, :])[0] for p in probes])
    else:
        raise ValueError(f"unknown probe mode {mode!r}")
    diffs = (v_probe - v0) / delta
    g = np.einsum("md,md->m", probes, diffs)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite probe response in instability score")
    return g


def instability_score(
    field: FieldFn,
    z: np.ndarray,
    probe: InstabilityProbe,
    probe_seed: int | None = None,
    mode: str = "batched",
) -> tuple[float, np.ndarray]:
    """Generation instability score R: the population standard deviation of
    the directional sensitivities under M seeded unit probes."""
    seed = probe.seed if probe_seed is None else probe_seed
    probes = draw_probes(seed, probe.m, z.shape[0])
    g = directional_sensitivities(field, z, probes, probe.delta, mode=mode)
    return float(np.std(g)), g


def stage2(
    field_at: Callable[[float], FieldFn],
    states: Sequence[tuple[float, np.ndarray]],
    probe: InstabilityProbe,
    probe_seed: int | None = None,
    t: float = 0.0,
) -> GateDecision:
    """R averaged over the configured integration-time states; reject iff it
    exceeds tau_stab. `field_at(u)` binds the sampler's conditioning."""
    if not states:
        raise ValueError("stage2 needs at least one (u, z) probe state")
    scores = [instability_score(field_at(u), z, probe, probe_seed=probe_seed)[0] for u, z in states]
    r_avg = float(np.mean(scores))
    accept = r_avg <= probe.tau_stab
    return GateDecision(stage=2, accept=accept, score=r_avg,
                        reason=None if accept else "generation_instability", t=t)


def calibrate_tau_stab(r_values: Sequence[float], percentile: float = 99.0) -> float:
    """Percentile of instability scores collected on ID validation windows."""
    if len(r_values) == 0:
        raise ValueError("need at least one instability score to calibrate")
    return float(np.percentile(np.asarray(r_values), percentile))


# -- stage 3: hard kinematic screen ---------------------------------------------------

_FAMILIES = ("position", "velocity", "acceleration")

# jitted accept fast path: the screen runs on the generation hot loop and
# must stay a negligible fraction of a single-step generation
try:
    import numba as _numba

    @_numba.njit(fastmath=False)
    def _any_violation(q, dd, lo, hi, vel, acc):  # pragma: no cover
        t_frames, n = q.shape
        for t in range(t_frames):
            for j in range(n):
                if q[t, j] > hi[j] or q[t, j] < lo[j]:
                    return True
        der = dd @ q
        for t in range(t_frames):
            for j in range(n):
                if abs(der[t, j]) > vel[j]:
                    return True
        for t in range(t_frames, 2 * t_frames):
            for j in range(n):
                if abs(der[t, j]) > acc[j]:
                    return True
        return False

except Exception:  # pragma: no cover - numba unavailable
    _any_violation = None

# keyed by (id(model), frames, dt); the entry holds the model so the id
# cannot be recycled while the cache lives
_SCREEN_CACHE: dict[tuple[int, int, float], tuple] = {}


def _screen_arrays(model: ChainModel, n_frames: int, dt: float) -> tuple[np.ndarray, ...]:
    key = (id(model), n_frames, dt)
    cached = _SCREEN_CACHE.get(key)
    if cached is None:
        d1, d2 = derivative_stencils(n_frames, dt)
        dd = np.ascontiguousarray(np.vstack([d1, d2]))
        cached = (
            model,
            dd,
            np.asarray(model.joint_min),
            np.asarray(model.joint_max),
            np.asarray(model.vel_limit),
            np.asarray(model.acc_limit),
        )
        _SCREEN_CACHE[key] = cached
    return cached[1:]


def stage3(traj: JointTrajectory, model: ChainModel, t: float = 0.0) -> GateDecision:
    """Deterministic limit screen over positions, velocities, accelerations.

    Violations are strict (a frame exactly at a limit passes). The score is
    the largest violation normalized by the family scale (position: limit
    range, velocity/acceleration: the limit itself); the reason names the
    family, joint, and frame of that violation, with ties broken by family
    order, then frame, then joint.
    """
    if traj.n_frames < 3:
        raise ValueError("stage3 needs >= 3 frames (prepend the last executed frames)")
    q = traj.frames
    dd, lo, hi, vel, acc = _screen_arrays(model, traj.n_frames, traj.frame_dt)
    if _any_violation is not None:
        # accept short-circuit (same strict comparisons as the bookkeeping
        # path below); the detailed scan runs only on rejection
        if not _any_violation(np.ascontiguousarray(q), dd, lo, hi, vel, acc):
            return GateDecision(stage=3, accept=True, score=0.0, reason=None, t=t)
    d1, d2 = derivative_stencils(traj.n_frames, traj.frame_dt)
    qd, qdd = d1 @ q, d2 @ q

    excess = {
        "position": np.maximum(np.maximum(q - hi, lo - q), 0.0) / (hi - lo),
        "velocity": np.maximum(np.abs(qd) - np.asarray(model.vel_limit), 0.0)
        / np.asarray(model.vel_limit),
        "acceleration": np.maximum(np.abs(qdd) - np.asarray(model.acc_limit), 0.0)
        / np.asarray(model.acc_limit),
    }
    best = (0.0, None)
    for family in _FAMILIES:
        mat = excess[family]
        if mat.max() > best[0]:
            flat = int(np.argmax(mat))
            frame, joint = divmod(flat, mat.shape[1])
            best = (float(mat.max()), f"{family}:joint{joint}:frame{frame}")
    score, reason = best
    accept = reason is None
    return GateDecision(stage=3, accept=accept, score=score, reason=reason, t=t)


# -- safe fallback ---------------------------------------------------------------------


@dataclass
class FallbackState:
    """Rate-limited linear interpolation from the captured pose to nominal,
    then hold; the prompt stream reads "stand" while active."""

    start_pose: np.ndarray
    nominal_pose: np.ndarray
    duration_s: float
    frame_dt: float
    vel_limit: np.ndarray
    emitted: int = 0
    n_frames: int = field(init=False)

    def __post_init__(self):
        base = max(1, int(round(self.duration_s / self.frame_dt)))
        delta = np.abs(self.nominal_pose - self.start_pose)
        max_step = np.asarray(self.vel_limit) * self.frame_dt
        with np.errstate(divide="ignore"):
            needed = int(np.ceil((delta / max_step).max())) if delta.max() > 0 else 1
        self.n_frames = max(base, needed)

    @property
    def active(self) -> bool:
        return self.emitted < self.n_frames


def fallback_step(state: FallbackState) -> tuple[np.ndarray, str]:
    """Next fallback reference frame plus the prompt override."""
    if state.active:
        state.emitted += 1
        frac = state.emitted / state.n_frames
        frame = (1.0 - frac) * state.start_pose + frac * state.nominal_pose
    else:
        frame = state.nominal_pose.copy()
    return frame, "stand"


# -- ranking metric ---------------------------------------------------------------------


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Probability that a random OOD score exceeds a random ID score, ties
    counted as half; exact rank-based computation."""
    ids = np.asarray(id_scores, dtype=np.float64)
    oods = np.asarray(ood_scores, dtype=np.float64)
    if ids.size == 0 or oods.size == 0:
        raise ValueError("auroc needs non-empty score sets")
    combined = np.concatenate([ids, oods])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty_like(combined)
    # average ranks over tie groups
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_ood = ranks[ids.size :].sum()
    u = rank_sum_ood - oods.size * (oods.size + 1) / 2.0
    return float(u / (ids.size * oods.size))


# -- calibration artifact -----------------------------------------------------------------


def save_gates(path: str, gate: SemanticGate, probe: InstabilityProbe) -> None:
    from .tensor import save_checkpoint

    tensors = {"mu": gate.mu, "cov_reg": gate.cov_reg, "cov_inv": gate.cov_inv}
    meta = {
        "kind": "gates",
        "tau_sem": gate.tau_sem,
        "percentile": gate.percentile,
        "eps_reg": gate.eps_reg,
        "probe": {
            "m": probe.m,
            "delta": probe.delta,
            "seed": probe.seed,
            "tau_stab": probe.tau_stab,
            "eval_points": list(probe.eval_points),
        },
    }
    save_checkpoint(path, tensors, meta)


def load_gates(path: str) -> tuple[SemanticGate, InstabilityProbe]:
    from .tensor import load_checkpoint

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "gates":
        raise ValueError(f"checkpoint {path!r} is not a gate calibration")
    gate = SemanticGate(
        mu=tensors["mu"],
        cov_reg=tensors["cov_reg"],
        cov_inv=tensors["cov_inv"],
        tau_sem=meta["tau_sem"],
        percentile=meta["percentile"],
        eps_reg=meta["eps_reg"],
    )
    p = meta["probe"]
    probe = InstabilityProbe(
        m=p["m"], delta=p["delta"], seed=p["seed"], tau_stab=p["tau_stab"],
        eval_points=tuple(p["eval_points"]),
    )
    return gate, probe
