"""Planar serial-chain model: forward kinematics, CoM, collision spheres.

The chain is 2-D with a fixed base at the origin; the zero pose lies along
+x and joint angles are cumulative. Every geometric quantity exists twice:
as plain numpy (fast paths, metrics, hard screening) and as a tape
subgraph (the guidance gradient differentiates through FK). Both paths
share the same linear-algebra formulation, so they agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tape


@dataclass(frozen=True)
class SphereSpec:
    """Collision sphere riding on a link: `offset` in [0, 1] slides it from
    the link's proximal joint to its tip."""

    link: int
    offset: float
    radius: float


@dataclass(frozen=True)
class ChainModel:
    link_lengths: tuple[float, ...]
    link_masses: tuple[float, ...]
    joint_min: tuple[float, ...]
    joint_max: tuple[float, ...]
    vel_limit: tuple[float, ...]
    acc_limit: tuple[float, ...]
    spheres: tuple[SphereSpec, ...]
    collision_pairs: tuple[tuple[int, int], ...]
    margin: float = 0.03

    def __post_init__(self):
        n = self.n_joints
        for name in ("link_masses", "joint_min", "joint_max", "vel_limit", "acc_limit"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{name} must have {n} entries")
        if any(lo >= hi for lo, hi in zip(self.joint_min, self.joint_max)):
            raise ValueError("joint limits need q_min < q_max per joint")
        if any(v <= 0 for v in self.vel_limit) or any(a <= 0 for a in self.acc_limit):
            raise ValueError("velocity/acceleration limits must be positive")
        if self.margin <= 0:
            raise ValueError("collision margin must be positive")
        for s in self.spheres:
            if not 0 <= s.link < n:
                raise ValueError(f"sphere on unknown link {s.link}")
            if not 0.0 <= s.offset <= 1.0:
                raise ValueError("sphere offset must lie in [0, 1]")
            if not 0.03 <= s.radius <= 0.10:
                raise ValueError("sphere radii are restricted to [0.03, 0.10] m")
        for a, b in self.collision_pairs:
            if a == b:
                raise ValueError("collision pair of a sphere against itself")
            if not (0 <= a < len(self.spheres) and 0 <= b < len(self.spheres)):
                raise ValueError(f"collision pair ({a},{b}) references unknown sphere")
            if abs(self.spheres[a].link - self.spheres[b].link) < 2:
                raise ValueError("collision pairs must reference non-adjacent links")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def total_mass(self) -> float:
        return float(sum(self.link_masses))

    # constant linear maps reused by both FK paths -----------------------------

    def _cumsum_upper(self) -> np.ndarray:
        # (n, n) with U[j, i] = 1 for j <= i: theta = q @ U
        n = self.n_joints
        return np.triu(np.ones((n, n)))

    def _sphere_map(self) -> np.ndarray:
        # endpoints (T, n) -> sphere centers (T, S); base joint sits at the origin
        n = self.n_joints
        s_map = np.zeros((n, len(self.spheres)))
        for si, s in enumerate(self.spheres):
            if s.link > 0:
                s_map[s.link - 1, si] = 1.0 - s.offset
            s_map[s.link, si] = s.offset
        return s_map

    def _com_weights(self) -> np.ndarray:
        # endpoints (T, n) -> CoM coordinate (T, 1); link CoM at link midpoint
        n = self.n_joints
        w = np.zeros((n, 1))
        masses = np.asarray(self.link_masses)
        for i in range(n):
            # midpoint of link i = (P_{i-1} + P_i) / 2, P_{-1} = origin
            w[i, 0] += 0.5 * masses[i]
            if i > 0:
                w[i - 1, 0] += 0.5 * masses[i]
        return w / self.total_mass


def default_chain(n_joints: int = 8) -> ChainModel:
    """The stock desk-scale chain used by the default config. Sphere radii
    sit near the top of the allowed range so a tightly curled pose actually
    collides."""
    spheres = tuple(
        SphereSpec(link, 0.5, 0.09) for link in (1, 2, 3, 5, 6, 7) if link < n_joints
    )
    pairs = tuple(
        (a, b)
        for a, b in ((0, 2), (1, 3), (2, 4), (3, 5), (0, 4), (1, 5))
        if a < len(spheres) and b < len(spheres)
    )
    return ChainModel(
        link_lengths=(0.3,) * n_joints,
        link_masses=(1.0,) * n_joints,
        joint_min=(-1.2,) * n_joints,
        joint_max=(1.2,) * n_joints,
        vel_limit=(4.0,) * n_joints,
        acc_limit=(100.0,) * n_joints,
        spheres=spheres,
        collision_pairs=pairs,
        margin=0.03,
    )


@dataclass(frozen=True)
class JointTrajectory:
    """Frames of joint angles (T, n_joints) sampled at a fixed frame_dt."""

    frames: np.ndarray
    frame_dt: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ShapeError(f"trajectory frames must be (T, n), got {frames.shape}")
        if self.frame_dt <= 0:
            raise ValueError("frame_dt must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# -- plain-number kinematics ----------------------------------------------------


def _check_q(model: ChainModel, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.n_joints,):
        raise ShapeError(f"expected {model.n_joints} joint angles, got shape {q.shape}")
    return q


def link_endpoints(model: ChainModel, q: np.ndarray) -> np.ndarray:
    """Endpoint of every link, (n, 2). Endpoint k = sum_{i<=k} L_i (cos, sin)
    of the cumulative angle."""
    q = _check_q(model, q)
    theta = np.cumsum(q)
    lengths = np.asarray(model.link_lengths)
    x = np.cumsum(lengths * np.cos(theta))
    y = np.cumsum(lengths * np.sin(theta))
    return np.stack([x, y], axis=1)


def sphere_centers(model: ChainModel, q: np.ndarray) -> np.ndarray:
    """Collision-sphere centers, (S, 2)."""
    pts = link_endpoints(model, q)
    s_map = model._sphere_map()
    return np.stack([pts[:, 0] @ s_map, pts[:, 1] @ s_map], axis=1)


def forward_kinematics(model: ChainModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(link endpoints (n, 2), sphere centers (S, 2)) for one configuration."""
    q = _check_q(model, q)
    pts = link_endpoints(model, q)
    s_map = model._sphere_map()
    centers = np.stack([pts[:, 0] @ s_map, pts[:, 1] @ s_map], axis=1)
    return pts, centers


def com(model: ChainModel, q: np.ndarray) -> np.ndarray:
    """Mass-weighted mean of link midpoints, (2,)."""
    if model.total_mass <= 0:
        raise ValueError("total mass must be positive")
    pts = link_endpoints(model, q)
    w = model._com_weights()[:, 0]
    return np.array([pts[:, 0] @ w, pts[:, 1] @ w])


def pair_distance(model: ChainModel, q: np.ndarray, pair: tuple[int, int]) -> float:
    """Euclidean distance between two sphere centers."""
    a, b = pair
    if a == b:
        raise ValueError("pair distance of a sphere against itself")
    n_spheres = len(model.spheres)
    if not (0 <= a < n_spheres and 0 <= b < n_spheres):
        raise ValueError(f"pair ({a},{b}) references unknown sphere")
    centers = sphere_centers(model, q)
    return float(np.linalg.norm(centers[a] - centers[b]))


def derivative_stencils(n_frames: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """(D1, D2) finite-difference matrices acting on (T, n) frame stacks:
    central differences in the interior, one-sided at the ends."""
    if n_frames < 3:
        raise ShapeError("finite differences need at least 3 frames")
    d1 = np.zeros((n_frames, n_frames))
    d2 = np.zeros((n_frames, n_frames))
    for t in range(n_frames):
        if t == 0:
            d1[0, 0], d1[0, 1] = -1.0, 1.0
        elif t == n_frames - 1:
            d1[t, t - 1], d1[t, t] = -1.0, 1.0
        else:
            d1[t, t - 1], d1[t, t + 1] = -0.5, 0.5
        s = min(max(t, 1), n_frames - 2)  # shift the 3-point stencil at the ends
        d2[t, s - 1], d2[t, s], d2[t, s + 1] = 1.0, -2.0, 1.0
    return d1 / dt, d2 / (dt * dt)


def finite_diff_derivatives(traj: JointTrajectory) -> tuple[np.ndarray, np.ndarray]:
    """(velocity frames, acceleration frames) in rad/s and rad/s^2."""
    d1, d2 = derivative_stencils(traj.n_frames, traj.frame_dt)
    return d1 @ traj.frames, d2 @ traj.frames


# -- tape kinematics ------------------------------------------------------------


@dataclass(frozen=True)
class FkNodes:
    """Tape node ids for the FK quantities of a (T, n) angle matrix."""

    theta: int
    link_x: int
    link_y: int
    sphere_x: int
    sphere_y: int
    com_x: int
    com_y: int


def fk_tape(tape: Tape, model: ChainModel, q_node: int) -> FkNodes:
    """Differentiable FK for a whole trajectory node of shape (T, n)."""
    t_frames, n = tape.value(q_node).shape
    if n != model.n_joints:
        raise ShapeError(f"FK expects (T, {model.n_joints}) angles, got (T, {n})")
    upper = tape.constant(model._cumsum_upper())
    lengths_row = tape.constant(np.tile(np.asarray(model.link_lengths), (t_frames, 1)))
    theta = tape.matmul(q_node, upper)
    cx = tape.elem_mul(tape.cos(theta), lengths_row)
    sy = tape.elem_mul(tape.sin(theta), lengths_row)
    link_x = tape.matmul(cx, upper)
    link_y = tape.matmul(sy, upper)
    s_map = tape.constant(model._sphere_map())
    com_w = tape.constant(model._com_weights())
    return FkNodes(
        theta=theta,
        link_x=link_x,
        link_y=link_y,
        sphere_x=tape.matmul(link_x, s_map),
        sphere_y=tape.matmul(link_y, s_map),
        com_x=tape.matmul(link_x, com_w),
        com_y=tape.matmul(link_y, com_w),
    )


def pair_distance_tape(tape: Tape, fk: FkNodes, pair: tuple[int, int]) -> int:
    """Distance (T, 1) node between two sphere centers along a trajectory."""
    a, b = pair
    ax = tape.slice(fk.sphere_x, 1, a, a + 1)
    bx = tape.slice(fk.sphere_x, 1, b, b + 1)
    ay = tape.slice(fk.sphere_y, 1, a, a + 1)
    by = tape.slice(fk.sphere_y, 1, b, b + 1)
    dx = tape.sub(ax, bx)
    dy = tape.sub(ay, by)
    return tape.sqrt(tape.add(tape.square(dx), tape.square(dy)))
