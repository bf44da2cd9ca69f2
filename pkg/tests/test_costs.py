import numpy as np
import pytest

from flowgate.costs import (
    CostWeights,
    GuidanceSchedule,
    c_col,
    c_lim,
    c_sm,
    c_stab,
    cost_tape,
    grad_wrt_latent,
    total_cost,
)
from flowgate.kinematics import ChainModel, JointTrajectory, SphereSpec, default_chain
from flowgate.motion_data import T_FUT, T_HIST
from flowgate.tensor import Tape
from flowgate.vae import VaeConfig, init_vae


def wide_chain(**kw):
    base = dict(
        link_lengths=(1.0, 1.0, 1.0),
        link_masses=(1.0, 1.0, 1.0),
        joint_min=(-4.0,) * 3,
        joint_max=(4.0,) * 3,
        vel_limit=(50.0,) * 3,
        acc_limit=(5000.0,) * 3,
        spheres=(),
        collision_pairs=(),
        margin=0.03,
    )
    base.update(kw)
    return ChainModel(**base)


def test_c_lim_zero_inside_limits():
    model = default_chain()
    traj = JointTrajectory(np.zeros((5, 8)), 0.04)
    assert c_lim(traj, model) == 0.0


def test_c_lim_single_violation():
    model = default_chain()
    frames = np.zeros((5, 8))
    frames[2, 3] = model.joint_max[3] + 0.1
    assert c_lim(JointTrajectory(frames, 0.04), model) == pytest.approx(0.01, rel=1e-12)


def test_c_lim_one_side_active():
    # a single sample cannot violate both sides of one joint's interval
    model = default_chain()
    frames = np.zeros((1, 8))
    frames[0, 0] = model.joint_max[0] + 0.3
    hi_only = c_lim(JointTrajectory(frames, 0.04), model)
    assert hi_only == pytest.approx(0.09, rel=1e-12)
    frames[0, 0] = model.joint_min[0] - 0.3
    lo_only = c_lim(JointTrajectory(frames, 0.04), model)
    assert lo_only == pytest.approx(0.09, rel=1e-12)


def penetration_chain(margin):
    return wide_chain(
        spheres=(SphereSpec(0, 0.5, 0.05), SphereSpec(2, 0.5, 0.08)),
        collision_pairs=((0, 1),),
        margin=margin,
    )


def test_c_col_zero_when_separated():
    model = penetration_chain(margin=0.03)
    traj = JointTrajectory(np.zeros((3, 3)), 0.04)
    assert c_col(traj, model) == 0.0


def test_c_col_boundary_is_zero():
    # equilateral fold: q = (0, 2pi/3, 2pi/3) puts the two sphere centers
    # exactly 0.5 m apart (hand trig); margin chosen so onset == 0.5
    model = penetration_chain(margin=0.5 - 0.13)
    q = np.array([0.0, 2 * np.pi / 3, 2 * np.pi / 3])
    assert c_col(JointTrajectory(q[None, :], 0.04), model) == pytest.approx(0.0, abs=1e-24)


def test_c_col_known_penetration():
    # same fold with onset 0.52: gap = 0.02 -> cost = 4e-4 on one frame
    model = penetration_chain(margin=0.52 - 0.13)
    q = np.array([0.0, 2 * np.pi / 3, 2 * np.pi / 3])
    traj = JointTrajectory(q[None, :], 0.04)
    assert c_col(traj, model) == pytest.approx(4e-4, rel=1e-9)


def test_c_sm_zero_for_constant():
    # BLAS FMA leaves ~1e-28 cancellation residue; zero up to that noise
    traj = JointTrajectory(np.full((6, 3), 0.2), 0.04)
    assert c_sm(traj) == pytest.approx(0.0, abs=1e-20)
    assert c_stab(traj, wide_chain()) == pytest.approx(0.0, abs=1e-20)


def test_c_sm_beta_linearity():
    rng = np.random.default_rng(0)
    traj = JointTrajectory(rng.uniform(-1, 1, size=(6, 3)), 0.04)
    base = c_sm(traj, beta_q=0.0)
    with_b = c_sm(traj, beta_q=50.0)
    doubled = c_sm(traj, beta_q=100.0)
    assert doubled - base == pytest.approx(2 * (with_b - base), rel=1e-12)


def test_c_stab_zero_for_base_centered_rotation():
    # links (1, 3), equal masses, q2 = pi keeps the CoM pinned at the base
    model = ChainModel(
        link_lengths=(1.0, 3.0),
        link_masses=(1.0, 1.0),
        joint_min=(-4.0, -4.0),
        joint_max=(4.0, 4.0),
        vel_limit=(50.0, 50.0),
        acc_limit=(5000.0, 5000.0),
        spheres=(),
        collision_pairs=(),
    )
    t = np.arange(8) * 0.04
    frames = np.stack([0.9 * t, np.full(8, np.pi)], axis=1)
    traj = JointTrajectory(frames, 0.04)
    assert c_stab(traj, model) == pytest.approx(0.0, abs=1e-18)
    assert c_sm(traj) > 0.0


def test_total_cost_breakdown_identity():
    rng = np.random.default_rng(1)
    model = default_chain()
    traj = JointTrajectory(rng.uniform(-1.4, 1.4, size=(9, 8)), 0.04)
    weights = CostWeights()
    total, parts = total_cost(traj, model, weights)
    hand = (
        weights.lambda_lim * parts["lim"]
        + weights.lambda_col * parts["col"]
        + weights.lambda_sm * parts["sm"]
        + weights.lambda_stab * parts["stab"]
    )
    assert total == pytest.approx(hand, rel=1e-15)
    assert all(v >= 0.0 for v in parts.values())


def test_total_cost_zero_for_resting():
    model = default_chain()
    traj = JointTrajectory(np.zeros((9, 8)), 0.04)
    total, _ = total_cost(traj, model, CostWeights())
    assert total == pytest.approx(0.0, abs=1e-20)


def test_zeroing_one_lambda_removes_term():
    rng = np.random.default_rng(2)
    model = default_chain()
    traj = JointTrajectory(rng.uniform(-1.4, 1.4, size=(9, 8)), 0.04)
    full, parts = total_cost(traj, model, CostWeights())
    no_sm, _ = total_cost(traj, model, CostWeights(lambda_sm=0.0))
    assert full - no_sm == pytest.approx(0.1 * parts["sm"], rel=1e-12)


def test_cost_tape_matches_plain():
    rng = np.random.default_rng(3)
    model = default_chain()
    frames = rng.uniform(-1.4, 1.4, size=(9, 8))
    weights = CostWeights()
    plain, parts = total_cost(JointTrajectory(frames, 0.04), model, weights)
    tape = Tape()
    q = tape.leaf(frames)
    total_node, term_nodes = cost_tape(tape, q, model, weights)
    assert float(tape.value(total_node)) == pytest.approx(plain, rel=1e-12)
    for name, node in term_nodes.items():
        assert float(tape.value(node)) == pytest.approx(parts[name], rel=1e-11)


# -- guidance gradient ---------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_vae():
    rng = np.random.default_rng(12)
    vp = init_vae(VaeConfig(d_z=6, hidden=(24,), seed=12), n_joints=8, rng=rng)
    # keep decoded motion small: barriers stay inactive for the feasible test
    for name in vp.params:
        if name.startswith("dec."):
            vp.params[name] = vp.params[name] * 0.05
    return vp


def _fd_grad(z, history, vp, model, weights, h=1e-5):
    g = np.zeros_like(z)
    for i in range(z.size):
        hi = z.copy(); hi[i] += h
        lo = z.copy(); lo[i] -= h
        from flowgate.vae import decode

        def total_at(zz):
            frames = decode(vp, history, zz)
            traj = JointTrajectory(np.vstack([history[-1:], frames]), 0.04)
            return total_cost(traj, model, weights)[0]

        g[i] = (total_at(hi) - total_at(lo)) / (2 * h)
    return g


def test_grad_matches_finite_differences(toy_vae):
    rng = np.random.default_rng(4)
    model = default_chain()
    weights = CostWeights()
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, 8))
    z = rng.standard_normal(6)
    grad, _ = grad_wrt_latent(z, history, toy_vae, model, weights)
    numeric = _fd_grad(z, history, toy_vae, model, weights)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(grad - numeric) / denom) <= 1e-5


def test_grad_lambda_scaling(toy_vae):
    rng = np.random.default_rng(5)
    model = default_chain()
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, 8))
    z = rng.standard_normal(6)
    g1, _ = grad_wrt_latent(z, history, toy_vae, model, CostWeights())
    kappa = 3.0
    w2 = CostWeights(
        lambda_lim=kappa, lambda_col=0.01 * kappa, lambda_sm=0.1 * kappa, lambda_stab=kappa
    )
    g2, _ = grad_wrt_latent(z, history, toy_vae, model, w2)
    np.testing.assert_allclose(g2, kappa * g1, rtol=1e-12, atol=1e-18)


def test_feasible_latent_gradient_is_smoothness_only(toy_vae):
    # decoded motion is tiny, so barrier terms are exactly zero and the
    # gradient reduces to the smoothness + stability subgraph
    rng = np.random.default_rng(6)
    model = default_chain()
    history = np.zeros((T_HIST, 8))
    z = 0.1 * rng.standard_normal(6)
    full, parts = grad_wrt_latent(z, history, toy_vae, model, CostWeights())
    assert parts["lim"] == 0.0 and parts["col"] == 0.0
    sm_only, _ = grad_wrt_latent(
        z, history, toy_vae, model, CostWeights(lambda_lim=0.0, lambda_col=0.0)
    )
    np.testing.assert_allclose(full, sm_only, atol=1e-16)
    numeric = _fd_grad(z, history, toy_vae, model, CostWeights(), 0.04)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(full - numeric) / denom) <= 1e-5


def test_clamped_descent_step_does_not_increase_cost(toy_vae):
    from flowgate.vae import decode

    rng = np.random.default_rng(7)
    model = default_chain()
    weights = CostWeights()
    schedule = GuidanceSchedule()
    # a latent whose decoded motion violates: push decoder output wide
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, 8))
    z = 4.0 * rng.standard_normal(6)

    def cost_at(zz):
        frames = decode(toy_vae, history, zz)
        traj = JointTrajectory(np.vstack([history[-1:], frames]), 0.04)
        return total_cost(traj, model, weights)[0]

    grad, _ = grad_wrt_latent(z, history, toy_vae, model, weights)
    step = np.clip(grad, -schedule.clamp, schedule.clamp)
    for eta in (1e-6, 1e-5, 1e-4):
        assert cost_at(z - eta * step) <= cost_at(z) + 1e-9


def test_guidance_schedule_interpolation():
    s = GuidanceSchedule(alpha_start=500.0, alpha_end=10000.0)
    assert s.alpha(0.0) == 500.0
    assert s.alpha(1.0) == 10000.0
    assert s.alpha(0.5) == pytest.approx(5250.0)
