import numpy as np
import pytest

from flowgate.motion_data import MotionDataset, MotionWindow, T_FUT, T_HIST
from flowgate.nets import leaves_for
from flowgate.tensor import Tape
from flowgate.vae import (
    VaeConfig,
    decode,
    decode_tape,
    encode,
    init_vae,
    load_vae,
    reparameterize,
    save_vae,
    train_vae,
    validation_report,
)

N_JOINTS = 4


def make_window(rng, constant=False):
    if constant:
        pose = rng.uniform(-0.5, 0.5, size=N_JOINTS)
        frames = np.tile(pose, (T_HIST + T_FUT, 1))
    else:
        t = np.arange(T_HIST + T_FUT)[:, None] * 0.04
        frames = 0.4 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi, size=N_JOINTS))
    return MotionWindow(
        history=frames[:T_HIST],
        future=frames[T_HIST:],
        prompt="test",
        embedding=np.zeros(8),
    )


def tiny_dataset(n=12, constant=False, seed=0):
    rng = np.random.default_rng(seed)
    windows = [make_window(rng, constant=constant) for _ in range(n)]
    return MotionDataset(
        windows=windows,
        train_idx=list(range(n - 2)),
        val_idx=[n - 2, n - 1],
        trajectories=[],
        trajectory_prompts=[],
        trajectory_primitives=[],
        frame_dt=0.04,
        seed=seed,
        embedder_seed=seed,
    )


@pytest.fixture(scope="module")
def random_vae():
    rng = np.random.default_rng(0)
    return init_vae(VaeConfig(d_z=5, hidden=(16,), seed=0), N_JOINTS, rng)


def test_encode_deterministic(random_vae):
    w = make_window(np.random.default_rng(1))
    mu1, ls1 = encode(random_vae, w)
    mu2, ls2 = encode(random_vae, w)
    np.testing.assert_array_equal(mu1, mu2)
    np.testing.assert_array_equal(ls1, ls2)
    assert mu1.shape == (5,) and ls1.shape == (5,)


def test_reparameterize_with_zero_eps_is_mu(random_vae):
    w = make_window(np.random.default_rng(2))
    mu, log_sigma = encode(random_vae, w)
    np.testing.assert_array_equal(reparameterize(mu, log_sigma, np.zeros(5)), mu)


def test_decode_pure_function(random_vae):
    rng = np.random.default_rng(3)
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, N_JOINTS))
    z = rng.standard_normal(5)
    out1 = decode(random_vae, history, z)
    out2 = decode(random_vae, history, z)
    np.testing.assert_array_equal(out1, out2)
    assert out1.shape == (T_FUT, N_JOINTS)


def test_decode_tape_matches_infer(random_vae):
    rng = np.random.default_rng(4)
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, N_JOINTS))
    z = rng.standard_normal(5)
    tape = Tape()
    nodes = leaves_for(tape, random_vae.params)
    frames_node = decode_tape(tape, random_vae, nodes, history, tape.leaf(z[None, :]))
    np.testing.assert_allclose(tape.value(frames_node), decode(random_vae, history, z), atol=1e-12)


def test_decode_jacobian_matches_finite_differences(random_vae):
    rng = np.random.default_rng(5)
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, N_JOINTS))
    z0 = rng.standard_normal(5)
    h = 1e-6

    tape = Tape()
    nodes = leaves_for(tape, random_vae.params)
    z_node = tape.leaf(z0[None, :])
    frames_node = decode_tape(tape, random_vae, nodes, history, z_node)
    analytic = tape.backward(tape.sum(frames_node))[z_node][0]

    numeric = np.zeros(5)
    for i in range(5):
        hi = z0.copy(); hi[i] += h
        lo = z0.copy(); lo[i] -= h
        numeric[i] = (decode(random_vae, history, hi).sum() - decode(random_vae, history, lo).sum()) / (2 * h)
    denom = np.maximum(np.abs(numeric), 1e-8)
    assert np.max(np.abs(analytic - numeric) / denom) <= 1e-6


def test_kl_identity_at_standard_normal():
    # mu = 0, log sigma = 0 gives KL(N(0,I) || N(0,I)) = 0
    mu = np.zeros((3, 5))
    log_sigma = np.zeros((3, 5))
    sigma = np.exp(log_sigma)
    kl = 0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * log_sigma)
    assert kl == 0.0


def test_train_memorizes_single_constant_window():
    dataset = tiny_dataset(n=8, constant=True, seed=6)
    vp, losses = train_vae(dataset, VaeConfig(d_z=4, hidden=(32,), beta_kl=0.0, lr=3e-3, iterations=800, batch=8, seed=1))
    assert losses[-1] < 0.05
    w = dataset.windows[0]
    mu, _ = encode(vp, w)
    recon = decode(vp, w.history, mu)
    assert np.median(np.abs(recon - w.future)) < 0.05


def test_train_deterministic():
    dataset = tiny_dataset(n=10, seed=7)
    cfg = VaeConfig(d_z=4, hidden=(16,), iterations=60, batch=6, seed=2)
    vp1, losses1 = train_vae(dataset, cfg)
    vp2, losses2 = train_vae(dataset, cfg)
    assert losses1 == losses2
    for name in vp1.params:
        np.testing.assert_array_equal(vp1.params[name], vp2.params[name])


def test_beta_zero_is_pure_autoencoder():
    # with beta_kl = 0 the loss equals the reconstruction term alone
    dataset = tiny_dataset(n=10, seed=8)
    cfg0 = VaeConfig(d_z=4, hidden=(16,), beta_kl=0.0, iterations=1, batch=6, seed=3)
    vp, losses = train_vae(dataset, cfg0)
    assert np.isfinite(losses[0])


def test_vae_checkpoint_roundtrip(tmp_path, random_vae):
    path = str(tmp_path / "vae.json")
    save_vae(path, random_vae)
    loaded = load_vae(path)
    assert loaded.config == random_vae.config
    for name in random_vae.params:
        np.testing.assert_array_equal(loaded.params[name], random_vae.params[name])
    rng = np.random.default_rng(9)
    history = rng.uniform(-0.5, 0.5, size=(T_HIST, N_JOINTS))
    z = rng.standard_normal(5)
    np.testing.assert_array_equal(decode(loaded, history, z), decode(random_vae, history, z))


def test_validation_report_fields():
    dataset = tiny_dataset(n=10, seed=10)
    vp, _ = train_vae(dataset, VaeConfig(d_z=4, hidden=(16,), iterations=30, batch=6, seed=4))
    report = validation_report(vp, dataset)
    assert set(report) == {"val_mse", "future_variance", "median_abs_err"}
    assert all(np.isfinite(v) for v in report.values())
