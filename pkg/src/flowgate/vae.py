"""Motion VAE: encoder over (history || future), decoder from (history, z).

The decoder is the differentiable bridge for guidance: cost gradients flow
z -> decoder -> FK -> costs, so its tape variant matters as much as the
fast inference path. Inputs are standardized per-dimension with train-set
statistics that travel with the checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .motion_data import MotionDataset, MotionWindow, T_FUT, T_HIST
from .nets import MlpSpec
from .tensor import (
    AdamState,
    NonFiniteError,
    ShapeError,
    Tape,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)


class TrainingDiverged(RuntimeError):
    """Non-finite training loss; carries the iteration index."""


@dataclass(frozen=True)
class VaeConfig:
    d_z: int = 16
    hidden: tuple[int, ...] = (128, 128)
    beta_kl: float = 1e-3
    lr: float = 1e-3
    iterations: int = 6000
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_z < 2:
            raise ValueError("latent dimension must be >= 2")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be >= 0")


@dataclass
class VaeParams:
    config: VaeConfig
    n_joints: int
    params: dict[str, np.ndarray]
    feat_mean: np.ndarray  # ((T_HIST+T_FUT) * n,) per-dimension stats
    feat_std: np.ndarray

    enc_spec: MlpSpec = field(init=False)
    dec_spec: MlpSpec = field(init=False)

    def __post_init__(self):
        n = self.n_joints
        self.enc_spec = MlpSpec((T_HIST + T_FUT) * n, self.config.hidden, 2 * self.config.d_z)
        self.dec_spec = MlpSpec(T_HIST * n + self.config.d_z, self.config.hidden, T_FUT * n)

    # standardization helpers ---------------------------------------------------

    @property
    def hist_mean(self) -> np.ndarray:
        return self.feat_mean[: T_HIST * self.n_joints]

    @property
    def hist_std(self) -> np.ndarray:
        return self.feat_std[: T_HIST * self.n_joints]

    @property
    def fut_mean(self) -> np.ndarray:
        return self.feat_mean[T_HIST * self.n_joints :]

    @property
    def fut_std(self) -> np.ndarray:
        return self.feat_std[T_HIST * self.n_joints :]

    def standardize_history(self, history: np.ndarray) -> np.ndarray:
        return (history.reshape(-1) - self.hist_mean) / self.hist_std

    def standardize_future(self, future: np.ndarray) -> np.ndarray:
        return (future.reshape(-1) - self.fut_mean) / self.fut_std


def init_vae(config: VaeConfig, n_joints: int, rng: np.random.Generator) -> VaeParams:
    stats_dim = (T_HIST + T_FUT) * n_joints
    vp = VaeParams(
        config=config,
        n_joints=n_joints,
        params={},
        feat_mean=np.zeros(stats_dim),
        feat_std=np.ones(stats_dim),
    )
    vp.params = {
        **nets.init_params(vp.enc_spec, rng, prefix="enc."),
        **nets.init_params(vp.dec_spec, rng, prefix="dec."),
    }
    return vp


def encode(vp: VaeParams, window: MotionWindow) -> tuple[np.ndarray, np.ndarray]:
    """(mu, log_sigma) of the latent posterior for one window."""
    feats = np.concatenate([window.history.reshape(-1), window.future.reshape(-1)])
    if feats.shape[0] != vp.enc_spec.in_dim:
        raise ShapeError(f"window features {feats.shape} do not match encoder input {vp.enc_spec.in_dim}")
    x = ((feats - vp.feat_mean) / vp.feat_std)[None, :]
    out = nets.infer(vp.params, vp.enc_spec, x, prefix="enc.")[0]
    return out[: vp.config.d_z], out[vp.config.d_z :]


def decode(vp: VaeParams, history: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Future frames (T_FUT, n) in radians; pure function of (history, z)."""
    if history.shape != (T_HIST, vp.n_joints):
        raise ShapeError(f"history must be ({T_HIST}, {vp.n_joints}), got {history.shape}")
    if z.shape != (vp.config.d_z,):
        raise ShapeError(f"latent must be ({vp.config.d_z},), got {z.shape}")
    x = np.concatenate([vp.standardize_history(history), z])[None, :]
    out = nets.infer(vp.params, vp.dec_spec, x, prefix="dec.")[0]
    return (out * vp.fut_std + vp.fut_mean).reshape(T_FUT, vp.n_joints)


def decode_tape(
    tape: Tape,
    vp: VaeParams,
    param_nodes: dict[str, int],
    history: np.ndarray,
    z_node: int,
) -> int:
    """Tape variant of decode(); `z_node` is a (1, d_z) node. Returns the
    (T_FUT, n) future-frame node in radians."""
    hist_std = tape.constant(vp.standardize_history(history)[None, :])
    x = tape.concat([hist_std, z_node], axis=1)
    out = nets.tape_forward(tape, param_nodes, vp.dec_spec, x, prefix="dec.")
    out = tape.add(
        tape.elem_mul(out, tape.constant(vp.fut_std[None, :])),
        tape.constant(vp.fut_mean[None, :]),
    )
    return tape.reshape(out, (T_FUT, vp.n_joints))


def reparameterize(mu: np.ndarray, log_sigma: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return mu + np.exp(log_sigma) * eps


def _window_features(windows: list[MotionWindow]) -> np.ndarray:
    return np.stack(
        [np.concatenate([w.history.reshape(-1), w.future.reshape(-1)]) for w in windows]
    )


def train_vae(
    dataset: MotionDataset,
    config: VaeConfig,
) -> tuple[VaeParams, list[float]]:
    """ELBO training: reconstruction MSE plus beta_kl * KL(q || N(0, I))."""
    train = dataset.train_windows
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x766165]))
    vp = init_vae(config, dataset.n_joints, rng)

    feats = _window_features(train)
    vp.feat_mean = feats.mean(axis=0)
    vp.feat_std = np.maximum(feats.std(axis=0), 1e-6)
    feats_std = (feats - vp.feat_mean) / vp.feat_std

    n_hist = T_HIST * dataset.n_joints
    d_z = config.d_z
    state = AdamState(lr=config.lr)
    losses: list[float] = []
    batch = min(config.batch, feats_std.shape[0])

    for it in range(config.iterations):
        idx = rng.integers(0, feats_std.shape[0], size=batch)
        xb = feats_std[idx]
        eps = rng.standard_normal((batch, d_z))

        tape = Tape()
        nodes = nets.leaves_for(tape, vp.params)
        x_node = tape.constant(xb)
        enc_out = nets.tape_forward(tape, nodes, vp.enc_spec, x_node, prefix="enc.")
        mu = tape.slice(enc_out, 1, 0, d_z)
        log_sigma = tape.slice(enc_out, 1, d_z, 2 * d_z)
        sigma = tape.exp(log_sigma)
        z = tape.add(mu, tape.elem_mul(sigma, tape.constant(eps)))

        dec_in = tape.concat([tape.constant(xb[:, :n_hist]), z], axis=1)
        recon = nets.tape_forward(tape, nodes, vp.dec_spec, dec_in, prefix="dec.")
        target = tape.constant(xb[:, n_hist:])
        recon_loss = tape.mean(tape.square(tape.sub(recon, target)))

        # KL(q || N(0,I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma), mean over batch
        kl_terms = tape.sub(
            tape.add(tape.square(mu), tape.square(sigma)),
            tape.add(tape.constant(np.ones((batch, d_z))), tape.scalar_mul(log_sigma, 2.0)),
        )
        loss = tape.add(
            recon_loss,
            tape.scalar_mul(tape.sum(kl_terms), 0.5 * config.beta_kl / batch),
        )

        try:
            loss_val = float(tape.value(loss))
            grads_by_node = tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"VAE loss non-finite at iteration {it}: {exc}") from exc
        grads = {name: grads_by_node[node] for name, node in nodes.items()}
        vp.params = adam_step(vp.params, grads, state)
        losses.append(loss_val)

    return vp, losses


def validation_report(vp: VaeParams, dataset: MotionDataset) -> dict[str, float]:
    """Round-trip quality of Dec(history, mu) on the validation split."""
    windows = dataset.val_windows or dataset.train_windows
    sq_err = []
    abs_err = []
    fut_all = []
    for w in windows:
        mu, _ = encode(vp, w)
        recon = decode(vp, w.history, mu)
        sq_err.append(np.mean((recon - w.future) ** 2))
        abs_err.append(np.abs(recon - w.future))
        fut_all.append(w.future)
    fut = np.stack(fut_all)
    return {
        "val_mse": float(np.mean(sq_err)),
        "future_variance": float(fut.var()),
        "median_abs_err": float(np.median(np.stack(abs_err))),
    }


# -- checkpoint ------------------------------------------------------------------


def save_vae(path: str, vp: VaeParams) -> None:
    tensors = dict(vp.params)
    tensors["feat_mean"] = vp.feat_mean
    tensors["feat_std"] = vp.feat_std
    meta = {
        "kind": "vae",
        "n_joints": vp.n_joints,
        "config": {
            "d_z": vp.config.d_z,
            "hidden": list(vp.config.hidden),
            "beta_kl": vp.config.beta_kl,
            "lr": vp.config.lr,
            "iterations": vp.config.iterations,
            "batch": vp.config.batch,
            "seed": vp.config.seed,
        },
    }
    save_checkpoint(path, tensors, meta)


def load_vae(path: str) -> VaeParams:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"checkpoint {path!r} is not a VAE checkpoint")
    cfg = meta["config"]
    config = VaeConfig(
        d_z=cfg["d_z"],
        hidden=tuple(cfg["hidden"]),
        beta_kl=cfg["beta_kl"],
        lr=cfg["lr"],
        iterations=cfg["iterations"],
        batch=cfg["batch"],
        seed=cfg["seed"],
    )
    feat_mean = tensors.pop("feat_mean")
    feat_std = tensors.pop("feat_std")
    return VaeParams(
        config=config,
        n_joints=meta["n_joints"],
        params=tensors,
        feat_mean=feat_mean,
        feat_std=feat_std,
    )
