"""Text-conditioned rectified flow in the VAE latent space.

Covers the four lifecycle stages: flow-matching training on linear
interpolation paths, Euler ODE sampling with classifier-free guidance,
physics-guided sampling (cost gradient subtracted from the velocity), and
reflow distillation onto (noise, guided-endpoint) pairs for single-step
generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .costs import CostWeights, GuidanceSchedule, grad_wrt_latent
from .kinematics import ChainModel
from .motion_data import MotionDataset, T_HIST
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
from .vae import TrainingDiverged, VaeParams, encode, reparameterize


@dataclass(frozen=True)
class CfgSchedule:
    """Classifier-free guidance weight, linear in integration time u."""

    w_start: float = 5.0
    w_end: float = 3.0

    def __post_init__(self):
        if self.w_start < 0 or self.w_end < 0:
            raise ValueError("CFG weights must be >= 0")

    def weight(self, u: float) -> float:
        return self.w_start + (self.w_end - self.w_start) * u


@dataclass(frozen=True)
class SamplerConfig:
    """NFE, seed, and conditioning mode for one ODE integration.

    cfg=None evaluates only the conditional branch (one field call per
    step) -- the mode used by the distilled single-step student.
    """

    nfe: int = 10
    seed: int = 0
    cfg: CfgSchedule | None = field(default_factory=CfgSchedule)
    guidance: GuidanceSchedule | None = None
    probe_points: tuple[float, ...] = ()

    def __post_init__(self):
        if not 1 <= self.nfe <= 512:
            raise ValueError("nfe must be in 1..512")


@dataclass(frozen=True)
class FlowConfig:
    hidden: tuple[int, ...] = (128, 128)
    hist_dim: int = 16
    lr: float = 1e-3
    iterations: int = 20000
    batch: int = 64
    p_drop: float = 0.1
    seed: int = 0


@dataclass
class VelocityFieldParams:
    """MLP velocity field over [z || u || enc(history) || e]."""

    d_z: int
    d_e: int
    hist_in: int  # flattened history dim (T_HIST * n_joints)
    hist_dim: int
    hidden: tuple[int, ...]
    params: dict[str, np.ndarray]
    role: str = "base"  # base | teacher | student

    spec: MlpSpec = field(init=False)

    def __post_init__(self):
        self.spec = MlpSpec(self.d_z + 1 + self.hist_dim + self.d_e, self.hidden, self.d_z)

    def encode_history(self, hist_flat: np.ndarray) -> np.ndarray:
        # small linear encoder; 2-D in, 2-D out
        return np.einsum("ij,jk->ik", hist_flat, self.params["hist.W"]) + self.params["hist.b"]


def init_field(
    d_z: int,
    d_e: int,
    hist_in: int,
    config: FlowConfig,
    rng: np.random.Generator,
    role: str = "base",
) -> VelocityFieldParams:
    vf = VelocityFieldParams(
        d_z=d_z, d_e=d_e, hist_in=hist_in, hist_dim=config.hist_dim, hidden=config.hidden,
        params={}, role=role,
    )
    vf.params = nets.init_params(vf.spec, rng, prefix="v.")
    vf.params["hist.W"] = rng.standard_normal((hist_in, config.hist_dim)) / np.sqrt(hist_in)
    vf.params["hist.b"] = np.zeros(config.hist_dim)
    return vf


def field_eval(
    vf: VelocityFieldParams,
    z: np.ndarray,
    u: float,
    hist_flat: np.ndarray,
    e: np.ndarray,
) -> np.ndarray:
    """Batched velocity v(z, u | history, e) for (B, d_z) latents.

    Uses the batch-size-invariant inference path: a batch evaluation is
    bit-identical to evaluating rows one at a time.
    """
    if z.ndim != 2 or z.shape[1] != vf.d_z:
        raise ShapeError(f"latents must be (B, {vf.d_z}), got {z.shape}")
    b = z.shape[0]
    h_enc = vf.encode_history(np.broadcast_to(hist_flat, (b, vf.hist_in)))
    u_col = np.full((b, 1), float(u))
    e_rows = np.broadcast_to(e, (b, vf.d_e))
    x = np.concatenate([z, u_col, h_enc, e_rows], axis=1)
    return nets.infer(vf.params, vf.spec, x, prefix="v.")


class EvalCounter:
    """Counts velocity-field evaluations and guidance backward passes."""

    def __init__(self):
        self.field_evals = 0
        self.guidance_backwards = 0


def cfg_velocity(
    vf: VelocityFieldParams,
    z: np.ndarray,
    u: float,
    hist_flat: np.ndarray,
    e: np.ndarray,
    cfg: CfgSchedule | None,
    counter: EvalCounter | None = None,
) -> np.ndarray:
    """Composite CFG velocity v_u + w(u) * (v_c - v_u); cfg=None gives the
    bare conditional velocity with a single evaluation."""
    if cfg is None:
        if counter is not None:
            counter.field_evals += 1
        return field_eval(vf, z, u, hist_flat, e)
    v_cond = field_eval(vf, z, u, hist_flat, e)
    v_uncond = field_eval(vf, z, u, hist_flat, np.zeros(vf.d_e))
    if counter is not None:
        counter.field_evals += 2
    return v_uncond + cfg.weight(u) * (v_cond - v_uncond)


@dataclass
class SampleResult:
    z1: np.ndarray
    z0: np.ndarray
    field_evals: int
    guidance_backwards: int
    probe_states: list[tuple[float, np.ndarray]]


class SamplingError(RuntimeError):
    """Non-finite state or gradient mid-integration; carries the step index."""


def sample(
    vf: VelocityFieldParams,
    history: np.ndarray,
    e: np.ndarray,
    cfg: SamplerConfig,
) -> SampleResult:
    """Euler integration of dz/du = v from u=0 (seeded noise) to u=1."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x73616D70]))
    z = rng.standard_normal(vf.d_z)[None, :]
    return _integrate(vf, z, history, e, cfg, vae=None, chain=None, weights=None)


def guided_sample(
    vf: VelocityFieldParams,
    vae: VaeParams,
    chain: ChainModel,
    history: np.ndarray,
    e: np.ndarray,
    cfg: SamplerConfig,
    weights: CostWeights,
) -> SampleResult:
    """sample() with the clamped, scaled cost gradient subtracted from the
    composite velocity at every Euler step (requires cfg.guidance)."""
    if cfg.guidance is None:
        raise ValueError("guided_sample needs a GuidanceSchedule in the sampler config")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x73616D70]))
    z = rng.standard_normal(vf.d_z)[None, :]
    return _integrate(vf, z, history, e, cfg, vae=vae, chain=chain, weights=weights)


def _integrate(
    vf: VelocityFieldParams,
    z: np.ndarray,
    history: np.ndarray,
    e: np.ndarray,
    cfg: SamplerConfig,
    vae: VaeParams | None,
    chain: ChainModel | None,
    weights: CostWeights | None,
) -> SampleResult:
    hist_flat = history.reshape(1, -1)
    counter = EvalCounter()
    z0 = z[0].copy()
    dt = 1.0 / cfg.nfe
    probe_states: list[tuple[float, np.ndarray]] = []
    wanted = set(float(p) for p in cfg.probe_points)
    for i in range(cfg.nfe):
        u = i * dt
        if any(abs(u - p) < 1e-12 for p in wanted):
            probe_states.append((u, z[0].copy()))
        vel = cfg_velocity(vf, z, u, hist_flat, e, cfg.cfg, counter)
        if cfg.guidance is not None:
            if vae is None or chain is None or weights is None:
                raise ValueError("guidance requires decoder, chain, and cost weights")
            try:
                grad, _ = grad_wrt_latent(z[0], history, vae, chain, weights)
            except NonFiniteError as exc:
                raise SamplingError(f"guidance gradient failed at step {i}: {exc}") from exc
            counter.guidance_backwards += 1
            clamped = np.clip(grad, -cfg.guidance.clamp, cfg.guidance.clamp)
            vel = vel - cfg.guidance.alpha(u) * clamped[None, :]
        z = z + dt * vel
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite latent after Euler step {i}")
    return SampleResult(
        z1=z[0],
        z0=z0,
        field_evals=counter.field_evals,
        guidance_backwards=counter.guidance_backwards,
        probe_states=probe_states,
    )


# -- training ---------------------------------------------------------------------


@dataclass
class RfmBatch:
    """One flow-matching minibatch on the linear interpolation path."""

    z_u: np.ndarray
    u: np.ndarray  # (B, 1)
    target: np.ndarray  # z1 - z0
    hist_flat: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        # path identity: z_u = u z1 + (1-u) z0 reaches the endpoints exactly
        if self.z_u.shape != self.target.shape:
            raise ShapeError("z_u and target must align")


def make_rfm_batch(
    z1: np.ndarray,
    z0: np.ndarray,
    u: np.ndarray,
    hist_flat: np.ndarray,
    e: np.ndarray,
) -> RfmBatch:
    z_u = u * z1 + (1.0 - u) * z0
    return RfmBatch(z_u=z_u, u=u, target=z1 - z0, hist_flat=hist_flat, e=e)


def rfm_loss(vf: VelocityFieldParams, batch: RfmBatch) -> float:
    """Mean squared error between v(z_u, u | .) and the constant path velocity."""
    b = batch.z_u.shape[0]
    h_enc = vf.encode_history(batch.hist_flat)
    x = np.concatenate([batch.z_u, batch.u, h_enc, batch.e], axis=1)
    v = nets.infer(vf.params, vf.spec, x, prefix="v.")
    return float(np.mean((v - batch.target) ** 2))


def _loss_tape(vf: VelocityFieldParams, batch: RfmBatch) -> tuple[Tape, dict[str, int], int]:
    tape = Tape()
    nodes = nets.leaves_for(tape, vf.params)
    b = batch.z_u.shape[0]
    hist = tape.constant(batch.hist_flat)
    ones = tape.constant(np.ones((b, 1)))
    h_enc = tape.add(
        tape.matmul(hist, nodes["hist.W"]),
        tape.matmul(ones, tape.reshape(nodes["hist.b"], (1, vf.hist_dim))),
    )
    x = tape.concat([tape.constant(batch.z_u), tape.constant(batch.u), h_enc, tape.constant(batch.e)], axis=1)
    v = nets.tape_forward(tape, nodes, vf.spec, x, prefix="v.")
    loss = tape.mean(tape.square(tape.sub(v, tape.constant(batch.target))))
    return tape, nodes, loss


def _adam_iteration(
    vf: VelocityFieldParams, batch: RfmBatch, state: AdamState, it: int
) -> float:
    tape, nodes, loss = _loss_tape(vf, batch)
    try:
        loss_val = float(tape.value(loss))
        grads_by_node = tape.backward(loss)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"flow loss non-finite at iteration {it}: {exc}") from exc
    grads = {name: grads_by_node[node] for name, node in nodes.items()}
    vf.params = adam_step(vf.params, grads, state)
    return loss_val


def train_flow(
    dataset: MotionDataset,
    vae: VaeParams,
    config: FlowConfig,
) -> tuple[VelocityFieldParams, list[float]]:
    """Rectified-flow-matching training against the frozen VAE posterior.

    Prompt dropout replaces the text embedding with the zero vector (the
    null condition) so CFG has an unconditional branch to lean on.
    """
    train = dataset.train_windows
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x666C6F77]))
    d_e = train[0].embedding.shape[0]
    hist_in = T_HIST * dataset.n_joints
    vf = init_field(vae.config.d_z, d_e, hist_in, config, rng, role="base")

    # precompute posterior stats and conditioning rows once
    mus = np.stack([encode(vae, w)[0] for w in train])
    log_sigmas = np.stack([encode(vae, w)[1] for w in train])
    hists = np.stack([w.history.reshape(-1) for w in train])
    embeds = np.stack([w.embedding for w in train])

    state = AdamState(lr=config.lr)
    losses: list[float] = []
    batch = min(config.batch, len(train))
    d_z = vae.config.d_z
    for it in range(config.iterations):
        idx = rng.integers(0, len(train), size=batch)
        eps = rng.standard_normal((batch, d_z))
        z1 = reparameterize(mus[idx], log_sigmas[idx], eps)
        z0 = rng.standard_normal((batch, d_z))
        u = rng.random((batch, 1))
        e = embeds[idx].copy()
        drop = rng.random(batch) < config.p_drop
        e[drop] = 0.0
        rfm = make_rfm_batch(z1, z0, u, hists[idx], e)
        losses.append(_adam_iteration(vf, rfm, state, it))
    return vf, losses


# -- reflow distillation ------------------------------------------------------------


@dataclass(frozen=True)
class ReflowConfig:
    n_pairs: int = 8000
    teacher_nfe: int = 10
    lr: float = 1e-3
    lr_end: float = 3e-5
    iterations: int = 40000
    batch: int = 64
    seed: int = 0


@dataclass
class ReflowPairSet:
    """(z0, guided z1, history, embedding) tuples produced by the teacher's
    guided integration -- never by encoding data."""

    z0: np.ndarray
    z1_guided: np.ndarray
    hist_flat: np.ndarray
    e: np.ndarray

    def __len__(self) -> int:
        return self.z0.shape[0]


def generate_reflow_pairs(
    teacher: VelocityFieldParams,
    vae: VaeParams,
    chain: ChainModel,
    dataset: MotionDataset,
    config: ReflowConfig,
    weights: CostWeights,
    guidance: GuidanceSchedule,
    cfg_schedule: CfgSchedule,
) -> ReflowPairSet:
    """Run the guided teacher at its sampling NFE over training-set
    conditioning drawn uniformly, with fresh noise per pair."""
    train = dataset.train_windows
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7265666C]))
    z0s, z1s, hists, es = [], [], [], []
    for k in range(config.n_pairs):
        w = train[int(rng.integers(len(train)))]
        pair_seed = int(rng.integers(2**31 - 1))
        sampler = SamplerConfig(
            nfe=config.teacher_nfe, seed=pair_seed, cfg=cfg_schedule, guidance=guidance
        )
        result = guided_sample(teacher, vae, chain, w.history, w.embedding, sampler, weights)
        z0s.append(result.z0)
        z1s.append(result.z1)
        hists.append(w.history.reshape(-1))
        es.append(w.embedding)
    return ReflowPairSet(
        z0=np.stack(z0s), z1_guided=np.stack(z1s), hist_flat=np.stack(hists), e=np.stack(es)
    )


def train_student(
    teacher: VelocityFieldParams,
    pairs: ReflowPairSet,
    config: ReflowConfig,
) -> tuple[VelocityFieldParams, list[float]]:
    """Distill the straight (z0 -> z1_guided) paths into a student field,
    initialized from the teacher weights.

    Training batches sit at u = 0: single-step deployment only ever
    evaluates the field there, and on a straight path the target velocity
    is the same constant at every u anyway. The learning rate decays
    linearly, which settles the fit of the fairly rough guided-endpoint
    map.
    """
    if len(pairs) == 0:
        raise ValueError("empty reflow pair set")
    student = VelocityFieldParams(
        d_z=teacher.d_z,
        d_e=teacher.d_e,
        hist_in=teacher.hist_in,
        hist_dim=teacher.hist_dim,
        hidden=teacher.hidden,
        params={k: v.copy() for k, v in teacher.params.items()},
        role="student",
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x73747564]))
    state = AdamState(lr=config.lr)
    losses: list[float] = []
    batch = min(config.batch, len(pairs))
    u0 = np.zeros((batch, 1))
    for it in range(config.iterations):
        frac = it / max(1, config.iterations)
        state.lr = config.lr * (1.0 - frac) + config.lr_end * frac
        idx = rng.integers(0, len(pairs), size=batch)
        rfm = make_rfm_batch(
            pairs.z1_guided[idx], pairs.z0[idx], u0, pairs.hist_flat[idx], pairs.e[idx]
        )
        losses.append(_adam_iteration(student, rfm, state, it))
    return student, losses


# -- checkpoint ---------------------------------------------------------------------


def save_field(path: str, vf: VelocityFieldParams) -> None:
    meta = {
        "kind": "velocity_field",
        "role": vf.role,
        "d_z": vf.d_z,
        "d_e": vf.d_e,
        "hist_in": vf.hist_in,
        "hist_dim": vf.hist_dim,
        "hidden": list(vf.hidden),
    }
    save_checkpoint(path, vf.params, meta)


def load_field(path: str) -> VelocityFieldParams:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "velocity_field":
        raise ValueError(f"checkpoint {path!r} is not a velocity-field checkpoint")
    return VelocityFieldParams(
        d_z=meta["d_z"],
        d_e=meta["d_e"],
        hist_in=meta["hist_in"],
        hist_dim=meta["hist_dim"],
        hidden=tuple(meta["hidden"]),
        params=tensors,
        role=meta.get("role", "base"),
    )
