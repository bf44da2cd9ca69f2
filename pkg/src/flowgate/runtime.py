"""Pipeline runtime: trained-artifact bundle, the guarded streaming loop,
and the evaluation protocols behind the CLI commands.

The streaming loop follows the deployment cadence: a new reference window
is generated every `replan_frames` reference frames (6.25 Hz at 25 fps),
gated, and handed to the 50 Hz tracker; any rejection swaps in the safe
fallback, which overrides the prompt stream with "stand" until it
finishes and a fresh prompt arrives.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import flow as flow_mod
from . import gate as gate_mod
from . import motion_data as data_mod
from . import tracker as tracker_mod
from . import vae as vae_mod
from .config import RunConfig
from .costs import CostWeights, GuidanceSchedule
from .gate import (
    FallbackState,
    GateDecision,
    InstabilityProbe,
    SemanticGate,
    fallback_step,
    instability_score,
    stage1,
    stage2,
    stage3,
)
from .kinematics import ChainModel, JointTrajectory
from .motion_data import MotionDataset, PromptEmbedder, T_FUT, T_HIST
from .tracker import EpisodeReport, TrackerState, compute_metrics, jv_sc_rates, tracker_step, upsample_reference


class MissingArtifact(RuntimeError):
    """A command needs a checkpoint that has not been produced yet."""


ARTIFACTS = {
    "dataset": "dataset.json",
    "vae": "vae.json",
    "flow": "flow.json",
    "student": "student.json",
    "gates": "gates.json",
}


@dataclass
class Bundle:
    """Everything a guarded generation step needs, loaded once."""

    config: RunConfig
    chain: ChainModel
    embedder: PromptEmbedder
    dataset: MotionDataset | None = None
    vae: vae_mod.VaeParams | None = None
    base_field: flow_mod.VelocityFieldParams | None = None
    student: flow_mod.VelocityFieldParams | None = None
    sem_gate: SemanticGate | None = None
    probe: InstabilityProbe | None = None

    @property
    def weights(self) -> CostWeights:
        return self.config.costs.build()

    @property
    def guidance(self) -> GuidanceSchedule:
        return self.config.guidance.build()

    @property
    def cfg_schedule(self) -> flow_mod.CfgSchedule:
        return self.config.flow.cfg_schedule()

    def field_for(self, variant: str) -> flow_mod.VelocityFieldParams:
        if variant in ("base", "teacher"):
            if self.base_field is None:
                raise MissingArtifact("flow checkpoint not loaded")
            return self.base_field
        if variant == "student":
            if self.student is None:
                raise MissingArtifact("student checkpoint not loaded")
            return self.student
        raise ValueError(f"unknown variant {variant!r}")

    def dataset_frame_dt(self) -> float:
        return self.config.dataset.frame_dt

    def sampler_for(self, variant: str, seed: int) -> flow_mod.SamplerConfig:
        teacher_nfe = self.config.reflow.teacher_nfe
        if variant == "base":
            return flow_mod.SamplerConfig(
                nfe=teacher_nfe, seed=seed, cfg=self.cfg_schedule, probe_points=(0.0, 0.5)
            )
        if variant == "teacher":
            return flow_mod.SamplerConfig(
                nfe=teacher_nfe, seed=seed, cfg=self.cfg_schedule,
                guidance=self.guidance, probe_points=(0.0, 0.5),
            )
        if variant == "student":
            return flow_mod.SamplerConfig(nfe=1, seed=seed, cfg=None, probe_points=(0.0,))
        raise ValueError(f"unknown variant {variant!r}")


def artifact_path(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, ARTIFACTS[name])


def load_bundle(config: RunConfig, need: Sequence[str]) -> Bundle:
    """Load the requested artifacts from the configured output directory."""
    out = config.run.out
    bundle = Bundle(
        config=config,
        chain=config.build_chain(),
        embedder=PromptEmbedder(
            seed=config.embedder.seed, n_buckets=config.embedder.buckets, dim=config.embedder.dim
        ),
    )
    for name in need:
        path = artifact_path(out, name)
        if not os.path.exists(path):
            raise MissingArtifact(f"missing artifact {path!r}; run the producing command first")
        if name == "dataset":
            bundle.dataset = data_mod.load_dataset(path)
        elif name == "vae":
            bundle.vae = vae_mod.load_vae(path)
        elif name == "flow":
            bundle.base_field = flow_mod.load_field(path)
        elif name == "student":
            bundle.student = flow_mod.load_field(path)
        elif name == "gates":
            bundle.sem_gate, bundle.probe = gate_mod.load_gates(path)
    return bundle


# -- guarded generation ------------------------------------------------------------


@dataclass
class WindowOutcome:
    """One guarded generation attempt for a (history, prompt) pair."""

    accepted: bool
    frames: np.ndarray | None
    decisions: list[GateDecision]
    r_score: float | None
    latent: np.ndarray | None
    rejected_frames: np.ndarray | None = None
    timings: dict[str, float] = field(default_factory=dict)


def bound_field(
    bundle: Bundle, variant: str, history: np.ndarray, e: np.ndarray
) -> Callable[[float], gate_mod.FieldFn]:
    """field_at(u) with the exact conditioning the sampler used."""
    vf = bundle.field_for(variant)
    hist_flat = history.reshape(1, -1)
    cfg = None if variant == "student" else bundle.cfg_schedule

    def field_at(u: float) -> gate_mod.FieldFn:
        return lambda rows: flow_mod.cfg_velocity(vf, rows, u, hist_flat, e, cfg)

    return field_at


def generate_window(
    bundle: Bundle,
    history: np.ndarray,
    prompt: str,
    *,
    variant: str = "student",
    seed: int = 0,
    gates_on: bool = True,
    t: float = 0.0,
    collect_timings: bool = False,
) -> WindowOutcome:
    """Embed, gate, sample, decode, screen: the full §-loop for one window."""
    if bundle.vae is None:
        raise MissingArtifact("VAE checkpoint not loaded")
    decisions: list[GateDecision] = []
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    e = bundle.embedder.embed(prompt)
    timings["embed"] = time.perf_counter() - t0

    if gates_on:
        if bundle.sem_gate is None or bundle.probe is None:
            raise MissingArtifact("gate calibration not loaded")
        t0 = time.perf_counter()
        d1 = stage1(bundle.sem_gate, e, t=t)
        timings["stage1"] = time.perf_counter() - t0
        decisions.append(d1)
        if not d1.accept:
            return WindowOutcome(False, None, decisions, None, None, timings=timings)

    sampler = bundle.sampler_for(variant, seed)
    t0 = time.perf_counter()
    if variant == "teacher":
        result = flow_mod.guided_sample(
            bundle.field_for(variant), bundle.vae, bundle.chain, history, e, sampler, bundle.weights
        )
    else:
        result = flow_mod.sample(bundle.field_for(variant), history, e, sampler)
    frames = vae_mod.decode(bundle.vae, history, result.z1)
    timings["generate"] = time.perf_counter() - t0

    r_score: float | None = None
    if gates_on:
        t0 = time.perf_counter()
        d2 = stage2(
            bound_field(bundle, variant, history, e),
            result.probe_states,
            bundle.probe,
            probe_seed=seed,
            t=t,
        )
        timings["stage2"] = time.perf_counter() - t0
        r_score = d2.score
        decisions.append(d2)
        if not d2.accept:
            return WindowOutcome(False, None, decisions, r_score, result.z1,
                                 rejected_frames=frames, timings=timings)
        t0 = time.perf_counter()
        d3 = stage3(
            JointTrajectory(np.vstack([history, frames]), bundle.dataset_frame_dt()),
            bundle.chain,
            t=t,
        )
        timings["stage3"] = time.perf_counter() - t0
        decisions.append(d3)
        if not d3.accept:
            return WindowOutcome(False, None, decisions, r_score, result.z1,
                                 rejected_frames=frames, timings=timings)
    return WindowOutcome(True, frames, decisions, r_score, result.z1, timings=timings)


# -- streaming episode --------------------------------------------------------------


@dataclass
class PromptEvent:
    frame: int
    prompt: str


@dataclass
class EpisodeTrace:
    """Raw per-frame record of one streaming episode (25 fps reference clock)."""

    reference: list[np.ndarray] = field(default_factory=list)
    executed_ticks: list[np.ndarray] = field(default_factory=list)
    reference_ticks: list[np.ndarray] = field(default_factory=list)
    window_r: list[float] = field(default_factory=list)
    decisions: list[GateDecision] = field(default_factory=list)
    fallbacks: int = 0
    failure_frame: int | None = None
    frame_sources: list[str] = field(default_factory=list)  # generator | fallback

    # callbacks for live modes (stream/serve)
    on_frame: Callable[[int, np.ndarray, np.ndarray, str], None] | None = None
    on_decision: Callable[[GateDecision], None] | None = None
    on_fallback: Callable[[float], None] | None = None


class EpisodeRunner:
    """Incremental streaming loop: one reference frame per step, replanning
    on the generator cadence, with fallback handling and 50 Hz tracking.

    Failure is a tracking error beyond 1.5 rad on any joint at any tick
    (or a non-finite state); metrics follow the common-prefix convention.
    `inject(window_index, frames)` may substitute a generated window with
    an adversarial one (the fallback-safety study uses it).
    """

    TRACKING_THRESHOLD = 1.5  # rad; far above normal error, below wrap-around

    def __init__(
        self,
        bundle: Bundle,
        *,
        variant: str = "student",
        gates_on: bool = True,
        seed: int = 0,
        inject: Callable[[int, np.ndarray | None], np.ndarray | None] | None = None,
        trace: EpisodeTrace | None = None,
    ):
        self.bundle = bundle
        self.variant = variant
        self.gates_on = gates_on
        self.inject = inject
        self.trace = trace if trace is not None else EpisodeTrace()
        cfg = bundle.config
        self.frame_dt = cfg.dataset.frame_dt
        self.control_dt = cfg.tracker.control_dt
        self.replan = cfg.run.replan_frames
        self.fallback_duration = cfg.run.fallback_duration
        self.chain = bundle.chain
        self.tracker_cfg = cfg.tracker.build()
        self.nominal = np.zeros(self.chain.n_joints)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x657069]))
        self.state = TrackerState.at_rest(self.nominal)
        self.history = np.tile(self.nominal, (T_HIST, 1))
        self.active_prompt = "stand"
        self.queued_prompt: str | None = None
        self.fallback: FallbackState | None = None
        self.pending: list[np.ndarray] = []
        self.window_index = 0
        self.frame_idx = 0
        self.failed = False

    def set_prompt(self, prompt: str) -> None:
        if self.fallback is not None:
            # mid-fallback commands queue and take over once the fallback
            # completes; the override stays "stand" until then
            self.queued_prompt = prompt
        else:
            self.active_prompt = prompt

    def _replan(self) -> None:
        window_seed = int(self.rng.integers(2**31 - 1))
        outcome = generate_window(
            self.bundle, self.history, self.active_prompt,
            variant=self.variant, seed=window_seed, gates_on=self.gates_on,
            t=self.frame_idx * self.frame_dt,
        )
        frames = outcome.frames
        if self.inject is not None:
            injected = self.inject(self.window_index, frames)
            if injected is not None:
                frames = injected
                if self.gates_on:
                    verdict = stage3(
                        JointTrajectory(np.vstack([self.history, frames]), self.frame_dt),
                        self.chain, t=self.frame_idx * self.frame_dt,
                    )
                    outcome.decisions.append(verdict)
                    accepted = verdict.accept
                else:
                    accepted = True
                outcome = WindowOutcome(
                    accepted, frames if accepted else None,
                    outcome.decisions, outcome.r_score, outcome.latent,
                )
        self.trace.decisions.extend(outcome.decisions)
        if self.trace.on_decision is not None:
            for decision in outcome.decisions:
                self.trace.on_decision(decision)
        if outcome.r_score is not None:
            self.trace.window_r.append(outcome.r_score)
        if outcome.accepted and outcome.frames is not None:
            self.pending = list(outcome.frames[: self.replan])
        else:
            self.trace.fallbacks += 1
            last_pose = self.trace.reference[-1] if self.trace.reference else self.nominal.copy()
            self.fallback = FallbackState(
                start_pose=np.asarray(last_pose, dtype=float).copy(),
                nominal_pose=self.nominal.copy(),
                duration_s=self.fallback_duration,
                frame_dt=self.frame_dt,
                vel_limit=np.asarray(self.chain.vel_limit),
            )
            self.pending = []
            if self.trace.on_fallback is not None:
                self.trace.on_fallback(self.fallback.n_frames * self.frame_dt)
        self.window_index += 1

    def step_frame(self) -> None:
        """Advance by one reference frame (and its tracker ticks)."""
        if self.frame_idx % self.replan == 0 and self.fallback is None:
            self._replan()

        if self.fallback is not None:
            ref_frame, override = fallback_step(self.fallback)
            self.active_prompt = override
            source = "fallback"
            if not self.fallback.active:
                # fallback complete: adopt any command that arrived in the
                # meantime, otherwise keep standing; generation resumes on
                # the next replan tick
                self.fallback = None
                if self.queued_prompt is not None:
                    self.active_prompt = self.queued_prompt
                    self.queued_prompt = None
        elif self.pending:
            ref_frame = self.pending.pop(0)
            source = "generator"
        else:
            ref_frame = self.trace.reference[-1] if self.trace.reference else self.nominal.copy()
            source = "generator"

        trace = self.trace
        prev_ref = trace.reference[-1] if trace.reference else self.history[-1]
        ref_frame = np.asarray(ref_frame, dtype=float)
        trace.reference.append(ref_frame)
        trace.frame_sources.append(source)

        seg = np.vstack([prev_ref, ref_frame])
        q_ticks, qd_ticks = upsample_reference(seg, self.frame_dt, self.control_dt)
        for q_ref, qd_ref in zip(q_ticks, qd_ticks):
            try:
                self.state = tracker_step(self.tracker_cfg, self.chain, self.state, q_ref, qd_ref)
            except Exception:
                self.failed = True
            trace.reference_ticks.append(q_ref)
            trace.executed_ticks.append(self.state.q.copy())
            if not self.failed and np.any(np.abs(self.state.q - q_ref) >= self.TRACKING_THRESHOLD):
                self.failed = True
            if self.failed and trace.failure_frame is None:
                trace.failure_frame = self.frame_idx
        if trace.on_frame is not None:
            trace.on_frame(self.frame_idx, ref_frame, self.state.q.copy(), source)
        self.history = np.vstack([self.history[1:], ref_frame])
        self.frame_idx += 1

    def advance(self, n_frames: int) -> None:
        for _ in range(n_frames):
            self.step_frame()

    def finish(self) -> EpisodeReport:
        return summarize_episode(self.bundle, self.trace, self.frame_idx)


def run_episode(
    bundle: Bundle,
    prompt_events: Sequence[PromptEvent],
    n_frames: int,
    *,
    variant: str = "student",
    gates_on: bool = True,
    seed: int = 0,
    inject: Callable[[int, np.ndarray | None], np.ndarray | None] | None = None,
    trace: EpisodeTrace | None = None,
) -> EpisodeReport:
    """Stream a prompt schedule through the guarded generator and track it."""
    runner = EpisodeRunner(
        bundle, variant=variant, gates_on=gates_on, seed=seed, inject=inject, trace=trace
    )
    events = sorted(prompt_events, key=lambda ev: ev.frame)
    for frame_idx in range(n_frames):
        while events and events[0].frame <= frame_idx:
            runner.set_prompt(events.pop(0).prompt)
        runner.step_frame()
    return runner.finish()


def summarize_episode(bundle: Bundle, trace: EpisodeTrace, n_frames: int) -> EpisodeReport:
    chain = bundle.chain
    control_dt = bundle.config.tracker.control_dt
    frame_dt = bundle.config.dataset.frame_dt
    ticks_per_frame = int(round(frame_dt / control_dt))

    cut = trace.failure_frame if trace.failure_frame is not None else len(trace.reference)
    ref_frames = np.stack(trace.reference[:cut]) if cut else np.zeros((0, chain.n_joints))
    # executed poses sampled at the reference frame boundaries: derivative
    # metrics at 25 fps, where the reference accelerations are meaningful
    boundary = [ticks_per_frame * (k + 1) - 1 for k in range(cut)]
    exe_frames = (
        np.stack([trace.executed_ticks[i] for i in boundary]) if cut else ref_frames
    )

    jv, sc = jv_sc_rates(ref_frames, chain)
    if ref_frames.shape[0] >= 3:
        mpjpe, e_vel, e_acc = compute_metrics(ref_frames, exe_frames, chain, frame_dt)
    else:
        mpjpe = e_vel = e_acc = 0.0
    return EpisodeReport(
        success=trace.failure_frame is None,
        failure_frame=trace.failure_frame,
        jv_rate=jv,
        sc_rate=sc,
        mpjpe_mm=mpjpe,
        e_vel=e_vel,
        e_acc=e_acc,
        r_scores=list(trace.window_r),
        gate_log=[
            {"stage": d.stage, "accept": d.accept, "score": d.score, "reason": d.reason, "t": d.t}
            for d in trace.decisions
        ],
        n_reference_frames=len(trace.reference),
        n_fallbacks=trace.fallbacks,
    )


# -- per-window evaluation helpers ----------------------------------------------------


def track_window(
    bundle: Bundle, history: np.ndarray, frames: np.ndarray
) -> tuple[float, float, float, bool]:
    """Track one reference window with a warm-started tracker; returns
    (mpjpe, e_vel, e_acc, success)."""
    chain = bundle.chain
    cfg = bundle.config
    tracker_cfg = cfg.tracker.build()
    frame_dt = cfg.dataset.frame_dt
    q_ticks, qd_ticks = upsample_reference(
        np.vstack([history[-1:], frames]), frame_dt, tracker_cfg.control_dt
    )
    start = np.clip(history[-1], chain.joint_min, chain.joint_max)
    qd0 = np.clip(
        (frames[0] - history[-1]) / frame_dt,
        -np.asarray(chain.vel_limit), np.asarray(chain.vel_limit),
    )
    state = TrackerState(q=start.copy(), qd=qd0)
    executed = []
    success = True
    for q_ref, qd_ref in zip(q_ticks, qd_ticks):
        state = tracker_step(tracker_cfg, chain, state, q_ref, qd_ref)
        executed.append(state.q.copy())
        if np.any(np.abs(state.q - q_ref) >= 1.5):
            success = False
    # derivative metrics at the reference frame rate (executed sampled at
    # the frame boundaries)
    ratio = int(round(frame_dt / tracker_cfg.control_dt))
    boundary = list(range(ratio - 1, len(executed), ratio))
    exe_frames = np.stack([executed[i] for i in boundary])
    mpjpe, e_vel, e_acc = compute_metrics(frames, exe_frames, chain, frame_dt)
    return mpjpe, e_vel, e_acc, success


def window_instability(
    bundle: Bundle, variant: str, history: np.ndarray, e: np.ndarray,
    states: Sequence[tuple[float, np.ndarray]], seed: int,
) -> float:
    """Gating-time R for a sampled window (averaged over its probe states)."""
    if bundle.probe is None:
        probe = bundle.config.gates.probe(tau_stab=float("inf"))
    else:
        probe = bundle.probe
    field_at = bound_field(bundle, variant, history, e)
    scores = [
        instability_score(field_at(u), z, probe, probe_seed=seed)[0] for u, z in states
    ]
    return float(np.mean(scores))
