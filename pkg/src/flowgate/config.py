"""Run configuration: a flat-sectioned key-value text format.

Grammar, one construct per line:

    [section]            # or [primitive NAME]
    key = value          # '#' starts a comment anywhere
    values: scalar | comma-separated list; strings need no quotes

Unknown sections and unknown keys are rejected outright; every value is
type-checked against the schema. Defaults equal the published values
where one exists; `config print` flags those entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .costs import CostWeights, GuidanceSchedule
from .flow import CfgSchedule, FlowConfig, ReflowConfig
from .gate import InstabilityProbe
from .kinematics import ChainModel, SphereSpec, default_chain
from .motion_data import MotionPrimitive, default_primitives
from .tracker import TrackerConfig
from .vae import VaeConfig


class ConfigError(ValueError):
    """Malformed config text, unknown key/section, or bad value type."""


# -- section dataclasses -------------------------------------------------------


@dataclass
class ChainSection:
    n_joints: int = 8
    link_length: list[float] = field(default_factory=lambda: [0.3])
    link_mass: list[float] = field(default_factory=lambda: [1.0])
    joint_limit: float = 1.2
    vel_limit: float = 4.0
    acc_limit: float = 100.0
    margin: float = 0.03
    spheres: list[str] = field(default_factory=lambda: ["1:0.5:0.09", "2:0.5:0.09", "3:0.5:0.09", "5:0.5:0.09", "6:0.5:0.09", "7:0.5:0.09"])
    collision_pairs: list[str] = field(default_factory=lambda: ["0-2", "1-3", "2-4", "3-5", "0-4", "1-5"])

    def build(self) -> ChainModel:
        n = self.n_joints

        def per_joint(vals: list[float]) -> tuple[float, ...]:
            if len(vals) == 1:
                return tuple(vals) * n
            if len(vals) != n:
                raise ConfigError(f"expected 1 or {n} values, got {len(vals)}")
            return tuple(vals)

        try:
            spheres = tuple(
                SphereSpec(int(link), float(off), float(rad))
                for link, off, rad in (s.split(":") for s in self.spheres)
            )
            pairs = tuple(
                (int(a), int(b)) for a, b in (p.split("-") for p in self.collision_pairs)
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad sphere/pair syntax: {exc}") from exc
        try:
            return ChainModel(
                link_lengths=per_joint(self.link_length),
                link_masses=per_joint(self.link_mass),
                joint_min=(-self.joint_limit,) * n,
                joint_max=(self.joint_limit,) * n,
                vel_limit=(self.vel_limit,) * n,
                acc_limit=(self.acc_limit,) * n,
                spheres=spheres,
                collision_pairs=pairs,
                margin=self.margin,
            )
        except ValueError as exc:
            raise ConfigError(f"invalid chain: {exc}") from exc


@dataclass
class DatasetSection:
    seed: int = 0
    n_windows: int = 6000
    frame_dt: float = 0.04
    val_fraction: float = 0.1


@dataclass
class EmbedderSection:
    seed: int = 0
    buckets: int = 256
    dim: int = 32


@dataclass
class VaeSection:
    d_z: int = 8
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    beta_kl: float = 1e-3
    lr: float = 1e-3
    iterations: int = 12000
    batch: int = 64
    seed: int = 0

    def build(self) -> VaeConfig:
        return VaeConfig(
            d_z=self.d_z, hidden=tuple(self.hidden), beta_kl=self.beta_kl,
            lr=self.lr, iterations=self.iterations, batch=self.batch, seed=self.seed,
        )


@dataclass
class FlowSection:
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    hist_dim: int = 16
    lr: float = 1e-3
    iterations: int = 16000
    batch: int = 64
    p_drop: float = 0.1
    seed: int = 0
    cfg_start: float = 5.0
    cfg_end: float = 3.0

    def build(self) -> FlowConfig:
        return FlowConfig(
            hidden=tuple(self.hidden), hist_dim=self.hist_dim, lr=self.lr,
            iterations=self.iterations, batch=self.batch, p_drop=self.p_drop, seed=self.seed,
        )

    def cfg_schedule(self) -> CfgSchedule:
        return CfgSchedule(self.cfg_start, self.cfg_end)


@dataclass
class ReflowSection:
    n_pairs: int = 8000
    teacher_nfe: int = 10
    lr: float = 1e-3
    lr_end: float = 3e-5
    iterations: int = 40000
    batch: int = 64
    seed: int = 0

    def build(self) -> ReflowConfig:
        return ReflowConfig(
            n_pairs=self.n_pairs, teacher_nfe=self.teacher_nfe, lr=self.lr,
            lr_end=self.lr_end, iterations=self.iterations, batch=self.batch, seed=self.seed,
        )


@dataclass
class CostsSection:
    lambda_lim: float = 1.0
    lambda_col: float = 0.01
    lambda_sm: float = 0.1
    lambda_stab: float = 1.0
    beta_q: float = 50.0
    beta_c: float = 10.0

    def build(self) -> CostWeights:
        return CostWeights(
            lambda_lim=self.lambda_lim, lambda_col=self.lambda_col,
            lambda_sm=self.lambda_sm, lambda_stab=self.lambda_stab,
            beta_q=self.beta_q, beta_c=self.beta_c,
        )


@dataclass
class GuidanceSection:
    alpha_start: float = 500.0
    alpha_end: float = 10000.0
    clamp: float = 0.2

    def build(self) -> GuidanceSchedule:
        return GuidanceSchedule(self.alpha_start, self.alpha_end, self.clamp)


@dataclass
class GatesSection:
    sem_percentile: float = 90.0
    eps_reg: float = 1e-3
    probes: int = 16
    delta: float = 1e-6
    tau_stab: str = "calibrate"  # float literal or "calibrate"
    stab_percentile: float = 99.0
    seed: int = 0

    def tau_stab_value(self) -> float | None:
        if self.tau_stab == "calibrate":
            return None
        try:
            return float(self.tau_stab)
        except ValueError as exc:
            raise ConfigError(f"gates.tau_stab must be a number or 'calibrate', got {self.tau_stab!r}") from exc

    def probe(self, tau_stab: float, eval_points: tuple[float, ...] = (0.0,)) -> InstabilityProbe:
        return InstabilityProbe(
            m=self.probes, delta=self.delta, seed=self.seed,
            tau_stab=tau_stab, eval_points=eval_points,
        )


@dataclass
class TrackerSection:
    kp: float = 180.0
    kd: float = 4.0
    tau_max: float = 6.0
    inertia: float = 0.05
    control_dt: float = 0.02

    def build(self) -> TrackerConfig:
        return TrackerConfig(
            kp=self.kp, kd=self.kd, tau_max=self.tau_max,
            inertia=self.inertia, control_dt=self.control_dt,
        )


@dataclass
class RunSection:
    seed: int = 0
    out: str = "out"
    eval_windows: int = 300
    quintile_windows: int = 2000
    quintile_ood_fraction: float = 0.3
    mmodality_prompts: int = 10
    mmodality_reps: int = 8
    episode_frames: int = 200
    fallback_duration: float = 1.0
    bench_runs: int = 100
    bench_warmup: int = 10
    replan_frames: int = 4  # 0.16 s at 25 fps: the 6.25 Hz generator cadence


@dataclass
class PrimitiveSection:
    name: str
    prompts: list[str] = field(default_factory=list)
    amplitude: list[float] = field(default_factory=lambda: [0.0])
    frequency: list[float] = field(default_factory=lambda: [0.0])
    phase: list[float] = field(default_factory=lambda: [0.0])
    offset: list[float] = field(default_factory=lambda: [0.0])
    duration: int = 100
    limit_grazing: bool = False

    def build(self, n_joints: int) -> MotionPrimitive:
        def per_joint(vals: list[float]) -> tuple[float, ...]:
            if len(vals) == 1:
                return tuple(vals) * n_joints
            if len(vals) != n_joints:
                raise ConfigError(
                    f"primitive {self.name!r}: expected 1 or {n_joints} values, got {len(vals)}"
                )
            return tuple(vals)

        return MotionPrimitive(
            name=self.name,
            prompts=tuple(self.prompts),
            amplitude=per_joint(self.amplitude),
            frequency=per_joint(self.frequency),
            phase=per_joint(self.phase),
            offset=per_joint(self.offset),
            duration=self.duration,
            limit_grazing=self.limit_grazing,
        )


# keys whose defaults come straight from the published implementation details
PAPER_DEFAULT_KEYS = {
    ("chain", "margin"),
    ("costs", "lambda_lim"),
    ("costs", "lambda_col"),
    ("costs", "lambda_sm"),
    ("costs", "lambda_stab"),
    ("costs", "beta_q"),
    ("costs", "beta_c"),
    ("guidance", "alpha_start"),
    ("guidance", "alpha_end"),
    ("guidance", "clamp"),
    ("flow", "cfg_start"),
    ("flow", "cfg_end"),
    ("gates", "sem_percentile"),
    ("gates", "probes"),
    ("gates", "delta"),
    ("reflow", "teacher_nfe"),
    ("tracker", "control_dt"),
    ("run", "replan_frames"),
}

_SECTION_TYPES = {
    "chain": ChainSection,
    "dataset": DatasetSection,
    "embedder": EmbedderSection,
    "vae": VaeSection,
    "flow": FlowSection,
    "reflow": ReflowSection,
    "costs": CostsSection,
    "guidance": GuidanceSection,
    "gates": GatesSection,
    "tracker": TrackerSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    chain: ChainSection = field(default_factory=ChainSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    vae: VaeSection = field(default_factory=VaeSection)
    flow: FlowSection = field(default_factory=FlowSection)
    reflow: ReflowSection = field(default_factory=ReflowSection)
    costs: CostsSection = field(default_factory=CostsSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    gates: GatesSection = field(default_factory=GatesSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    run: RunSection = field(default_factory=RunSection)
    primitives: list[PrimitiveSection] = field(default_factory=list)

    def build_chain(self) -> ChainModel:
        return self.chain.build()

    def build_primitives(self) -> tuple[MotionPrimitive, ...]:
        if not self.primitives:
            return default_primitives(self.chain.n_joints)
        return tuple(p.build(self.chain.n_joints) for p in self.primitives)


# -- parsing ---------------------------------------------------------------------


def _parse_scalar(text: str, target_type: type) -> Any:
    text = text.strip()
    try:
        if target_type is int:
            value = int(text)
        elif target_type is float:
            value = float(text)
        elif target_type is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            value = text.lower() == "true"
        else:
            value = text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {target_type.__name__}") from exc
    if target_type is float and not np.isfinite(value):
        raise ConfigError(f"non-finite value {text!r}")
    return value


def _assign(section_obj, key: str, raw: str, section_name: str) -> None:
    field_map = {f.name: f for f in fields(section_obj)}
    if key not in field_map or key == "name":
        raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
    current = getattr(section_obj, key)
    if isinstance(current, list):
        elem_type = str
        if current and isinstance(current[0], bool):
            elem_type = bool
        elif current and isinstance(current[0], int):
            elem_type = int
        elif current and isinstance(current[0], float):
            elem_type = float
        elif key in ("amplitude", "frequency", "phase", "offset", "link_length", "link_mass"):
            elem_type = float
        elif key == "hidden":
            elem_type = int
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        setattr(section_obj, key, [_parse_scalar(p, elem_type) for p in parts])
    elif isinstance(current, bool):
        setattr(section_obj, key, _parse_scalar(raw, bool))
    elif isinstance(current, int):
        setattr(section_obj, key, _parse_scalar(raw, int))
    elif isinstance(current, float):
        setattr(section_obj, key, _parse_scalar(raw, float))
    else:
        setattr(section_obj, key, _parse_scalar(raw, str))


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises ConfigError on any unknown or ill-typed entry."""
    config = RunConfig()
    current: Any = None
    current_name = ""
    seen_keys: set[tuple[str, str]] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip()
            if header.startswith("primitive "):
                name = header[len("primitive "):].strip()
                if not name:
                    raise ConfigError(f"line {lineno}: primitive section needs a name")
                prim = PrimitiveSection(name=name)
                config.primitives.append(prim)
                current, current_name = prim, header
            elif header in _SECTION_TYPES:
                current, current_name = getattr(config, header), header
            else:
                raise ConfigError(f"line {lineno}: unknown section [{header}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if (current_name, key) in seen_keys:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current_name}]")
        seen_keys.add((current_name, key))
        try:
            _assign(current, key, raw_value, current_name)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    # cross-field validation happens in the builders
    config.build_chain()
    config.build_primitives()
    config.gates.tau_stab_value()
    return config


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def format_config(config: RunConfig) -> str:
    """Render every section and key; paper-sourced defaults are flagged."""
    lines: list[str] = []
    for section_name in _SECTION_TYPES:
        lines.append(f"[{section_name}]")
        section_obj = getattr(config, section_name)
        for f in fields(section_obj):
            flag = "  # [paper-default]" if (section_name, f.name) in PAPER_DEFAULT_KEYS else ""
            lines.append(f"{f.name} = {_format_value(getattr(section_obj, f.name))}{flag}")
        lines.append("")
    for prim in config.primitives:
        lines.append(f"[primitive {prim.name}]")
        for f in fields(prim):
            if f.name == "name":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(prim, f.name))}")
        lines.append("")
    return "\n".join(lines)
