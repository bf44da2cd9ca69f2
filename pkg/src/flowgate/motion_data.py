"""Toy prompt embedder and synthetic motion-primitive dataset.

The embedder hashes whitespace tokens into a fixed bucket table and sums
seeded Gaussian projection rows (L2-normalized), standing in for a real
text encoder. Motions are sinusoidal joint primitives; a designated
limit-grazing subset deliberately exceeds the joint limits by up to
0.15 rad so that unguided generation has a measurable violation rate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .kinematics import ChainModel
from .tensor import NonFiniteError, ShapeError

T_HIST = 2
T_FUT = 8

DATASET_FORMAT_VERSION = 1


def _stable_bucket(token: str, n_buckets: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % n_buckets


class PromptEmbedder:
    """Deterministic bag-of-tokens embedder: prompt -> unit vector (or the
    zero vector for an empty token bag)."""

    def __init__(self, seed: int = 0, n_buckets: int = 256, dim: int = 32):
        self.seed = seed
        self.n_buckets = n_buckets
        self.dim = dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70726F6A]))
        self.projection = rng.standard_normal((n_buckets, dim))

    @staticmethod
    def tokenize(prompt: str) -> list[str]:
        return prompt.lower().split()

    def embed(self, prompt: str) -> np.ndarray:
        tokens = self.tokenize(prompt)
        if not tokens:
            return np.zeros(self.dim)
        acc = np.zeros(self.dim)
        for token in tokens:
            acc += self.projection[_stable_bucket(token, self.n_buckets)]
        norm = np.linalg.norm(acc)
        if norm == 0.0:
            return np.zeros(self.dim)
        return acc / norm


@dataclass(frozen=True)
class MotionPrimitive:
    """Per-joint sinusoid: q_j(t) = offset_j + amp_j * sin(2*pi*f_j*t + phase_j)."""

    name: str
    prompts: tuple[str, ...]
    amplitude: tuple[float, ...]
    frequency: tuple[float, ...]
    phase: tuple[float, ...]
    offset: tuple[float, ...]
    duration: int
    limit_grazing: bool = False

    def __post_init__(self):
        n = len(self.amplitude)
        for name in ("frequency", "phase", "offset"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"primitive '{self.name}': {name} must have {n} entries")
        if self.duration < T_HIST + T_FUT:
            raise ValueError(f"primitive '{self.name}': duration must cover one window")
        if not self.prompts:
            raise ValueError(f"primitive '{self.name}': needs at least one prompt phrase")

    def trajectory(self, frame_dt: float, amp_scale: np.ndarray, phase_shift: np.ndarray) -> np.ndarray:
        t = np.arange(self.duration)[:, None] * frame_dt
        amp = np.asarray(self.amplitude) * amp_scale
        out = np.asarray(self.offset) + amp * np.sin(
            2.0 * np.pi * np.asarray(self.frequency) * t + np.asarray(self.phase) + phase_shift
        )
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"primitive '{self.name}' generated non-finite angles")
        return out


# prompt modifiers shared across primitives; all tokens are in-distribution
ID_MODIFIERS = (
    "slowly", "quickly", "gently", "smoothly", "again", "twice", "now", "please", "calmly", "once",
    "briskly", "softly", "carefully", "steadily", "lightly", "evenly",
)
ID_PREFIXES = ("", "please", "now", "okay", "right", "go on and", "next", "then")


def default_primitives(n_joints: int = 8) -> tuple[MotionPrimitive, ...]:
    """Stock primitive set: includes 'stand' plus two limit-grazing entries
    (peaks exceed q_max = 1.2 by 0.10 and 0.05 rad)."""

    def per_joint(values: dict[int, float], default: float = 0.0) -> tuple[float, ...]:
        return tuple(values.get(j, default) for j in range(n_joints))

    zero = (0.0,) * n_joints
    return (
        MotionPrimitive(
            name="stand",
            prompts=("stand", "stand still", "hold still", "stay put", "remain standing", "stand tall"),
            amplitude=zero, frequency=zero, phase=zero, offset=zero, duration=100,
        ),
        MotionPrimitive(
            name="wave",
            prompts=("wave hands", "wave the hand", "wave at me", "wave hello", "wave both hands", "give a wave"),
            amplitude=per_joint({5: 0.25, 6: 0.45, 7: 0.4}, 0.05),
            frequency=per_joint({5: 0.6, 6: 0.7, 7: 0.8}, 0.4),
            phase=per_joint({7: 1.0}),
            offset=per_joint({5: 0.2, 6: 0.3, 7: 0.2}),
            duration=100,
        ),
        MotionPrimitive(
            name="reach",
            prompts=("reach forward", "reach out", "reach ahead", "extend the arm", "reach far forward", "lean and reach"),
            amplitude=(0.3,) * n_joints,
            frequency=(0.4,) * n_joints,
            phase=tuple(0.3 * j for j in range(n_joints)),
            offset=per_joint({0: 0.4, 1: 0.3, 2: 0.2}, 0.1),
            duration=100,
        ),
        MotionPrimitive(
            name="swing",
            prompts=("swing arms", "swing the arms", "swing side to side", "sway and swing", "swing loosely", "swing around"),
            amplitude=(0.3,) * n_joints,
            frequency=(0.45,) * n_joints,
            phase=tuple((j % 2) * np.pi for j in range(n_joints)),
            offset=tuple(0.3 * (-1) ** j for j in range(n_joints)),
            duration=100,
        ),
        MotionPrimitive(
            name="stretch",
            prompts=("stretch up", "stretch upward", "stretch high", "big stretch", "stretch right up", "stretch overhead"),
            amplitude=per_joint({1: 0.45, 2: 0.45, 3: 0.45, 4: 0.45}, 0.2),
            frequency=(0.7,) * n_joints,
            phase=zero,
            offset=per_joint({1: 0.85, 2: 0.85, 3: 0.85, 4: 0.85}, 0.1),
            duration=100,
            limit_grazing=True,
        ),
        MotionPrimitive(
            name="curl",
            prompts=("curl up", "curl inward", "curl into a ball", "tuck and curl", "curl tight", "curl the body"),
            amplitude=(0.35,) * n_joints,
            frequency=(0.35,) * n_joints,
            phase=zero,
            offset=(0.9,) * n_joints,
            duration=100,
            limit_grazing=True,
        ),
    )


@dataclass(frozen=True)
class MotionWindow:
    """One training tuple: T_HIST history frames, T_FUT future frames, prompt."""

    history: np.ndarray
    future: np.ndarray
    prompt: str
    embedding: np.ndarray

    def __post_init__(self):
        if self.history.shape[0] != T_HIST or self.future.shape[0] != T_FUT:
            raise ShapeError(
                f"window must be ({T_HIST}, n) history and ({T_FUT}, n) future, "
                f"got {self.history.shape} / {self.future.shape}"
            )


@dataclass
class MotionDataset:
    windows: list[MotionWindow]
    train_idx: list[int]
    val_idx: list[int]
    trajectories: list[np.ndarray]
    trajectory_prompts: list[str]
    trajectory_primitives: list[str]
    frame_dt: float
    seed: int
    embedder_seed: int
    n_joints: int = field(init=False)

    def __post_init__(self):
        self.n_joints = self.windows[0].history.shape[1] if self.windows else 0

    @property
    def train_windows(self) -> list[MotionWindow]:
        return [self.windows[i] for i in self.train_idx]

    @property
    def val_windows(self) -> list[MotionWindow]:
        return [self.windows[i] for i in self.val_idx]

    def prompt_vocabulary(self, indices: list[int] | None = None) -> set[str]:
        windows = self.windows if indices is None else [self.windows[i] for i in indices]
        vocab: set[str] = set()
        for w in windows:
            vocab.update(PromptEmbedder.tokenize(w.prompt))
        return vocab


def _prompt_for_trajectory(primitive: MotionPrimitive, rng: np.random.Generator) -> str:
    base = primitive.prompts[int(rng.integers(len(primitive.prompts)))]
    prefix = ID_PREFIXES[int(rng.integers(len(ID_PREFIXES)))]
    parts = [prefix, base] if prefix and rng.random() < 0.5 else [base]
    if rng.random() < 0.6:
        parts.append(ID_MODIFIERS[int(rng.integers(len(ID_MODIFIERS)))])
    return " ".join(parts)


def generate_dataset(
    seed: int,
    primitives: tuple[MotionPrimitive, ...],
    n_windows: int,
    frame_dt: float = 0.04,
    embedder: PromptEmbedder | None = None,
    val_fraction: float = 0.1,
) -> MotionDataset:
    """Sample primitive trajectories and cut stride-1 sliding windows until at
    least `n_windows` are collected; split train/val by trajectory."""
    if len(primitives) < 4 or not any(p.name == "stand" for p in primitives):
        raise ValueError("need at least 4 primitives including 'stand'")
    embedder = embedder or PromptEmbedder(seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x64617461]))

    windows: list[MotionWindow] = []
    trajectories: list[np.ndarray] = []
    traj_prompts: list[str] = []
    traj_primitives: list[str] = []
    traj_window_spans: list[tuple[int, int]] = []
    embed_cache: dict[str, np.ndarray] = {}

    k = 0
    while len(windows) < n_windows:
        primitive = primitives[k % len(primitives)]
        k += 1
        n = len(primitive.amplitude)
        amp_scale = rng.uniform(0.85, 1.15, size=n)
        phase_shift = rng.uniform(0.0, 2.0 * np.pi, size=n)
        frames = primitive.trajectory(frame_dt, amp_scale, phase_shift)
        prompt = _prompt_for_trajectory(primitive, rng)
        if prompt not in embed_cache:
            embed_cache[prompt] = embedder.embed(prompt)
        start = len(windows)
        for s in range(frames.shape[0] - (T_HIST + T_FUT) + 1):
            windows.append(
                MotionWindow(
                    history=frames[s : s + T_HIST],
                    future=frames[s + T_HIST : s + T_HIST + T_FUT],
                    prompt=prompt,
                    embedding=embed_cache[prompt],
                )
            )
        trajectories.append(frames)
        traj_prompts.append(prompt)
        traj_primitives.append(primitive.name)
        traj_window_spans.append((start, len(windows)))

    # 90/10 split by trajectory, stratified per primitive so every motion
    # family appears in validation
    by_primitive: dict[str, list[int]] = {}
    for ti, prim in enumerate(traj_primitives):
        by_primitive.setdefault(prim, []).append(ti)
    val_traj: set[int] = set()
    for prim, traj_ids in sorted(by_primitive.items()):
        if len(traj_ids) < 2:
            continue  # keep the only trajectory in train
        n_val = max(1, int(round(val_fraction * len(traj_ids))))
        picks = rng.permutation(len(traj_ids))[:n_val]
        val_traj.update(traj_ids[int(i)] for i in picks)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for ti, (lo, hi) in enumerate(traj_window_spans):
        (val_idx if ti in val_traj else train_idx).extend(range(lo, hi))

    return MotionDataset(
        windows=windows,
        train_idx=train_idx,
        val_idx=val_idx,
        trajectories=trajectories,
        trajectory_prompts=traj_prompts,
        trajectory_primitives=traj_primitives,
        frame_dt=frame_dt,
        seed=seed,
        embedder_seed=embedder.seed,
    )


def ground_truth_violation_rate(dataset: MotionDataset, model: ChainModel) -> float:
    """Fraction of all generated frames with any joint outside its limits."""
    lo = np.asarray(model.joint_min)
    hi = np.asarray(model.joint_max)
    total = 0
    bad = 0
    for frames in dataset.trajectories:
        total += frames.shape[0]
        bad += int(np.sum(np.any((frames < lo) | (frames > hi), axis=1)))
    return bad / total if total else 0.0


# -- OOD prompt construction ------------------------------------------------------

_TYPE_A_VERBS = (
    "levitate", "crochet", "photosynthesize", "teleport", "alphabetize", "liquefy",
    "hibernate", "yodel", "meditate", "calculate", "whittle", "origami",
    "ferment", "telepathize", "daydream", "sculpt", "embroider", "harmonize",
    "translate", "hypnotize",
)
_TYPE_A_OBJECTS = (
    "a sweater", "the moon", "quietly", "a sonnet", "the archive", "in binary",
    "a teacup", "the garden", "backwards", "an opera", "the firmware", "a tapestry",
)
_TYPE_B_MOVES = (
    "double backflip", "flying tornado kick", "triple somersault", "aerial cartwheel blitz",
    "superman punch dive", "corkscrew flip", "backflip twist combo", "spinning aerial roundhouse",
    "handspring vault smash", "quadruple pirouette leap", "scorpion kick flurry", "moonsault slam",
)
_TYPE_B_QUALIFIERS = (
    "", "at full speed", "off the wall", "mid-air", "with maximum force", "over the railing",
    "while airborne", "explosively", "into a dive",
)


def make_id_prompt_pool(
    seed: int, primitives: tuple[MotionPrimitive, ...], count: int = 200
) -> list[str]:
    """Fresh in-distribution prompts: unseen combinations of seen tokens,
    drawn from the same phrase-plus-modifier family as the training data."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x696470]))
    prompts: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(prompts) < count:
        attempts += 1
        if attempts > 200 * count:
            raise ValueError(f"prompt space too small for {count} distinct prompts")
        primitive = primitives[int(rng.integers(len(primitives)))]
        prompt = _prompt_for_trajectory(primitive, rng)
        if prompt not in seen:
            seen.add(prompt)
            prompts.append(prompt)
    return prompts


def make_ood_prompts(seed: int, ood_type: str, count: int = 100) -> list[str]:
    """Fixed-pool out-of-distribution prompts: 'a' = unseen verbs, 'b' =
    extreme dynamics. Deterministic under seed; all prompts distinct."""
    if ood_type not in ("a", "b"):
        raise ValueError("ood_type must be 'a' or 'b'")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6F6F64, ord(ood_type)]))
    prompts: list[str] = []
    seen: set[str] = set()
    if ood_type == "b":
        prompts.append("double backflip")
        seen.add("double backflip")
    while len(prompts) < count:
        if ood_type == "a":
            verb = _TYPE_A_VERBS[int(rng.integers(len(_TYPE_A_VERBS)))]
            obj = _TYPE_A_OBJECTS[int(rng.integers(len(_TYPE_A_OBJECTS)))]
            prompt = f"{verb} {obj}"
        else:
            move = _TYPE_B_MOVES[int(rng.integers(len(_TYPE_B_MOVES)))]
            qual = _TYPE_B_QUALIFIERS[int(rng.integers(len(_TYPE_B_QUALIFIERS)))]
            prompt = f"{move} {qual}".strip()
        if prompt not in seen:
            seen.add(prompt)
            prompts.append(prompt)
    return prompts


def ood_token_pool() -> set[str]:
    """Every token that can appear in an OOD prompt (for disjointness checks)."""
    tokens: set[str] = set()
    for phrase in (*_TYPE_A_VERBS, *_TYPE_A_OBJECTS, *_TYPE_B_MOVES, *_TYPE_B_QUALIFIERS):
        tokens.update(PromptEmbedder.tokenize(phrase))
    return tokens


# -- serialization ----------------------------------------------------------------


def save_dataset(path: str, dataset: MotionDataset) -> None:
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": dataset.seed,
        "embedder_seed": dataset.embedder_seed,
        "frame_dt": dataset.frame_dt,
        "trajectories": [t.tolist() for t in dataset.trajectories],
        "trajectory_prompts": dataset.trajectory_prompts,
        "trajectory_primitives": dataset.trajectory_primitives,
        "train_idx": dataset.train_idx,
        "val_idx": dataset.val_idx,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False)


def load_dataset(path: str) -> MotionDataset:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"dataset {path!r}: unsupported format_version {doc.get('format_version')!r}")
    embedder = PromptEmbedder(seed=doc["embedder_seed"])
    windows: list[MotionWindow] = []
    embed_cache: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int]] = []
    trajectories = [np.asarray(t) for t in doc["trajectories"]]
    for frames, prompt in zip(trajectories, doc["trajectory_prompts"]):
        if prompt not in embed_cache:
            embed_cache[prompt] = embedder.embed(prompt)
        start = len(windows)
        for s in range(frames.shape[0] - (T_HIST + T_FUT) + 1):
            windows.append(
                MotionWindow(
                    history=frames[s : s + T_HIST],
                    future=frames[s + T_HIST : s + T_HIST + T_FUT],
                    prompt=prompt,
                    embedding=embed_cache[prompt],
                )
            )
        spans.append((start, len(windows)))
    return MotionDataset(
        windows=windows,
        train_idx=doc["train_idx"],
        val_idx=doc["val_idx"],
        trajectories=trajectories,
        trajectory_prompts=doc["trajectory_prompts"],
        trajectory_primitives=doc["trajectory_primitives"],
        frame_dt=doc["frame_dt"],
        seed=doc["seed"],
        embedder_seed=doc["embedder_seed"],
    )
