"""Synthetic cohort generator, sliding-window clips and subject-grouped folds.

Generative model
----------------
Each subject draws four latent gait factors ``z`` (pace, asymmetry, support,
foot posture) from ``N(separability * D[c], latent_sd^2 I)`` where ``D[c]`` is
a fixed per-class offset (class 0 is the origin). Parameter ``p`` is

    v_p = base_p + spread_p * (A[p] . z + noise_sd * e_p)

with fixed loadings ``A`` grouping the 29 parameters by factor.

Video frames are ``frame_dim`` channels at ``fps``. Channel ``j`` belongs to
the left (even ``j``) or right leg and carries

    x_j(t) = L * g_j * sin(2 pi f t / fps + phi_j + side shift)
             + a * s_j * sin(4 pi f t / fps + psi_j)
             + W_off[j] . u + frame_noise * eps

where ``f = cadence / 120`` Hz (two steps per cycle), ``L`` the step length
of that side, ``a`` the step-length asymmetry (signed by side ``s_j``), ``u``
the standardized parameter vector and ``W_off`` a fixed projection. The
side shift adds the step-time asymmetry to the half-cycle offset.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gaitparams as gp

DATASET_VERSION = 1
N_PARAMS = 29

# (base, spread) in raw units, indexed by parameter id - 1
_BASE = np.array([
    (1.4, 0.2), (110.0, 8.0), (0.02, 0.015), (0.03, 0.02), (0.02, 0.015),
    (0.55, 0.04), (0.55, 0.04), (0.75, 0.08), (0.75, 0.08), (1.1, 0.08),
    (1.1, 0.08), (1.5, 0.15), (1.5, 0.15), (12.0, 2.0), (12.0, 2.0),
    (38.0, 2.5), (38.0, 2.5), (0.42, 0.04), (0.42, 0.04), (38.0, 2.5),
    (38.0, 2.5), (0.42, 0.04), (0.42, 0.04), (24.0, 3.0), (24.0, 3.0),
    (0.26, 0.04), (0.26, 0.04), (6.0, 3.0), (6.0, 3.0),
])

# factor loadings: pace, asymmetry, support, foot posture
_LOAD = np.array([
    (1.0, 0, -0.3, 0), (0.8, 0, -0.2, 0), (0, 1.0, 0, 0), (0, 0.9, 0, 0.2), (0, 0.9, 0.2, 0),
    (-0.8, 0, 0.2, 0), (-0.8, 0, 0.2, 0), (0.9, 0, 0, 0.1), (0.9, 0, 0, 0.1), (-0.8, 0, 0.3, 0),
    (-0.8, 0, 0.3, 0), (0.9, 0, 0, 0.1), (0.9, 0, 0, 0.1), (0.3, 0, 0, 0.8), (0.3, 0, 0, 0.8),
    (0.2, 0, -0.9, 0), (0.2, 0, -0.9, 0), (-0.3, 0, -0.7, 0), (-0.3, 0, -0.7, 0), (0.2, 0, -0.9, 0),
    (0.2, 0, -0.9, 0), (-0.3, 0, -0.6, 0), (-0.3, 0, -0.6, 0), (-0.2, 0, 0.9, 0), (-0.2, 0, 0.9, 0),
    (-0.4, 0, 0.8, 0), (-0.4, 0, 0.8, 0), (0, 0.2, 0, 0.9), (0, 0.2, 0, 0.9),
])

# per-class latent offsets; row 0 is the healthy reference
_CLASS_OFFSETS = {
    "gait-scoring": np.array([
        (0.0, 0.0, 0.0, 0.0),
        (-1.5, 1.0, 0.8, 0.0),
        (-3.0, 0.5, 2.0, 1.0),
        (-4.5, 2.0, 3.0, -1.0),
    ]),
    "dementia-group": np.array([
        (0.0, 0.0, 0.0, 0.0),
        (-2.0, 2.0, 1.0, -1.5),
        (-2.5, -0.5, 2.5, 1.5),
    ]),
}

TASK_CLASSES = {task: len(off) for task, off in _CLASS_OFFSETS.items()}


@dataclass(frozen=True)
class SyntheticConfig:
    task: str = "gait-scoring"
    subjects_per_class: int = 20
    class_counts: tuple[int, ...] | None = None
    videos_per_subject: int = 1
    frames: int = 120
    frame_dim: int = 16
    fps: float = 30.0
    separability: float = 1.0
    pairing_rate: float = 0.7
    latent_sd: float = 0.4
    param_noise: float = 0.5
    frame_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.task not in _CLASS_OFFSETS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(_CLASS_OFFSETS)}")
        counts = self.counts()
        if len(counts) != self.n_classes:
            raise ValueError(f"class_counts needs {self.n_classes} entries")
        if min(counts) < 1:
            raise ValueError("every class needs at least one subject")
        if self.videos_per_subject < 1 or self.frames < 1 or self.frame_dim < 2:
            raise ValueError("videos_per_subject, frames and frame_dim must be positive")
        if not 0.0 <= self.pairing_rate <= 1.0:
            raise ValueError("pairing_rate must lie in [0, 1]")
        if self.separability < 0:
            raise ValueError("separability must be non-negative")

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def counts(self) -> tuple[int, ...]:
        if self.class_counts is not None:
            return tuple(self.class_counts)
        return (self.subjects_per_class,) * self.n_classes


@dataclass
class SyntheticVideo:
    video_id: str
    subject_id: str
    label: int
    frames: np.ndarray
    paired: bool


@dataclass
class SyntheticSubject:
    subject_id: str
    label: int
    params: gp.GaitParameterSet | None  # present only when some video is paired
    videos: list[SyntheticVideo] = field(default_factory=list)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    subjects: list[SyntheticSubject]

    @property
    def videos(self) -> list[SyntheticVideo]:
        return [v for s in self.subjects for v in s.videos]

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def subject(self, subject_id: str) -> SyntheticSubject:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def param_sets(self, subject_ids: Sequence[str] | None = None) -> list[gp.GaitParameterSet]:
        keep = None if subject_ids is None else set(subject_ids)
        return [s.params for s in self.subjects
                if s.params is not None and (keep is None or s.subject_id in keep)]


def _offset_projection(frame_dim: int) -> np.ndarray:
    # fixed across seeds so that the class signal does not depend on the dataset seed
    rng = np.random.default_rng(20240917)
    return rng.normal(0.0, 1.0 / math.sqrt(N_PARAMS), (frame_dim, N_PARAMS))


def _video_frames(values: np.ndarray, cfg: SyntheticConfig, rng) -> np.ndarray:
    """Frame features (frames, frame_dim) for one walk given raw parameters."""
    u = (values - _BASE[:, 0]) / _BASE[:, 1]
    cadence = max(values[1], 20.0)
    f = cadence / 120.0
    t = np.arange(cfg.frames) / cfg.fps
    j = np.arange(cfg.frame_dim)
    left = j % 2 == 0
    side = np.where(left, 1.0, -1.0)
    step_len = np.where(left, values[8], values[7])
    gain = 1.0 + 0.25 * np.cos(j)
    phi = 0.3 * j
    shift = np.where(left, 0.0, np.pi + 2 * np.pi * f * values[2])
    asym = values[3] / _BASE[3, 1]
    psi = 0.7 * j
    w = 2 * np.pi * f * t[:, None]
    x = (step_len * gain) * np.sin(w + phi + shift)
    x = x + 0.3 * asym * side * np.sin(2 * w + psi)
    x = x + _offset_projection(cfg.frame_dim) @ u
    x = x + cfg.frame_noise * rng.standard_normal(x.shape)
    return x


def generate_dataset(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticDataset:
    """Sample a cohort; identical output for identical configs."""
    rng = np.random.default_rng(cfg.seed)
    offsets = _CLASS_OFFSETS[cfg.task]
    subjects = []
    n = 0
    for label, count in enumerate(cfg.counts()):
        for _ in range(count):
            sid = f"s{n:04d}"
            n += 1
            z = cfg.separability * offsets[label] + cfg.latent_sd * rng.standard_normal(4)
            e = rng.standard_normal(N_PARAMS)
            raw = _BASE[:, 0] + _BASE[:, 1] * (_LOAD @ z + cfg.param_noise * e)
            subj = SyntheticSubject(sid, label, None)
            for k in range(cfg.videos_per_subject):
                paired = bool(rng.random() < cfg.pairing_rate)
                frames = _video_frames(raw, cfg, rng)
                subj.videos.append(SyntheticVideo(f"{sid}_v{k}", sid, label, frames, paired))
            if any(v.paired for v in subj.videos):
                subj.params = gp.GaitParameterSet(
                    {i + 1: float(raw[i]) for i in range(N_PARAMS)}, sid, label)
            subjects.append(subj)
    return SyntheticDataset(cfg, subjects)


# ---------------------------------------------------------------- clips

def clip_count(total: int, window: int = 70, stride: int = 25) -> int:
    if total < window:
        return 0
    return (total - window) // stride + 1


def window_clips(frames: np.ndarray, window: int = 70, train_stride: int = 25,
                 validation: bool = False) -> list[np.ndarray]:
    """Sliding windows over the first axis.

    Validation mode uses non-overlapping windows (stride equal to the window).
    """
    total = len(frames)
    if window < 1 or train_stride < 1:
        raise ValueError("window and stride must be positive")
    if total < window:
        raise ValueError(f"video of {total} frames is shorter than the {window}-frame window")
    stride = window if validation else train_stride
    return [frames[s:s + window] for s in range(0, total - window + 1, stride)]


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple[str, ...]
    validation: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[Fold, ...]
    level: str = "subject"  # unit ids are subject ids, or video ids for "video"


def make_folds(units: Sequence[tuple[str, int]], k: int = 10, seed: int = 0,
               level: str = "subject") -> FoldPlan:
    """Stratified k-fold over ``(unit_id, label)`` pairs.

    Units are shuffled within each class and dealt round-robin, continuing the
    fold cursor across classes, so fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    ids = [u for u, _ in units]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate unit ids")
    if len(units) < k:
        raise ValueError(f"{len(units)} units cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    buckets: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for label in sorted({lab for _, lab in units}):
        members = sorted(u for u, lab in units if lab == label)
        for i in rng.permutation(len(members)):
            buckets[cursor % k].append(members[i])
            cursor += 1
    folds = []
    for i in range(k):
        val = set(buckets[i])
        folds.append(Fold(i, tuple(u for u in sorted(ids) if u not in val), tuple(sorted(val))))
    return FoldPlan(k, tuple(folds), level)


def dataset_folds(ds: SyntheticDataset, k: int = 10, seed: int = 0, level: str = "subject") -> FoldPlan:
    if level == "subject":
        units = [(s.subject_id, s.label) for s in ds.subjects]
    elif level == "video":
        units = [(v.video_id, v.label) for v in ds.videos]
    else:
        raise ValueError(f"unknown split level {level!r}")
    return make_folds(units, k, seed, level)


# ---------------------------------------------------------------- persistence

def save_dataset(ds: SyntheticDataset, root) -> Path:
    """Write ``manifest.json``, ``params.csv`` and ``videos/<video_id>.npy``."""
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    cfg = asdict(ds.config)
    cfg["class_counts"] = list(cfg["class_counts"]) if cfg["class_counts"] is not None else None
    manifest = {
        "format_version": DATASET_VERSION,
        "task": ds.config.task,
        "n_classes": ds.n_classes,
        "config": cfg,
        "subjects": [{"subject_id": s.subject_id, "label": s.label} for s in ds.subjects],
        "videos": [{"video_id": v.video_id, "subject_id": v.subject_id, "label": v.label,
                    "paired": v.paired, "file": f"videos/{v.video_id}.npy"} for v in ds.videos],
    }
    for v in ds.videos:
        np.save(root / "videos" / f"{v.video_id}.npy", v.frames, allow_pickle=False)
    gp.write_parameter_table(root / "params.csv", ds.param_sets())
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_dataset(root) -> SyntheticDataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')!r}")
    cfg = dict(manifest["config"])
    if cfg.get("class_counts") is not None:
        cfg["class_counts"] = tuple(cfg["class_counts"])
    config = SyntheticConfig(**cfg)
    params = {p.subject_id: p for p in gp.read_parameter_table(root / "params.csv")}
    subjects = {s["subject_id"]: SyntheticSubject(s["subject_id"], int(s["label"]), params.get(s["subject_id"]))
                for s in manifest["subjects"]}
    for v in manifest["videos"]:
        frames = np.load(root / v["file"], allow_pickle=False)
        subjects[v["subject_id"]].videos.append(
            SyntheticVideo(v["video_id"], v["subject_id"], int(v["label"]), frames, bool(v["paired"])))
    return SyntheticDataset(config, list(subjects.values()))

