"""Experiment configuration, cross-validated training, metrics and artefacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import datasim as dsm
from . import decoder as dec
from . import diffmath as dm
from . import encoders as enc
from . import gaitparams as gp
from . import layers
from . import losses
from . import numtext as nt

log = logging.getLogger(__name__)

REPORT_VERSION = 1
RUN_ROOT_ENV = "GAITVLM_RUN_ROOT"


# ---------------------------------------------------------------- configuration

@dataclass
class ExperimentConfig:
    """Every knob of a run. Serialises to a flat ``key = value`` file."""

    task: str = "gait-scoring"
    seed: int = 0
    data_dir: str = ""
    # synthetic cohort (used when data_dir is empty)
    subjects_per_class: int = 20
    videos_per_subject: int = 1
    frames: int = 120
    frame_dim: int = 16
    separability: float = 1.0
    pairing_rate: float = 0.7
    latent_sd: float = 0.4
    param_noise: float = 0.5
    frame_noise: float = 0.3
    # folds and clips
    k_folds: int = 10
    split_level: str = "subject"
    window: int = 70
    train_stride: int = 25
    # frozen encoders
    dim: int = 64
    n_heads: int = 4
    n_layers: int = 4
    text_max_len: int = 96
    vision_mlp_ratio: int = 2
    n_global: int = 2
    # prompts
    n_ctx: int = 8
    n_keywords: int = 5
    proj_hidden: int = 64
    per_class_proj: bool = False
    use_knowledge: bool = True
    use_nte: bool = True
    n_num: int = nt.N_NUM
    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    tau: float = 0.01
    omega: float = 0.05
    combo_size: int = 4
    corr_threshold: float = 0.4
    sentences_per_subject: int = 8
    gp_batch: int = 16
    # optimisation
    epochs: int = 12
    batch_size: int = 32
    lr: float = 3e-3
    # decoder and interpretation
    dec_layers: int = 4
    dec_epochs: int = 3
    dec_sentences: int = 5000
    dec_lr: float = 3e-3
    interp_tau: float = 0.1

    def __post_init__(self):
        if self.task not in dsm.TASK_CLASSES:
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_num != nt.N_NUM:
            raise ValueError(f"n_num is fixed at {nt.N_NUM} by the token-id layout")
        if self.split_level not in ("subject", "video"):
            raise ValueError("split_level must be 'subject' or 'video'")
        if self.epochs < 0 or self.batch_size < 1 or self.k_folds < 2:
            raise ValueError("epochs >= 0, batch_size >= 1 and k_folds >= 2 required")

    # serialisation
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            values[key] = _coerce(types[key], val, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def synthetic(self) -> dsm.SyntheticConfig:
        return dsm.SyntheticConfig(
            task=self.task, subjects_per_class=self.subjects_per_class,
            videos_per_subject=self.videos_per_subject, frames=self.frames, frame_dim=self.frame_dim,
            separability=self.separability, pairing_rate=self.pairing_rate, latent_sd=self.latent_sd,
            param_noise=self.param_noise, frame_noise=self.frame_noise, seed=self.seed)

    def variant(self, name: str) -> "ExperimentConfig":
        """One of the four ablation rows: baseline, kapt, nte, full."""
        flags = {"baseline": (False, False), "kapt": (True, False), "nte": (False, True), "full": (True, True)}
        if name not in flags:
            raise ValueError(f"unknown variant {name!r}")
        kapt, nte = flags[name]
        return dataclasses.replace(self, use_knowledge=kapt, use_nte=nte)


ABLATION_VARIANTS = ("baseline", "kapt", "nte", "full")


def _coerce(typ, val: str, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false"):
                raise ValueError
            return val.lower() == "true"
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {val!r} as {typ}") from None


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> MetricsReport:
    """Top-1 accuracy, macro F1 (absent classes count as 0) and the confusion matrix.

    Confusion rows are true classes, columns predictions.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("nothing to evaluate")
    for arr in (pred, lab):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"class id outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (lab, pred), 1)
    f1 = []
    for c in range(n_classes):
        tp = cm[c, c]
        denom = cm[:, c].sum() + cm[c, :].sum()
        f1.append(float(2 * tp / denom) if denom else 0.0)
    return MetricsReport(float(np.trace(cm) / cm.sum()), float(np.mean(f1)), f1, cm.tolist())


def majority_vote(clip_predictions: Sequence[int], n_classes: int) -> int:
    """Most frequent class; ties go to the lower class id."""
    return int(np.bincount(np.asarray(clip_predictions, dtype=np.int64), minlength=n_classes).argmax())


# ---------------------------------------------------------------- model stack

@dataclass
class Stack:
    """Frozen encoders plus the fixed prompt inputs for one task."""

    cfg: ExperimentConfig
    knowledge: list[enc.ClassKnowledge]
    vocab: nt.Vocabulary
    text: enc.TextEncoder
    vision: enc.VisionEncoder
    bundle: enc.PromptBundle
    vcfg: enc.VideoConfig

    @property
    def frozen(self) -> dict[str, np.ndarray]:
        return {**self.text.params, **self.vision.params}

    @property
    def n_classes(self) -> int:
        return len(self.knowledge)


def build_stack(cfg: ExperimentConfig) -> Stack:
    knowledge = enc.load_knowledge(cfg.task)
    texts = [c.description for c in knowledge] + [c.name for c in knowledge]
    vocab = nt.Vocabulary.build(texts)
    text_cfg = enc.EncoderConfig(dim=cfg.dim, n_heads=cfg.n_heads, n_layers=cfg.n_layers,
                                 max_len=cfg.text_max_len, seed=cfg.seed)
    vis_cfg = dataclasses.replace(text_cfg, mlp_ratio=cfg.vision_mlp_ratio, max_len=cfg.window)
    text = enc.TextEncoder(vocab, text_cfg)
    vision = enc.VisionEncoder(vis_cfg)
    pcfg = enc.PromptConfig(n_ctx=cfg.n_ctx, n_keywords=cfg.n_keywords, proj_hidden=cfg.proj_hidden,
                            per_class_proj=cfg.per_class_proj, use_knowledge=cfg.use_knowledge)
    bundle = enc.make_prompt_bundle(knowledge, text, pcfg)
    vcfg = enc.VideoConfig(window=cfg.window, frame_dim=cfg.frame_dim, n_global=cfg.n_global)
    return Stack(cfg, knowledge, vocab, text, vision, bundle, vcfg)


def init_trainable(stack: Stack, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p = enc.init_prompt_params(stack.bundle.cfg, stack.n_classes, stack.text.dim, rng)
    p.update(enc.init_video_params(stack.vcfg, stack.vision.cfg, rng))
    p.update(losses.init_heads(rng, stack.text.dim))
    return p


def text_features(stack: Stack, t) -> dm.Tensor:
    return enc.encode_text(stack.bundle, stack.text, t)


def video_features(stack: Stack, t, clips: np.ndarray) -> dm.Tensor:
    return enc.encode_video(clips, t, stack.vision, stack.vcfg)


def batch_loss(stack: Stack, t, clips, labels, f_num=None, num_labels=None) -> dm.Tensor:
    cfg = stack.cfg
    f_text = text_features(stack, t)
    f_vid = video_features(stack, t, clips)
    fcfg = losses.FocalConfig(cfg.focal_alpha, cfg.focal_gamma, cfg.tau)
    l_k = losses.focal_contrastive(f_vid, f_text, losses.one_hot(labels, stack.n_classes), fcfg)
    l_gp = None
    if f_num is not None and len(f_num):
        l_gp = losses.numeric_alignment_loss(f_num, f_text, num_labels, t, cfg.tau)
    return losses.total_loss(l_k, l_gp, losses.CombinedLossConfig(cfg.omega))


def predict_clips(stack: Stack, params: dict[str, np.ndarray], clips: np.ndarray,
                  batch: int = 64) -> np.ndarray:
    t = layers.as_tensors({**stack.frozen, **params})
    f_text = text_features(stack, t).data
    preds = []
    for s in range(0, len(clips), batch):
        f_vid = video_features(stack, t, clips[s:s + batch]).data
        preds.append((f_vid @ f_text.T).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- numeric sentences

@dataclass
class SentenceCorpus:
    sentences: list[nt.NumericSentence]
    subject_ids: list[str]
    features: np.ndarray          # F^num rows
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.sentences)


def build_sentences(stack: Stack, param_sets: Sequence[gp.GaitParameterSet], stats: gp.NormalizationStats,
                    combos: Sequence[gp.ParameterCombination], per_subject: int, rng) -> SentenceCorpus:
    """``per_subject`` sentences per parameter set over distinct random combinations."""
    sents, sids = [], []
    if combos:
        for ps in param_sets:
            pick = rng.choice(len(combos), size=min(per_subject, len(combos)), replace=False)
            for i in sorted(pick):
                sents.append(nt.NumericSentence.from_values(combos[i], ps.values, stats, ps.label))
                sids.append(ps.subject_id)
    return embed_corpus(stack, sents, sids, stats)


def embed_corpus(stack: Stack, sents, sids, stats) -> SentenceCorpus:
    if not sents:
        return SentenceCorpus([], [], np.zeros((0, stack.text.dim)), np.zeros(0, dtype=np.int64))
    seqs = [nt.tokenize(s, stack.vocab, stats) for s in sents]
    feats = nt.embed_sequences(seqs, stack.text, numeric=stack.cfg.use_nte)
    return SentenceCorpus(list(sents), list(sids), feats, np.array([s.label for s in sents], dtype=np.int64))


# ---------------------------------------------------------------- folds

@dataclass
class FoldData:
    train_videos: list[dsm.SyntheticVideo]
    val_videos: list[dsm.SyntheticVideo]
    train_params: list[gp.GaitParameterSet]


def split_fold(data: dsm.SyntheticDataset, fold: dsm.Fold, level: str) -> FoldData:
    val = set(fold.validation)
    if level == "subject":
        tr_v = [v for v in data.videos if v.subject_id not in val]
        va_v = [v for v in data.videos if v.subject_id in val]
    else:
        tr_v = [v for v in data.videos if v.video_id not in val]
        va_v = [v for v in data.videos if v.video_id in val]
    # parameters are only visible through paired training videos
    paired = {v.subject_id for v in tr_v if v.paired}
    params = [s.params for s in data.subjects if s.subject_id in paired and s.params is not None]
    return FoldData(tr_v, va_v, params)


@dataclass
class FoldResult:
    index: int
    metrics: MetricsReport
    video_ids: list[str]
    video_labels: list[int]
    video_predictions: list[int]
    clip_accuracy: float
    loss_curve: list[float]
    params: dict[str, np.ndarray]
    stats: gp.NormalizationStats | None
    combos: list[gp.ParameterCombination]
    corpus: SentenceCorpus

    def summary(self) -> dict:
        return {"fold": self.index, **self.metrics.to_dict(), "clip_accuracy": self.clip_accuracy,
                "n_validation_videos": len(self.video_ids), "n_combinations": len(self.combos),
                "n_sentences": len(self.corpus), "loss_curve": self.loss_curve}


def _clip_arrays(videos, cfg: ExperimentConfig, validation: bool):
    clips, labels, owner = [], [], []
    for i, v in enumerate(videos):
        for c in dsm.window_clips(v.frames, cfg.window, cfg.train_stride, validation):
            clips.append(c)
            labels.append(v.label)
            owner.append(i)
    return np.array(clips), np.array(labels, dtype=np.int64), np.array(owner, dtype=np.int64)


def validate(stack: Stack, params: dict[str, np.ndarray], videos) -> tuple[MetricsReport, list[int], float]:
    clips, labels, owner = _clip_arrays(videos, stack.cfg, validation=True)
    clip_pred = predict_clips(stack, params, clips)
    video_pred = [majority_vote(clip_pred[owner == i], stack.n_classes) for i in range(len(videos))]
    metrics = evaluate(video_pred, [v.label for v in videos], stack.n_classes)
    return metrics, video_pred, float(np.mean(clip_pred == labels))


def train_fold(stack: Stack, data: dsm.SyntheticDataset, fold: dsm.Fold,
               progress: Callable[[int, float], None] | None = None) -> FoldResult:
    """Optimise the trainable parameters on one fold and score its validation videos."""
    cfg = stack.cfg
    fd = split_fold(data, fold, cfg.split_level)
    if not fd.train_videos or not fd.val_videos:
        raise ValueError(f"fold {fold.index}: empty train or validation split")
    seed = cfg.seed * 1000 + fold.index
    rng = np.random.default_rng(seed)
    params = init_trainable(stack, seed)
    trainable = sorted(params)
    frozen = stack.frozen

    stats, combos = None, []
    corpus = embed_corpus(stack, [], [], None)
    if len(fd.train_params) >= 2:
        stats = gp.fit_normalization(fd.train_params, healthy_label=0)
        combos = gp.select_combinations(fd.train_params, cfg.combo_size, cfg.corr_threshold)
        corpus = build_sentences(stack, fd.train_params, stats, combos, cfg.sentences_per_subject, rng)
    if not len(corpus):
        log.info("fold %d: no numeric sentences, training with L_k only", fold.index)
    by_subject: dict[str, np.ndarray] = {}
    for i, sid in enumerate(corpus.subject_ids):
        by_subject.setdefault(sid, []).append(i)
    by_subject = {k: np.array(v) for k, v in by_subject.items()}

    clips, labels, owner = _clip_arrays(fd.train_videos, cfg, validation=False)
    paired_subject = [v.subject_id if v.paired else None for v in fd.train_videos]
    state = dm.OptimizerState(lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clips))
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            subjects = sorted({paired_subject[owner[i]] for i in idx} - {None})
            pool = [j for sid in subjects if sid in by_subject for j in by_subject[sid]]
            f_num = num_lab = None
            if pool:
                pick = np.sort(rng.choice(pool, size=min(cfg.gp_batch, len(pool)), replace=False))
                f_num, num_lab = corpus.features[pick], corpus.labels[pick]
            g = dm.Graph(lambda t: batch_loss(stack, t, clips[idx], labels[idx], f_num, num_lab))
            out = g.forward({**frozen, **params}, wrt=trainable)
            grads = g.backward()
            params = dm.optimizer_step(params, grads, state, trainable)
            total += float(out.data) * len(idx)
            count += len(idx)
        curve.append(total / count)
        if progress:
            progress(epoch, curve[-1])

    metrics, video_pred, clip_acc = validate(stack, params, fd.val_videos)
    return FoldResult(fold.index, metrics, [v.video_id for v in fd.val_videos],
                      [v.label for v in fd.val_videos], video_pred, clip_acc, curve,
                      params, stats, combos, corpus)


# ---------------------------------------------------------------- cross-validation

def load_data(cfg: ExperimentConfig) -> dsm.SyntheticDataset:
    if cfg.data_dir:
        data = dsm.load_dataset(cfg.data_dir)
        if data.config.task != cfg.task:
            raise ValueError(f"dataset task {data.config.task!r} does not match config task {cfg.task!r}")
        return data
    return dsm.generate_dataset(cfg.synthetic())


def _mean_std(xs: Sequence[float]) -> dict:
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def frozen_digest(stack: Stack) -> str:
    h = hashlib.sha256()
    for k in sorted(stack.frozen):
        h.update(k.encode())
        h.update(np.ascontiguousarray(stack.frozen[k]).tobytes())
    return h.hexdigest()


@dataclass
class CVRun:
    report: dict
    folds: list[FoldResult]
    stack: Stack
    data: dsm.SyntheticDataset
    plan: dsm.FoldPlan


def run_cv(cfg: ExperimentConfig, out_dir=None, folds: Sequence[int] | None = None,
           progress: Callable[[str], None] | None = None) -> CVRun:
    """Train and validate every fold; optionally write the run directory."""
    data = load_data(cfg)
    plan = dsm.dataset_folds(data, cfg.k_folds, cfg.seed, cfg.split_level)
    stack = build_stack(cfg)
    digest = frozen_digest(stack)
    results = []
    for fold in plan.folds:
        if folds is not None and fold.index not in folds:
            continue
        try:
            res = train_fold(stack, data, fold)
        except Exception as exc:
            raise RuntimeError(f"fold {fold.index} failed: {exc}") from exc
        results.append(res)
        if progress:
            progress(f"fold {fold.index}: accuracy {res.metrics.accuracy:.3f} "
                     f"macro F1 {res.metrics.macro_f1:.3f}")
    if frozen_digest(stack) != digest:
        raise RuntimeError("frozen encoder weights changed during training")
    report = build_report(cfg, stack, results, digest)
    run = CVRun(report, results, stack, data, plan)
    if out_dir is not None:
        write_run(run, out_dir)
    return run


def build_report(cfg: ExperimentConfig, stack: Stack, results: Sequence[FoldResult], digest: str) -> dict:
    acc = [r.metrics.accuracy for r in results]
    f1 = [r.metrics.macro_f1 for r in results]
    cm = np.sum([np.array(r.metrics.confusion) for r in results], axis=0)
    return {
        "format_version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "classes": [c.name for c in stack.knowledge],
        "folds": [r.summary() for r in results],
        "accuracy": _mean_std(acc),
        "macro_f1": _mean_std(f1),
        "confusion_total": cm.tolist(),
        "frozen_sha256": digest,
    }


# ---------------------------------------------------------------- run directory

def write_run(run: CVRun, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(ExperimentConfig(**run.report["config"]).to_text())
    (out / "report.json").write_text(json.dumps(run.report, indent=2, sort_keys=True) + "\n")
    for r in run.folds:
        dm.save_checkpoint(out / f"fold_{r.index:02d}.ckpt", r.params)
        meta = {"fold": r.index, "video_ids": r.video_ids, "video_predictions": r.video_predictions,
                "metrics": r.metrics.to_dict(),
                "stats": None if r.stats is None else
                {"mean": r.stats.mean, "sigma": r.stats.sigma, "alpha_scale": r.stats.alpha_scale},
                "combinations": [list(c.ids) for c in r.combos]}
        (out / f"fold_{r.index:02d}.json").write_text(json.dumps(meta, indent=2) + "\n")
    with (out / "loss_curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "loss"])
        for r in run.folds:
            for e, v in enumerate(r.loss_curve):
                w.writerow([r.index, e, repr(v)])
    first = next((r for r in run.folds if len(r.corpus)), None)
    if first is not None:
        np.save(out / "numeric_embeddings.npy", first.corpus.features, allow_pickle=False)
        np.save(out / "numeric_labels.npy", first.corpus.labels, allow_pickle=False)
    return out


def load_fold_params(run_dir, index: int) -> dict[str, np.ndarray]:
    return dm.load_checkpoint(Path(run_dir) / f"fold_{index:02d}.ckpt")


def load_stats(meta: dict) -> gp.NormalizationStats | None:
    s = meta.get("stats")
    if s is None:
        return None
    conv = lambda d: {int(k): float(v) for k, v in d.items()}  # noqa: E731
    return gp.NormalizationStats(conv(s["mean"]), conv(s["sigma"]), conv(s["alpha_scale"]))


def reevaluate(run_dir) -> dict:
    """Reload every fold checkpoint and score its validation videos again."""
    run_dir = Path(run_dir)
    path = run_dir / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report at {path}")
    report = json.loads(path.read_text())
    cfg = ExperimentConfig(**report["config"])
    stack = build_stack(cfg)
    data = load_data(cfg)
    plan = dsm.dataset_folds(data, cfg.k_folds, cfg.seed, cfg.split_level)
    out = []
    for summary in report["folds"]:
        fold = plan.folds[summary["fold"]]
        fd = split_fold(data, fold, cfg.split_level)
        metrics, _, _ = validate(stack, load_fold_params(run_dir, fold.index), fd.val_videos)
        out.append({"fold": fold.index, **metrics.to_dict()})
    return {"folds": out, "accuracy": _mean_std([f["accuracy"] for f in out]),
            "macro_f1": _mean_std([f["macro_f1"] for f in out])}


def run_ablation(cfg: ExperimentConfig, out_dir=None, folds=None) -> dict[str, dict]:
    reports = {}
    for name in ABLATION_VARIANTS:
        sub = None if out_dir is None else Path(out_dir) / name
        reports[name] = run_cv(cfg.variant(name), sub, folds).report
    return reports


# ---------------------------------------------------------------- interpretation

def decoder_corpus(stack: Stack, param_sets, stats, combos, n: int, rng) -> SentenceCorpus:
    """Up to ``n`` distinct (parameter set, combination) sentences."""
    pairs = [(i, j) for i in range(len(param_sets)) for j in range(len(combos))]
    if not pairs:
        raise ValueError("no parameter sets or combinations to build sentences from")
    pick = rng.choice(len(pairs), size=min(n, len(pairs)), replace=False)
    sents, sids = [], []
    for k in pick:
        i, j = pairs[k]
        ps = param_sets[i]
        sents.append(nt.NumericSentence.from_values(combos[j], ps.values, stats, ps.label))
        sids.append(ps.subject_id)
    return embed_corpus(stack, sents, sids, stats)


def decoder_config(cfg: ExperimentConfig) -> dec.DecoderConfig:
    return dec.DecoderConfig(dim=cfg.dim, n_heads=cfg.n_heads, n_layers=cfg.dec_layers,
                             epochs=cfg.dec_epochs, lr=cfg.dec_lr, seed=cfg.seed)


def describe_classes(stack: Stack, fold: FoldResult, corpus: SentenceCorpus,
                     model: dec.DecoderModel) -> dict[str, list[str]]:
    """Decoded description per class from the fold's text features and numeric bank."""
    t = layers.as_tensors({**stack.frozen, **fold.params})
    f_text = text_features(stack, t)
    p_class = losses.project_text(t, f_text).data
    p_num = losses.project_num(t, corpus.features).data
    bank = dec.EmbeddingBank()
    bank.append(corpus.features, p_num, [s.text for s in corpus.sentences])
    out = {}
    for i, c in enumerate(stack.knowledge):
        sentence, _, _ = dec.interpret_class(p_class[i], bank, model, stack.cfg.interp_tau, fold.stats)
        out[c.name] = [sentence]
    return out


# ---------------------------------------------------------------- plots

def pca_2d(x: np.ndarray) -> np.ndarray:
    """First two principal coordinates with a fixed sign convention."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    for i in range(len(comps)):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    out = xc @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def gray_levels(m: np.ndarray) -> np.ndarray:
    return np.rint(255 * (np.clip(m, -1.0, 1.0) + 1.0) / 2.0).astype(np.uint8)


SIMILARITY_TEMPLATE = "Walking speed is {value} leg/sec."


def similarity_grid(n: int = 201) -> np.ndarray:
    return np.linspace(-gp.V_RANGE, gp.V_RANGE, n)


def emit_plots(run_dir, stack: Stack | None = None, grid_points: int = 201) -> list[Path]:
    """Similarity map (CSV and PNG), PCA of numeric embeddings and loss curves."""
    from PIL import Image

    run_dir = Path(run_dir)
    needed = [run_dir / n for n in ("report.json", "loss_curves.csv", "numeric_embeddings.npy",
                                    "numeric_labels.npy")]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError("missing run artefacts: " + ", ".join(missing))
    report = json.loads((run_dir / "report.json").read_text())
    if stack is None:
        stack = build_stack(ExperimentConfig(**report["config"]))
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)

    m = nt.similarity_map(SIMILARITY_TEMPLATE, similarity_grid(grid_points), stack.text)
    sim_csv = plots / "similarity_map.csv"
    np.savetxt(sim_csv, m, delimiter=",", fmt="%.17g")
    sim_png = plots / "similarity_map.png"
    Image.fromarray(gray_levels(m), mode="L").save(sim_png)

    feats = np.load(run_dir / "numeric_embeddings.npy")
    labels = np.load(run_dir / "numeric_labels.npy")
    xy = pca_2d(feats)
    pca_csv = plots / "numeric_pca.csv"
    with pca_csv.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pc1", "pc2", "label"])
        for (a, b), lab in zip(xy, labels):
            w.writerow([repr(float(a)), repr(float(b)), int(lab)])

    curves = plots / "loss_curves.csv"
    curves.write_text((run_dir / "loss_curves.csv").read_text())
    return [sim_csv, sim_png, pca_csv, curves]


# ---------------------------------------------------------------- gradient audit

def tiny_config(**overrides) -> ExperimentConfig:
    """A narrow but complete stack for finite-difference checks."""
    base = dict(dim=8, n_heads=2, n_layers=2, vision_mlp_ratio=2, window=5, frame_dim=3, n_global=1,
                n_ctx=2, n_keywords=2, proj_hidden=4, text_max_len=96)
    base.update(overrides)
    return ExperimentConfig(**base)


def gradient_audit(seed: int = 0, n_points: int = 10, h: float = 1e-5) -> dict[str, float]:
    """Worst relative gradient error per loss over ``n_points`` seeded points."""
    cfg = tiny_config(seed=seed)
    stack = build_stack(cfg)
    n_cls = stack.n_classes
    worst = {"focal": 0.0, "numeric_alignment": 0.0, "ordinal_ce": 0.0, "total": 0.0}
    fcfg = losses.FocalConfig(cfg.focal_alpha, cfg.focal_gamma, cfg.tau)
    dcfg = dec.DecoderConfig(dim=8, n_heads=2, n_layers=2, n_prefix=2, prefix_hidden=8, max_len=6,
                             num_freqs=2, seed=seed)
    for k in range(n_points):
        rng = np.random.default_rng([seed, k])
        params = init_trainable(stack, seed * 100 + k)
        # small encoder-side spread keeps the tau=0.01 softmax away from saturation;
        # the heads keep their init so L2 normalisation never sees a near-zero vector
        params = {n: v if n.startswith("head.") else v * 0.05 for n, v in params.items()}
        names = sorted(params)
        clips = rng.normal(size=(2, cfg.window, cfg.frame_dim))
        labels = rng.integers(0, n_cls, 2)
        f_num = rng.normal(size=(3, cfg.dim))
        num_lab = rng.integers(0, n_cls, 3)
        bind = {**stack.frozen, **params}

        def focal(t):
            f_text = text_features(stack, t)
            f_vid = video_features(stack, t, clips)
            return losses.focal_contrastive(f_vid, f_text, losses.one_hot(labels, n_cls), fcfg)

        def align(t):
            return losses.numeric_alignment_loss(f_num, text_features(stack, t), num_lab, t, cfg.tau)

        def total(t):
            return batch_loss(stack, t, clips, labels, f_num, num_lab)

        # each partial loss against the parameters it reads; the total checks all of them
        video = [n for n in names if not n.startswith("head.")]
        text = [n for n in names if n.startswith(("prompt.", "head."))]
        worst["focal"] = max(worst["focal"], dm.grad_check(focal, bind, h, video))
        worst["numeric_alignment"] = max(worst["numeric_alignment"], dm.grad_check(align, bind, h, text))
        worst["total"] = max(worst["total"], dm.grad_check(total, bind, h, names))

        model = dec.init_decoder(stack.vocab, cfg.dim, dcfg)
        ids = [int(rng.integers(2, stack.vocab.n_words)), nt.NUM_BASE + int(rng.integers(0, nt.N_NUM + 1)),
               nt.NUM_BASE + int(rng.integers(0, nt.N_NUM + 1)), nt.EOS_ID]
        inp, tgt = dec._batch_arrays([ids], stack.vocab)
        prefix = rng.normal(size=(1, cfg.dim))
        valid = tgt[0] >= 0

        def ordinal(t):
            logits = dm.getitem(dec.decoder_logits(model, t, prefix, inp), 0)
            return losses.ordinal_ce(dm.getitem(logits, np.nonzero(valid)[0]), tgt[0][valid], stack.vocab)

        dnames = sorted(k for k in model.params if k not in dec.FIXED_PARAMS)
        worst["ordinal_ce"] = max(worst["ordinal_ce"], dm.grad_check(ordinal, model.params, h, dnames))
    return worst
