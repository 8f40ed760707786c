"""Segmentation, supervised training, label-fraction evaluation and scoring."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import encoder as E
from . import tensor as T
from .contrastive import resample_frames
from .data_io import N_STEPS, Recording, normalize_recording
from .optim import AdamState, NonFiniteError, OptimConfig, adam_step

logger = logging.getLogger(__name__)

RESAMPLED_FRAMES = 144
WINDOW = E.WINDOW
STRIDE = 16
METHODS = ("supervised", "e2e", "moco")


class SingleClassError(ValueError):
    """Training labels contain only one class."""


@dataclass
class Segment:
    data: np.ndarray  # 32 x 51 float32
    label: bool | None
    subject_id: str
    step: int


def segment_recording(rec: Recording) -> list[Segment]:
    """Eight 32-frame windows at stride 16 after resampling to 144 frames."""
    if rec.n_frames < WINDOW:
        raise ValueError(f"{rec.subject_id}: {rec.n_frames} frames, need at least {WINDOW}")
    frames = resample_frames(rec.frames, RESAMPLED_FRAMES).reshape(RESAMPLED_FRAMES, -1)
    segments = []
    for i in range(N_STEPS):
        window = frames[i * STRIDE : i * STRIDE + WINDOW].astype(T.DTYPE)
        label = None if rec.step_labels is None else bool(rec.step_labels[i])
        segments.append(Segment(window, label, rec.subject_id, i))
    return segments


def prepare(recordings) -> list[Segment]:
    """Normalize and segment every recording."""
    out = []
    for rec in recordings:
        out.extend(segment_recording(normalize_recording(rec)))
    return out


def stack(segments) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.stack([s.data for s in segments]).astype(T.DTYPE)
    if any(s.label is None for s in segments):
        return x, None
    return x, np.array([int(s.label) for s in segments], dtype=np.int64)


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------


def train_supervised(segments, cfg: OptimConfig | None = None, seed: int = 0, init: dict | None = None,
                     freeze_encoder: bool = False, channels=E.CHANNELS):
    """Minibatch Adam on cross-entropy; returns ``(params, per-epoch mean losses)``.

    With ``init`` the encoder starts from those weights and the head is freshly
    initialized from ``seed``. ``freeze_encoder`` trains the head only.
    """
    cfg = cfg or OptimConfig()
    x, y = stack(segments) if not isinstance(segments, tuple) else segments
    if y is None:
        raise ValueError("every training segment needs a label")
    if len(np.unique(y)) < 2:
        raise SingleClassError("training set contains a single class; need both valid and invalid steps")
    init_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(2)
    params = E.init_params(int(init_seed), channels if init is None else E.channels_of(init))
    if init is not None:
        E.check_same_manifest(params, init)
        for name in params:
            if not name.startswith("head."):
                params[name][...] = init[name]
    trainable = {n: p for n, p in params.items() if not (freeze_encoder and not n.startswith("head."))}
    adam = AdamState.for_params(trainable)
    rng = np.random.default_rng(shuffle_seed)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = E.classification_loss_and_grads(params, x[idx], y[idx], not freeze_encoder)
            if not np.isfinite(loss):
                raise NonFiniteError("non-finite training loss")
            adam_step(params, {n: grads[n] for n in trainable}, adam, cfg)
            losses.append(loss * len(idx))
        trace.append(float(np.sum(losses) / len(x)))
    return params, trace


def predict_segments(params: dict, x: np.ndarray, batch: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(x), batch):
        z, _ = E.encode_batch(params, x[start : start + batch])
        out.append(E.predict(E.classify_batch(params, z)))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params: dict, segments) -> float:
    x, y = stack(segments)
    return float(np.mean(predict_segments(params, x) == y))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def score_recording(params: dict, rec: Recording) -> tuple[int, list[bool]]:
    """Predicted number of valid steps and the per-step predictions."""
    segments = segment_recording(normalize_recording(rec))
    x, _ = stack(segments)
    preds = [bool(p) for p in predict_segments(params, x)]
    return sum(preds), preds


def score_histogram(scores) -> list[int]:
    counts = [0] * (N_STEPS + 1)
    for s in scores:
        if isinstance(s, bool) or int(s) != s or not 0 <= s <= N_STEPS:
            raise ValueError(f"score {s!r} outside 0..{N_STEPS}")
        counts[int(s)] += 1
    return counts


def emit_score_histogram(scores, path=None) -> list[int]:
    """Count children per score 0..8; optionally write ``score,count`` CSV."""
    counts = score_histogram(scores)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["score", "count"])
            for score, count in enumerate(counts):
                w.writerow([score, count])
    return counts


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    train_subjects: list[str]
    test_subjects: list[str]
    scores: dict  # test subject -> (predicted score, oracle score)
    confusion: dict  # tp, fp, tn, fn


@dataclass
class EvalReport:
    method: str
    fraction: float
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def fold_accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def confusion(self) -> dict:
        total = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        for f in self.folds:
            for k in total:
                total[k] += f.confusion[k]
        return total

    @property
    def subject_scores(self) -> list[tuple[int, str, int, int]]:
        return [(f.fold, s, p, o) for f in self.folds for s, (p, o) in f.scores.items()]

    def check_disjoint(self) -> None:
        for f in self.folds:
            both = set(f.train_subjects) & set(f.test_subjects)
            if both:
                raise AssertionError(f"fold {f.fold}: subjects {sorted(both)} in train and test")


def n_train_subjects(n_subjects: int, fraction: float) -> int:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {fraction}")
    return min(max(1, int(np.floor(fraction * n_subjects + 1e-9))), n_subjects - 1)


MAX_SPLIT_DRAWS = 1000


def subject_splits(subjects, fraction: float, folds: int, seed: int, classes: dict | None = None):
    """Repeated random subject-level splits: list of (train ids, test ids).

    With ``classes`` (subject -> set of step labels) a fold's split is redrawn
    from the fold's own generator until the training side holds both classes.
    """
    subjects = list(subjects)
    n_train = n_train_subjects(len(subjects), fraction)
    splits = []
    for fold, child in enumerate(np.random.SeedSequence(seed).spawn(folds)):
        rng = np.random.default_rng(child)
        for _ in range(MAX_SPLIT_DRAWS):
            perm = rng.permutation(len(subjects))
            train = [subjects[i] for i in sorted(perm[:n_train])]
            if classes is None or len(set().union(*(classes[t] for t in train))) > 1:
                break
        else:
            raise SingleClassError(f"fold {fold}: no split with both classes among {n_train} training subjects")
        splits.append((train, [subjects[i] for i in sorted(perm[n_train:])]))
    return splits


def _run_fold(fold, train_ids, test_ids, by_subject, cfg, seed, init, freeze_encoder, channels):
    train = [s for sid in train_ids for s in by_subject[sid]]
    test = [s for sid in test_ids for s in by_subject[sid]]
    params, _ = train_supervised(train, cfg, seed, init, freeze_encoder, channels)
    x, y = stack(test)
    pred = predict_segments(params, x)
    scores = {}
    for sid in test_ids:
        mask = np.array([s.subject_id == sid for s in test])
        scores[sid] = (int(pred[mask].sum()), int(y[mask].sum()))
    confusion = {
        "tp": int(np.sum((pred == 1) & (y == 1))),
        "fp": int(np.sum((pred == 1) & (y == 0))),
        "tn": int(np.sum((pred == 0) & (y == 0))),
        "fn": int(np.sum((pred == 0) & (y == 1))),
    }
    return FoldResult(fold, float(np.mean(pred == y)), list(train_ids), list(test_ids), scores, confusion)


def evaluate(recordings, method: str, train_fraction: float, folds: int = 5, seed: int = 0,
             cfg: OptimConfig | None = None, pretrained: dict | None = None,
             freeze_encoder: bool = False, threads: int = 1, channels=E.CHANNELS) -> EvalReport:
    """Mean top-1 segment accuracy over repeated subject-level splits.

    ``e2e`` and ``moco`` need ``pretrained`` encoder weights produced from an
    unlabeled corpus; the supervised method starts from scratch.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    if folds < 1:
        raise ValueError("folds must be >= 1")
    recordings = list(recordings)
    if len(recordings) < 10:
        raise ValueError(f"evaluation needs at least 10 recordings, got {len(recordings)}")
    if method != "supervised" and pretrained is None:
        raise ValueError(f"method {method!r} requires pretrained encoder weights")
    init = pretrained if method != "supervised" else None
    by_subject: dict[str, list[Segment]] = {}
    for seg in prepare(recordings):
        by_subject.setdefault(seg.subject_id, []).append(seg)
    if len(by_subject) != len(recordings):
        raise ValueError("subject ids must be unique across recordings")
    classes = {sid: {s.label for s in segs} for sid, segs in by_subject.items()}
    if len(set().union(*classes.values())) < 2:
        raise SingleClassError("dataset contains a single class; need both valid and invalid steps")
    splits = subject_splits(sorted(by_subject), train_fraction, folds, seed, classes)
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence([seed, 1]).spawn(folds)]
    jobs = [(i, tr, te, by_subject, cfg, fold_seeds[i], init, freeze_encoder, channels)
            for i, (tr, te) in enumerate(splits)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda a: _run_fold(*a), jobs))
    else:
        results = [_run_fold(*a) for a in jobs]
    report = EvalReport(method, train_fraction, sorted(results, key=lambda r: r.fold))
    report.check_disjoint()
    return report


def write_report_csv(reports, path) -> None:
    """Rows ``method,fraction,fold,accuracy`` per fold plus a ``mean`` row per report."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "fraction", "fold", "accuracy"])
        for rep in reports:
            for f in rep.folds:
                w.writerow([rep.method, f"{rep.fraction:.6g}", f.fold, f"{f.accuracy:.6g}"])
            w.writerow([rep.method, f"{rep.fraction:.6g}", "mean", f"{rep.mean_accuracy:.6g}"])


def write_summary_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "fraction", "folds", "mean_accuracy", "tp", "fp", "tn", "fn"])
        for rep in reports:
            c = rep.confusion
            w.writerow([rep.method, f"{rep.fraction:.6g}", len(rep.folds), f"{rep.mean_accuracy:.6g}",
                        c["tp"], c["fp"], c["tn"], c["fn"]])
