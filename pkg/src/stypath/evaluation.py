"""Balanced accuracy, uncertainty-filtering curves and the augmentation sweep."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from stypath.errors import ValidationError

log = logging.getLogger(__name__)

RETENTION_LEVELS = tuple(np.round(np.linspace(1.0, 0.0, 21), 2))


def balanced_accuracy(predictions, truths, n_classes: int | None = None, warn: bool = True) -> float:
    """Mean per-class recall over the classes present in ``truths``."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValidationError(f"predictions {pred.shape} and truths {true.shape} differ in length")
    if true.size == 0:
        raise ValidationError("no samples")
    classes = range(n_classes) if n_classes else np.unique(true)
    recalls = []
    for c in classes:
        mask = true == c
        if not mask.any():
            if warn:
                warnings.warn(f"class {c} has no true samples; excluded from balanced accuracy", stacklevel=2)
            continue
        recalls.append(float((pred[mask] == c).mean()))
    return float(np.mean(recalls))


def accuracy(predictions, truths) -> float:
    pred, true = np.asarray(predictions), np.asarray(truths)
    if pred.shape != true.shape or true.size == 0:
        raise ValidationError("predictions and truths must be non-empty and aligned")
    return float((pred == true).mean())


@dataclass
class CurvePoint:
    level: float  # nominal retention
    retained_fraction: float
    n_retained: int
    accuracy: float  # balanced
    plain_accuracy: float


@dataclass
class FilterCurve:
    points: list[CurvePoint]

    def as_pairs(self) -> list[tuple[float, float]]:
        return [(p.retained_fraction, p.accuracy) for p in self.points]

    def at(self, level: float) -> CurvePoint:
        for p in self.points:
            if abs(p.level - level) < 1e-9:
                return p
        raise KeyError(level)

    def to_dict(self) -> dict:
        return {"points": [asdict(p) for p in self.points]}


def filter_curve(uncertainty, predictions, truths, sample_ids: Sequence[str] | None = None,
                 levels: Sequence[float] = RETENTION_LEVELS, n_classes: int | None = None) -> FilterCurve:
    """Accuracy after discarding the most uncertain samples.

    For each retention level the ``round(level * n)`` least-uncertain
    samples are kept; ties in uncertainty are broken by sample id so the
    curve is reproducible. Levels that would keep no sample, or that keep
    the same count as a previous level, are dropped.
    """
    u = np.asarray(uncertainty, dtype=np.float64)
    pred, true = np.asarray(predictions), np.asarray(truths)
    n = u.size
    if n == 0:
        raise ValidationError("empty fold")
    if not (pred.size == true.size == n):
        raise ValidationError("uncertainty, predictions and truths must align")
    ids = list(sample_ids) if sample_ids is not None else [f"{i:09d}" for i in range(n)]
    order = sorted(range(n), key=lambda i: (-u[i], ids[i]))  # most uncertain first
    points, seen = [], set()
    for level in levels:
        keep = int(round(level * n))
        if keep < 1 or keep in seen:
            continue
        seen.add(keep)
        kept = np.array(order[n - keep:])
        points.append(CurvePoint(
            level=float(level),
            retained_fraction=keep / n,
            n_retained=keep,
            accuracy=balanced_accuracy(pred[kept], true[kept], warn=False),
            plain_accuracy=accuracy(pred[kept], true[kept]),
        ))
    return FilterCurve(points)


def aggregate_curves(curves: Sequence[FilterCurve], key: str = "accuracy") -> dict:
    """Across-fold mean and std per nominal retention level."""
    by_level: dict[float, list[float]] = {}
    for c in curves:
        for p in c.points:
            by_level.setdefault(p.level, []).append(getattr(p, key))
    levels = sorted(by_level, reverse=True)
    return {
        "levels": levels,
        "mean": [float(np.mean(by_level[l])) for l in levels],
        "std": [float(np.std(by_level[l])) for l in levels],
        "n_folds": [len(by_level[l]) for l in levels],
    }


@dataclass
class SweepPoint:
    n_per_class: int
    mean_accuracy: float
    per_fold: list[float]
    std_accuracy: float = 0.0
    mean_plain_accuracy: float = 0.0
    per_fold_plain: list[float] = field(default_factory=list)


@dataclass
class SaturationSweep:
    points: list[SweepPoint]
    k: int

    def __post_init__(self):
        ns = [p.n_per_class for p in self.points]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValidationError("sweep n values must be strictly increasing")
        if any(len(p.per_fold) != self.k for p in self.points):
            raise ValidationError(f"every sweep point needs {self.k} per-fold accuracies")

    def point(self, n: int) -> SweepPoint:
        return next(p for p in self.points if p.n_per_class == n)

    @property
    def baseline(self) -> SweepPoint:
        return self.point(0)

    @property
    def best(self) -> SweepPoint:
        """Highest mean balanced accuracy; ties go to the smaller n."""
        return max(self.points, key=lambda p: (p.mean_accuracy, -p.n_per_class))

    def to_dict(self) -> dict:
        return {"k": self.k, "points": [asdict(p) for p in self.points],
                "best_n": self.best.n_per_class}


def sweep_point(n: int, fold_accuracies: Sequence[float], fold_plain: Sequence[float] = ()) -> SweepPoint:
    acc = [float(a) for a in fold_accuracies]
    plain = [float(a) for a in fold_plain]
    return SweepPoint(n, float(np.mean(acc)), acc, float(np.std(acc)),
                      float(np.mean(plain)) if plain else 0.0, plain)


def evaluate_posteriors(post: dict, levels: Sequence[float] = RETENTION_LEVELS) -> dict:
    """Metrics for one posteriors table (see :func:`stypath.bayes.read_posteriors`)."""
    pred = post["mean_probs"].argmax(axis=1)
    true = post["true_label"]
    curve = filter_curve(post["uncertainty_norm"], pred, true, list(post["sample_id"]), levels)
    return {
        "n_samples": int(true.size),
        "balanced_accuracy": balanced_accuracy(pred, true),
        "accuracy": accuracy(pred, true),
        "filter_curve": curve.to_dict(),
    }


def saturation_sweep(registry, split, n_values: Sequence[int], st_cfg, train_cfg, T: int, seed: int,
                     work_dir: str | Path, measure: str = "mutual_information", backbone=None) -> tuple[SaturationSweep, dict]:
    """Train/evaluate every fold at every ``n`` style-transfer samples per class.

    Generation runs once per fold at ``max(n_values)``; each smaller ``n``
    uses the matching prefix of that plan, which is what a separate run at
    ``n`` would have drawn. Returns the sweep and per-cell filter curves.
    """
    from stypath import augment, bayes, data
    from stypath.seeding import derive_seed

    n_values = list(n_values)
    if n_values != sorted(n_values) or 0 not in n_values:
        raise ValidationError("n_values must be ascending and include 0")
    work = Path(work_dir)
    n_max = max(n_values)
    acc = {n: [] for n in n_values}
    plain = {n: [] for n in n_values}
    curves = {n: [] for n in n_values}
    for fold in range(split.k):
        train_recs, test_recs = data.fold_records(registry, split, fold, include_generated=False)
        plan, generated = augment.build_augmented_set(
            registry, train_recs, n_max, st_cfg, derive_seed(seed, "augment", fold),
            work / f"fold{fold}", backbone=backbone, prefix=f"st-f{fold}")
        gen_by_id = {r.sample_id: r for r in generated}
        test_imgs = [registry.load_image(r) for r in test_recs]
        truths = np.array([r.class_index for r in test_recs])
        for n in n_values:
            sub = plan.prefix(n)
            extra = [_rebase(gen_by_id[p.output_id], (work / f"fold{fold}").resolve()) for p in sub.pairing_log]
            cfg = replace(train_cfg, seed=derive_seed(seed, "train", fold))
            model, _ = bayes.train(registry.extend(extra), train_recs + extra, cfg)
            posts = bayes.mc_predict(model, test_imgs, T, cfg.input_size, measure=measure,
                                     seed=derive_seed(seed, "predict", fold))
            pred = np.array([p.predicted for p in posts])
            acc[n].append(balanced_accuracy(pred, truths))
            plain[n].append(accuracy(pred, truths))
            curves[n].append(filter_curve([p.uncertainty_norm for p in posts], pred, truths,
                                          [r.sample_id for r in test_recs]))
            log.info("fold %d n=%d balanced accuracy %.3f", fold, n, acc[n][-1])
    sweep = SaturationSweep([sweep_point(n, acc[n], plain[n]) for n in n_values], split.k)
    return sweep, {"curves": curves}


def _rebase(record, root: Path):
    return replace(record, image_path=str(Path(root) / record.image_path))
