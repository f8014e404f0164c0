"""Sample manifests and section-grouped cross-validation folds."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from PIL import Image

from stypath.errors import ConfigurationError, ValidationError

log = logging.getLogger(__name__)

LABELS = ("negative", "positive", "inconclusive")
CLASSES = ("negative", "positive")  # class index order used by every model
ORIGINS = ("original", "style_transfer")
MANIFEST_FIELDS = ("sample_id", "image_path", "label", "section_id", "origin")

Label = Literal["negative", "positive", "inconclusive"]


@dataclass(frozen=True)
class GlomerulusRecord:
    sample_id: str
    image_path: str
    label: Label
    section_id: str
    origin: Literal["original", "style_transfer"] = "original"

    @property
    def conclusive(self) -> bool:
        return self.label != "inconclusive"

    @property
    def class_index(self) -> int:
        return CLASSES.index(self.label)


@dataclass
class Registry:
    records: list[GlomerulusRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {}
        for r in self.records:
            if r.sample_id in self._by_id:
                raise ValidationError(f"duplicate sample_id {r.sample_id!r}")
            self._by_id[r.sample_id] = r
        for r in self.records:
            if r.origin == "style_transfer" and r.label == "inconclusive":
                raise ValidationError(f"style-transfer record {r.sample_id!r} has an inconclusive label")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, sample_id: str) -> GlomerulusRecord:
        return self._by_id[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._by_id

    @property
    def excluded(self) -> list[GlomerulusRecord]:
        """Inconclusive records: kept for bookkeeping, never put in a fold."""
        return [r for r in self.records if not r.conclusive]

    @property
    def originals(self) -> list[GlomerulusRecord]:
        return [r for r in self.records if r.origin == "original" and r.conclusive]

    @property
    def generated(self) -> list[GlomerulusRecord]:
        return [r for r in self.records if r.origin == "style_transfer"]

    def sections(self) -> list[str]:
        return sorted({r.section_id for r in self.originals})

    def subset(self, sample_ids: Iterable[str]) -> list[GlomerulusRecord]:
        return [self._by_id[s] for s in sample_ids]

    def resolve(self, record: GlomerulusRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def load_image(self, record: GlomerulusRecord) -> np.ndarray:
        """H x W x 3 float32 in [0, 1]."""
        with Image.open(self.resolve(record)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0

    def extend(self, records: Iterable[GlomerulusRecord]) -> "Registry":
        return Registry(self.records + list(records), self.root, list(self.warnings))

    def counts(self) -> dict[str, int]:
        return class_counts(self)


def _read_rows(path: Path) -> list[dict]:
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        return []
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
    if missing - {"origin"}:
        raise ValidationError(f"{path}: manifest header lacks {sorted(missing)}")
    return list(reader)


def load_manifest(path: str | Path, check_images: bool = True) -> Registry:
    """Parse a manifest CSV (``sample_id,image_path,label,section_id,origin``).

    Image paths are resolved relative to the manifest. Unreadable images are
    collected in ``registry.warnings`` rather than raising.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    records = []
    for lineno, row in enumerate(_read_rows(path), start=2):
        sid = (row.get("sample_id") or "").strip()
        section = (row.get("section_id") or "").strip()
        label = (row.get("label") or "").strip().lower()
        origin = (row.get("origin") or "original").strip().lower()
        if not sid:
            raise ValidationError(f"{path}:{lineno}: empty sample_id")
        if not section:
            raise ValidationError(f"{path}:{lineno}: sample {sid!r} has no section_id")
        if label not in LABELS:
            raise ValidationError(f"{path}:{lineno}: unknown label {label!r}")
        if origin not in ORIGINS:
            raise ValidationError(f"{path}:{lineno}: unknown origin {origin!r}")
        records.append(GlomerulusRecord(sid, row["image_path"].strip(), label, section, origin))
    registry = Registry(records, path.parent)
    if check_images:
        for r in records:
            p = registry.resolve(r)
            if not p.is_file():
                registry.warnings.append(f"{r.sample_id}: image {p} not readable")
    for w in registry.warnings:
        log.warning(w)
    log.info("loaded %d records from %s: %s", len(records), path, class_counts(registry))
    return registry


def write_manifest(records: Iterable[GlomerulusRecord], path: str | Path, comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for r in records:
        writer.writerow([r.sample_id, r.image_path, r.label, r.section_id, r.origin])
    Path(path).write_text(buf.getvalue())


def class_counts(records: Iterable[GlomerulusRecord], subset: Iterable[str] | None = None,
                 by_origin: bool = False) -> dict:
    """Exact per-label counts, optionally restricted to ``subset`` sample ids."""
    records = list(records)
    if subset is not None:
        wanted = set(subset)
        records = [r for r in records if r.sample_id in wanted]
    base = {lab: 0 for lab in CLASSES}
    if by_origin:
        out = {o: dict(base) for o in ORIGINS}
        for r in records:
            if r.conclusive:
                out[r.origin][r.label] += 1
        return out
    for r in records:
        if r.conclusive:
            base[r.label] += 1
    return base


@dataclass
class Fold:
    test_sections: list[str]
    test_samples: list[str]
    train_samples: list[str]


@dataclass
class FoldSplit:
    k: int
    seed: int
    folds: list[Fold]
    stratified: bool = True

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "stratified": self.stratified,
            "folds": [
                {"test_sections": f.test_sections, "test_samples": f.test_samples, "train_samples": f.train_samples}
                for f in self.folds
            ],
        }

    def dumps(self, provenance: dict | None = None) -> str:
        d = self.to_dict()
        if provenance:
            d["provenance"] = provenance
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        Path(path).write_text(self.dumps(provenance))

    @classmethod
    def load(cls, path: str | Path) -> "FoldSplit":
        d = json.loads(Path(path).read_text())
        try:
            folds = [Fold(list(f["test_sections"]), list(f["test_samples"]), list(f["train_samples"]))
                     for f in d["folds"]]
            return cls(int(d["k"]), int(d["seed"]), folds, bool(d.get("stratified", True)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed splits file ({exc})") from None


def section_labels(records: Sequence[GlomerulusRecord]) -> dict[str, str]:
    """Majority label of each section's conclusive original records (ties -> positive)."""
    votes: dict[str, Counter] = {}
    for r in records:
        votes.setdefault(r.section_id, Counter())[r.label] += 1
    return {s: ("positive" if c["positive"] >= c["negative"] else "negative") for s, c in votes.items()}


def grouped_kfold(registry: Registry, k: int = 5, seed: int = 0, stratified: bool = True) -> FoldSplit:
    """Assign whole sections to ``k`` test folds.

    Sections are shuffled (within class when ``stratified``) and dealt
    round-robin over one running counter, so total and per-class section
    counts per fold each differ by at most one.
    """
    originals = registry.originals
    sections = sorted({r.section_id for r in originals})
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if len(sections) < k:
        raise ConfigurationError(f"{len(sections)} sections cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    if stratified:
        labels = section_labels(originals)
        order = []
        for cls in CLASSES:
            group = [s for s in sections if labels[s] == cls]
            order.extend(group[i] for i in rng.permutation(len(group)))
    else:
        order = [sections[i] for i in rng.permutation(len(sections))]
    fold_of = {s: i % k for i, s in enumerate(order)}

    folds = []
    for i in range(k):
        test_sections = sorted(s for s in sections if fold_of[s] == i)
        ts = set(test_sections)
        folds.append(Fold(
            test_sections=test_sections,
            test_samples=[r.sample_id for r in originals if r.section_id in ts],
            train_samples=[r.sample_id for r in originals if r.section_id not in ts],
        ))
    return FoldSplit(k, seed, folds, stratified)


def check_split(registry: Registry, split: FoldSplit) -> list[str]:
    """Violations of the fold contract; empty when the split is sound."""
    problems = []
    originals = {r.sample_id for r in registry.originals}
    seen: Counter = Counter()
    for i, f in enumerate(split.folds):
        train_sec = {registry[s].section_id for s in f.train_samples}
        test_sec = {registry[s].section_id for s in f.test_samples}
        if train_sec & test_sec:
            problems.append(f"fold {i}: sections in both train and test: {sorted(train_sec & test_sec)}")
        for s in f.test_samples + f.train_samples:
            r = registry[s]
            if not r.conclusive:
                problems.append(f"fold {i}: inconclusive record {s}")
            if r.origin != "original" and s in f.test_samples:
                problems.append(f"fold {i}: style-transfer record {s} in test")
        seen.update(f.test_samples)
    if set(seen) != originals:
        problems.append("test folds do not cover all original conclusive records")
    dup = [s for s, c in seen.items() if c > 1]
    if dup:
        problems.append(f"records in more than one test fold: {dup[:5]}")
    return problems


def fold_records(registry: Registry, split: FoldSplit, fold: int,
                 include_generated: bool = True) -> tuple[list[GlomerulusRecord], list[GlomerulusRecord]]:
    """(train, test) records for ``fold``; generated records join train only.

    Generated records inherit their content image's section, so any whose
    section lands in this fold's test set would leak and are rejected.
    """
    if not 0 <= fold < split.k:
        raise ConfigurationError(f"fold {fold} out of range for k={split.k}")
    f = split.folds[fold]
    train = registry.subset(f.train_samples)
    test = registry.subset(f.test_samples)
    if include_generated:
        test_sections = set(f.test_sections)
        gen = registry.generated
        leaks = [r.sample_id for r in gen if r.section_id in test_sections]
        if leaks:
            raise ValidationError(f"style-transfer records derived from test sections of fold {fold}: {leaks[:5]}")
        train = train + gen
    return train, test
