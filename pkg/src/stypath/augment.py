"""Offline style-transfer augmentation and online geometric transforms."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, PngImagePlugin
from scipy.ndimage import rotate

from stypath import backbone as bb
from stypath.data import CLASSES, GlomerulusRecord, Registry
from stypath.errors import ConfigurationError, ValidationError
from stypath.style import StyleTransferConfig, synthesize_batch

log = logging.getLogger(__name__)

MAX_RETRIES = 3


@dataclass(frozen=True)
class Pairing:
    content_id: str
    style_id: str
    output_id: str
    label: str
    attempt: int = 0


@dataclass
class AugmentationPlan:
    n_per_class: int
    seed: int
    pairing_log: list[Pairing] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    def prefix(self, n: int) -> "AugmentationPlan":
        """The plan that ``n`` samples per class would have produced.

        Pair ``j`` of a class depends only on ``(seed, class, j)``, so smaller
        plans are exact prefixes of larger ones.
        """
        if n > self.n_per_class:
            raise ValidationError(f"cannot take {n} per class from a plan of {self.n_per_class}")
        keep = []
        for cls in CLASSES:
            keep.extend([p for p in self.pairing_log if p.label == cls][:n])
        return AugmentationPlan(n, self.seed, keep, [s for s in self.skipped if s.get("index", 0) < n])

    def to_dict(self) -> dict:
        return {
            "n_per_class": self.n_per_class,
            "seed": self.seed,
            "pairing_log": [asdict(p) for p in self.pairing_log],
            "skipped": self.skipped,
        }

    def dumps(self, provenance: dict | None = None) -> str:
        d = self.to_dict()
        if provenance:
            d["provenance"] = provenance
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPlan":
        return cls(int(d["n_per_class"]), int(d["seed"]), [Pairing(**p) for p in d["pairing_log"]],
                   list(d.get("skipped", [])))


def _draw(train: Sequence[GlomerulusRecord], by_class: dict[str, list[GlomerulusRecord]],
          seed: int, cls: str, j: int, attempt: int) -> tuple[GlomerulusRecord, GlomerulusRecord]:
    rng = np.random.default_rng([seed, CLASSES.index(cls), j, attempt])
    content = by_class[cls][rng.integers(len(by_class[cls]))]
    # style ignores label and section
    style = train[rng.integers(len(train))]
    return content, style


def plan_pairings(train: Sequence[GlomerulusRecord], n_per_class: int, seed: int,
                  prefix: str = "st") -> AugmentationPlan:
    """Draw (content, style) pairs: content from the target class, style from the whole fold."""
    train = [r for r in train if r.origin == "original" and r.conclusive]
    by_class = {c: [r for r in train if r.label == c] for c in CLASSES}
    if n_per_class > 0:
        empty = [c for c, rs in by_class.items() if not rs]
        if empty:
            raise ValidationError(f"training fold has no samples of class(es) {empty}")
    plan = AugmentationPlan(n_per_class, seed)
    for cls in CLASSES:
        for j in range(n_per_class):
            content, style = _draw(train, by_class, seed, cls, j, 0)
            plan.pairing_log.append(Pairing(content.sample_id, style.sample_id, f"{prefix}-{cls[:3]}-{j:05d}", cls))
    return plan


def _save_png(img: np.ndarray, path: Path, provenance: dict | None) -> None:
    info = PngImagePlugin.PngInfo()
    if provenance:
        info.add_text("provenance", json.dumps(provenance, sort_keys=True))
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path, pnginfo=info)


def build_augmented_set(registry: Registry, train: Sequence[GlomerulusRecord], n_per_class: int,
                        cfg: StyleTransferConfig, seed: int, out_dir: str | Path,
                        backbone: bb.VGGBackbone | None = None, batch_size: int = 64,
                        prefix: str = "st", provenance: dict | None = None,
                        synth: Callable = synthesize_batch) -> tuple[AugmentationPlan, list[GlomerulusRecord]]:
    """Generate ``n_per_class`` stylized samples per class from the training fold.

    Images are written to ``out_dir/images`` as PNG. Each output inherits
    its content image's label and section. Pairs whose synthesis diverges
    are redrawn up to ``MAX_RETRIES`` times, then skipped and logged.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    train = [r for r in train if r.origin == "original" and r.conclusive]
    plan = plan_pairings(train, n_per_class, seed, prefix)
    if not plan.pairing_log:
        return plan, []
    by_class = {c: [r for r in train if r.label == c] for c in CLASSES}
    net = backbone or bb.VGGBackbone(cfg.checkpoint_id, max_layer=cfg.deepest_layer())
    cache: dict[str, np.ndarray] = {}

    def image(sample_id):
        if sample_id not in cache:
            cache[sample_id] = registry.load_image(registry[sample_id])
        return cache[sample_id]

    index_of = {p.output_id: int(p.output_id.rsplit("-", 1)[1]) for p in plan.pairing_log}
    pending = list(plan.pairing_log)
    final: dict[str, Pairing] = {}
    images: dict[str, np.ndarray] = {}
    while pending:
        for start in range(0, len(pending), batch_size):
            chunk = pending[start:start + batch_size]
            seeds = [int(np.random.default_rng([seed, CLASSES.index(p.label), index_of[p.output_id], p.attempt, 7])
                         .integers(2**31)) for p in chunk]
            results = synth([image(p.content_id) for p in chunk], [image(p.style_id) for p in chunk],
                            cfg, net, seeds)
            for p, res in zip(chunk, results):
                if res.diverged_iteration is None:
                    final[p.output_id] = p
                    images[p.output_id] = res.image
        retry = []
        for p in pending:
            if p.output_id in final:
                continue
            log.warning("synthesis diverged for %s (attempt %d)", p.output_id, p.attempt)
            if p.attempt + 1 > MAX_RETRIES:
                plan.skipped.append({"output_id": p.output_id, "index": index_of[p.output_id],
                                     "attempts": p.attempt + 1})
                continue
            c, s = _draw(train, by_class, seed, p.label, index_of[p.output_id], p.attempt + 1)
            retry.append(Pairing(c.sample_id, s.sample_id, p.output_id, p.label, p.attempt + 1))
        pending = retry

    plan.pairing_log = [final[p.output_id] for p in plan.pairing_log if p.output_id in final]
    records = []
    for p in plan.pairing_log:
        rel = Path("images") / f"{p.output_id}.png"
        _save_png(images[p.output_id], out / rel, provenance)
        content = registry[p.content_id]
        records.append(GlomerulusRecord(p.output_id, str(rel), p.label, content.section_id, "style_transfer"))
    return plan, records


@dataclass
class OnlineTransformConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_crop: float = 0.5
    max_crop_fraction: float = 0.30
    p_rotate: float = 0.5
    max_rotation_deg: float = 90.0
    target_size: tuple[int, int] = (256, 256)

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        for name in ("p_hflip", "p_vflip", "p_crop", "p_rotate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must be a probability")
        if not 0 <= self.max_crop_fraction <= 0.30:
            raise ConfigurationError("max_crop_fraction must be in [0, 0.30]")
        if not 0 <= self.max_rotation_deg <= 90:
            raise ConfigurationError("max_rotation_deg must be in [0, 90]")

    @classmethod
    def disabled(cls, target_size=(256, 256)) -> "OnlineTransformConfig":
        return cls(0, 0, 0, 0.3, 0, 90.0, target_size)


def online_transform(image: np.ndarray, cfg: OnlineTransformConfig, rng: np.random.Generator,
                     record: dict | None = None) -> np.ndarray:
    """Random flips, crop and rotation, then resize to ``cfg.target_size``.

    Draws from ``rng`` in a fixed order regardless of which transforms fire,
    so one stream always yields the same decisions. Applied parameters are
    written into ``record`` when it is given.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError(f"expected H x W x 3 image, got {img.shape}")
    u = rng.random(4)
    crop_frac = rng.uniform(0, cfg.max_crop_fraction, 2)
    crop_pos = rng.random(2)
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    applied = {}
    if u[0] < cfg.p_hflip:
        img = img[:, ::-1]
        applied["hflip"] = True
    if u[1] < cfg.p_vflip:
        img = img[::-1]
        applied["vflip"] = True
    if u[2] < cfg.p_crop:
        h, w = img.shape[:2]
        ch = max(1, int(round(h * (1 - crop_frac[0]))))
        cw = max(1, int(round(w * (1 - crop_frac[1]))))
        y0 = int(round(crop_pos[0] * (h - ch)))
        x0 = int(round(crop_pos[1] * (w - cw)))
        img = img[y0:y0 + ch, x0:x0 + cw]
        applied["crop"] = [y0, x0, ch, cw]
    if u[3] < cfg.p_rotate:
        img = np.clip(rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="reflect"), 0, 1)
        applied["rotate"] = float(angle)
    if record is not None:
        record.update(applied)
    return bb.resize_image(np.ascontiguousarray(img, dtype=np.float32), cfg.target_size)
