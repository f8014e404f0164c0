"""Synthetic two-class corpus where sections differ only by stain-like style.

The class concept is morphological: ``positive`` images show a hollow ring
("capsule"), ``negative`` images a filled disk, both with jittered position,
radius, eccentricity and orientation. Every section draws one style (hue,
saturation, brightness, grain), and hue is correlated with class so a
texture-biased classifier can shortcut on color. A fraction of sections get
the other class's hue band, which breaks the shortcut at test time.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from stypath.errors import ConfigurationError

HUE_BINS = 72
# chi-square distance between section hue histograms must exceed this in bias-stress mode
SEPARATION_THRESHOLD = 0.5


@dataclass
class SyntheticSpec:
    n_sections: int = 10  # per class
    images_per_section: int = 8
    image_size: int = 32
    seed: int = 0
    bias_stress: bool = True
    # fraction of sections whose hue comes from the other class's band
    atypical_fraction: float = 0.3
    hue_jitter: float = 0.004
    grain_sigma: tuple[float, float] = (0.6, 1.6)
    grain_amplitude: tuple[float, float] = (0.08, 0.2)
    intensity: tuple[float, float] = (0.75, 1.0)
    # how strongly the shape modulates saturation and brightness; lower makes
    # the shape cue harder to learn than the section color
    shape_contrast: float = 1.0

    def __post_init__(self):
        self.grain_sigma = tuple(self.grain_sigma)
        self.grain_amplitude = tuple(self.grain_amplitude)
        self.intensity = tuple(self.intensity)
        if self.n_sections < 1 or self.images_per_section < 1:
            raise ConfigurationError("need at least one section per class and one image per section")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if not 0 <= self.atypical_fraction <= 0.5:
            raise ConfigurationError("atypical_fraction must be in [0, 0.5]")
        if not 0 < self.shape_contrast <= 1:
            raise ConfigurationError("shape_contrast must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown fixture keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SectionStyle:
    section_id: str
    label: str
    hue: float
    saturation: float
    value: float
    grain_sigma: float
    grain_amplitude: float
    atypical: bool


def section_styles(spec: SyntheticSpec) -> list[SectionStyle]:
    """One style per section; depends only on the spec and the section index."""
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.n_sections
    total = 2 * n
    if spec.bias_stress:
        # disjoint hue slots: positive band in [0, .5), negative in [.5, 1)
        slots = (np.arange(total) + 0.5) / total
        pos_band, neg_band = list(slots[:n]), list(slots[n:])
    else:
        pos_band = list(rng.uniform(0.0, 0.5, n))
        neg_band = list(rng.uniform(0.5, 1.0, n))
    rng.shuffle(pos_band)
    rng.shuffle(neg_band)
    n_swap = int(round(spec.atypical_fraction * n))
    hues = {"positive": pos_band, "negative": neg_band}
    atypical = {"positive": set(range(n_swap)), "negative": set(range(n_swap))}
    for i in range(n_swap):
        hues["positive"][i], hues["negative"][i] = hues["negative"][i], hues["positive"][i]

    styles = []
    for label, prefix in (("positive", "P"), ("negative", "N")):
        for i in range(n):
            srng = np.random.default_rng([spec.seed, 2, 0 if label == "positive" else 1, i])
            styles.append(SectionStyle(
                section_id=f"{prefix}{i:03d}",
                label=label,
                hue=float((hues[label][i] + srng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0),
                saturation=float(srng.uniform(0.55, 0.8)),
                value=float(srng.uniform(*spec.intensity)),
                grain_sigma=float(srng.uniform(*spec.grain_sigma)),
                grain_amplitude=float(srng.uniform(*spec.grain_amplitude)),
                atypical=i in atypical[label],
            ))
    return styles


def _shape_mask(label: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cy, cx = 0.5 + rng.uniform(-0.08, 0.08, 2)
    radius = rng.uniform(0.28, 0.38)
    ecc = rng.uniform(0.8, 1.15)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / ecc
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt(u**2 + v**2) / radius
    soft = 1.5 / (radius * size)
    outer = np.clip((1 - r) / soft + 0.5, 0, 1)
    if label == "negative":
        return outer
    inner_r = rng.uniform(0.45, 0.6)
    inner = np.clip((inner_r - r) / soft + 0.5, 0, 1)
    return outer * (1 - inner)


def render(label: str, style: SectionStyle, size: int, rng: np.random.Generator,
           shape_contrast: float = 1.0) -> np.ndarray:
    """One H x W x 3 float image in [0, 1]."""
    mask = shape_contrast * _shape_mask(label, size, rng)
    grain = gaussian_filter(rng.standard_normal((size, size)), style.grain_sigma)
    grain /= grain.std() + 1e-12
    hsv = np.empty((size, size, 3))
    hsv[..., 0] = style.hue
    # tissue: saturated and darker; background: pale tint of the same hue
    hsv[..., 1] = style.saturation * (0.35 + 0.65 * mask)
    hsv[..., 2] = np.clip(style.value * (0.95 - 0.45 * mask) * (1 + style.grain_amplitude * grain), 0, 1)
    return np.clip(hsv_to_rgb(hsv), 0, 1)


def hue_histogram(images: list[np.ndarray]) -> np.ndarray:
    """Saturation-weighted hue histogram, normalized to sum 1."""
    hist = np.zeros(HUE_BINS)
    for img in images:
        hsv = rgb_to_hsv(np.clip(img, 0, 1))
        h, _ = np.histogram(hsv[..., 0], bins=HUE_BINS, range=(0, 1), weights=hsv[..., 1])
        hist += h
    return hist / max(hist.sum(), 1e-12)


def chi2_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = a + b
    ok = denom > 0
    return float(0.5 * np.sum((a[ok] - b[ok]) ** 2 / denom[ok]))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def generate(spec: SyntheticSpec, out_dir: str | Path) -> dict:
    """Write images and ``manifest.csv``; returns a summary with separation stats.

    Raises ``AssertionError`` if bias-stress mode fails to separate the
    section hue histograms.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    styles = section_styles(spec)
    rows = []
    per_section: dict[str, list[np.ndarray]] = {}
    for sidx, style in enumerate(styles):
        imgs = []
        for j in range(spec.images_per_section):
            rng = np.random.default_rng([spec.seed, 3, sidx, j])
            img = _to_uint8(render(style.label, style, spec.image_size, rng, spec.shape_contrast))
            sample_id = f"{style.section_id}-{j:03d}"
            rel = f"images/{sample_id}.png"
            Image.fromarray(img).save(out / rel)
            imgs.append(img.astype(np.float64) / 255)
            rows.append({"sample_id": sample_id, "image_path": rel, "label": style.label,
                         "section_id": style.section_id, "origin": "original"})
        per_section[style.section_id] = imgs

    hists = {sid: hue_histogram(imgs) for sid, imgs in per_section.items()}
    dists = [chi2_distance(hists[a], hists[b]) for a, b in itertools.combinations(hists, 2)]
    min_dist = min(dists) if dists else float("nan")
    if spec.bias_stress and dists:
        assert min_dist > SEPARATION_THRESHOLD, (
            f"section hue histograms not separable: min chi2 {min_dist:.3f} <= {SEPARATION_THRESHOLD}"
        )

    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample_id", "image_path", "label", "section_id", "origin"])
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "spec": asdict(spec),
        "n_records": len(rows),
        "counts": {lab: sum(r["label"] == lab for r in rows) for lab in ("negative", "positive")},
        "min_section_hue_chi2": min_dist,
        "separation_threshold": SEPARATION_THRESHOLD,
        "sections": [asdict(s) for s in styles],
    }
    (out / "fixture.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def file_hashes(out_dir: str | Path) -> dict[str, str]:
    out = Path(out_dir)
    return {
        str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(out.rglob("*")) if p.is_file()
    }
