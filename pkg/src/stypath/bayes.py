"""Classifier training and MC-dropout predictive posteriors."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn

from stypath import backbone as bb
from stypath.augment import OnlineTransformConfig, online_transform
from stypath.data import CLASSES, GlomerulusRecord, Registry
from stypath.errors import ConfigurationError, StypathError, ValidationError
from stypath.models import DenseNet, build_classifier, set_mc_dropout

log = logging.getLogger(__name__)

Measure = Literal["mutual_information", "entropy"]


class TrainingError(StypathError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 10
    learning_rate: float = 1e-4
    dropout_rate: float = 0.1
    input_size: tuple[int, int] = (256, 256)
    pretrained: bool = True
    arch: str = "densenet121"
    class_weighting: bool = False
    online: OnlineTransformConfig = field(default_factory=OnlineTransformConfig)
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if isinstance(self.online, dict):
            self.online = OnlineTransformConfig(**self.online)
        self.online.target_size = self.input_size
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError("dropout_rate must be in [0, 1)")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["online"]["target_size"] = list(self.online.target_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        if "online" in d:
            d["online"] = OnlineTransformConfig(**d["online"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def stable_key(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Online-transform stream for one sample in one epoch.

    Keyed by sample id, so adding generated samples leaves the streams of
    the original samples untouched.
    """
    return np.random.default_rng([seed, epoch, stable_key(sample_id)])


def _stack(images: Sequence[np.ndarray]) -> torch.Tensor:
    return bb.normalize(torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float())


def _batches(order: list[int], size: int) -> list[list[int]]:
    out = [order[i:i + size] for i in range(0, len(order), size)]
    # batch norm cannot train on a lone sample with 1x1 maps
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


def save_checkpoint(payload: dict, path: str | Path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str | Path) -> tuple[DenseNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(payload["train_config"])
    model, _ = build_classifier(cfg.arch, len(payload["classes"]), cfg.dropout_rate, pretrained=False)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def train(registry: Registry, records: Sequence[GlomerulusRecord], cfg: TrainConfig,
          checkpoint_path: str | Path | None = None, provenance: dict | None = None) -> tuple[DenseNet, dict]:
    """Fit a DenseNet on ``records``; returns ``(model, training log)``.

    Online transforms are redrawn every epoch from :func:`sample_rng`.
    """
    records = [r for r in records if r.conclusive]
    if not records:
        raise ValidationError("no training records")
    present = {r.label for r in records}
    missing = [c for c in CLASSES if c not in present]
    if missing:
        raise ConfigurationError(f"class(es) {missing} absent from the training set")

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model, loaded = build_classifier(cfg.arch, len(CLASSES), cfg.dropout_rate, cfg.pretrained)
        images = [registry.load_image(r) for r in records]
        labels = torch.tensor([r.class_index for r in records])
        if cfg.class_weighting:
            counts = torch.bincount(labels, minlength=len(CLASSES)).float()
            weight = counts.sum() / (len(CLASSES) * counts)
        else:
            weight = None
        criterion = nn.CrossEntropyLoss(weight=weight)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        order_gen = torch.Generator().manual_seed(cfg.seed)

        log_data = {
            "header": {
                "epochs": cfg.epochs, "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
                "dropout_rate": cfg.dropout_rate, "input_size": list(cfg.input_size), "arch": cfg.arch,
                "pretrained_requested": cfg.pretrained, "pretrained_loaded": loaded,
                "n_train": len(records),
                "n_generated": sum(r.origin == "style_transfer" for r in records),
                "config_hash": cfg.hash(),
            },
            "epochs": [],
        }
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            model.train()
            perm = torch.randperm(len(records), generator=order_gen).tolist()
            total, correct, seen = 0.0, 0, 0
            for b, idx in enumerate(_batches(perm, cfg.batch_size)):
                batch = _stack([online_transform(images[i], cfg.online, sample_rng(cfg.seed, epoch, records[i].sample_id))
                                for i in idx])
                y = labels[idx]
                opt.zero_grad()
                logits = model(batch)
                loss = criterion(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingError("non-finite training loss", epoch, b)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                correct += int((logits.argmax(1) == y).sum())
                seen += len(idx)
            entry = {
                "epoch": epoch + 1,
                "loss": total / seen,
                "accuracy": correct / seen,
                "online_stream": hashlib.sha256(f"{cfg.seed}:{epoch}".encode()).hexdigest()[:12],
            }
            log_data["epochs"].append(entry)
            log.info("epoch %d loss %.4f acc %.3f", entry["epoch"], entry["loss"], entry["accuracy"])
        log_data["wall_time"] = time.perf_counter() - t0

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint({
            "state_dict": model.state_dict(),
            "classes": list(CLASSES),
            "train_config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "pretrained_loaded": loaded,
            "provenance": provenance or {},
        }, checkpoint_path)
    return model, log_data


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def epistemic_uncertainty(samples, measure: Measure = "mutual_information") -> float:
    """Dispersion of a ``T x C`` stack of MC softmax vectors.

    ``mutual_information``: entropy of the mean minus the mean per-pass
    entropy; exactly 0 when every pass agrees. ``entropy``: entropy of the
    mean vector.
    """
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if s.shape[0] < 1:
        raise ValidationError("need at least one sample vector")
    h_mean = float(entropy(s.mean(axis=0)))
    if measure == "entropy":
        return h_mean
    if measure == "mutual_information":
        if np.all(s == s[0]):
            return 0.0
        return max(0.0, h_mean - float(entropy(s, axis=1).mean()))
    raise ConfigurationError(f"unknown uncertainty measure {measure!r}")


def normalize_uncertainty(raw, n_classes: int = 2, method: Literal["ln_c", "minmax"] = "ln_c") -> np.ndarray:
    """Map raw scores to [0, 1]: divide by ``ln C`` or min-max over the batch."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValidationError("no scores to normalize")
    if method == "ln_c":
        if n_classes < 2:
            raise ValidationError("ln C normalization needs C >= 2")
        return np.clip(raw / math.log(n_classes), 0.0, 1.0)
    if method == "minmax":
        lo, hi = raw.min(), raw.max()
        return np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    raise ConfigurationError(f"unknown normalization {method!r}")


@dataclass
class PredictivePosterior:
    samples: np.ndarray  # T x C
    mean: np.ndarray
    uncertainty_raw: float
    uncertainty_norm: float
    predictive_entropy: float
    mutual_information: float

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.mean))

    @classmethod
    def from_samples(cls, samples, measure: Measure = "mutual_information",
                     n_classes: int | None = None) -> "PredictivePosterior":
        s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        c = n_classes or s.shape[1]
        raw = epistemic_uncertainty(s, measure)
        return cls(
            samples=s,
            mean=s.mean(axis=0),
            uncertainty_raw=raw,
            uncertainty_norm=float(normalize_uncertainty([raw], c)[0]),
            predictive_entropy=epistemic_uncertainty(s, "entropy"),
            mutual_information=epistemic_uncertainty(s, "mutual_information"),
        )


def mc_probabilities(model: nn.Module, images: Sequence[np.ndarray], T: int, input_size=(256, 256),
                     stochastic: bool = True, seed: int = 0, batch_size: int = 64) -> np.ndarray:
    """``B x T x C`` softmax outputs from ``T`` dropout-perturbed passes per image."""
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    x = _stack([bb.resize_image(np.asarray(im, dtype=np.float32), tuple(input_size)) for im in images])
    n = x.shape[0]
    set_mc_dropout(model, stochastic)
    out = []
    with torch.random.fork_rng(), torch.no_grad():
        torch.manual_seed(seed)
        # dropout masks are per element, so stacking the T repeats gives independent passes
        rep = x.repeat_interleave(T, dim=0) if stochastic else x
        for start in range(0, rep.shape[0], batch_size):
            out.append(torch.softmax(model(rep[start:start + batch_size]).double(), dim=1))
    set_mc_dropout(model, False)
    probs = torch.cat(out)
    if not stochastic:
        probs = probs.repeat_interleave(T, dim=0)
    return probs.reshape(n, T, -1).numpy()


def mc_predict(model: nn.Module, images: Sequence[np.ndarray] | np.ndarray, T: int = 30,
               input_size=(256, 256), stochastic: bool = True, measure: Measure = "mutual_information",
               normalization: Literal["ln_c", "minmax"] = "ln_c", seed: int = 0) -> list[PredictivePosterior]:
    """MC-dropout posterior per image; pass one H x W x 3 array or a sequence."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    probs = mc_probabilities(model, images, T, input_size, stochastic, seed)
    posts = [PredictivePosterior.from_samples(p, measure) for p in probs]
    if normalization == "minmax":
        norm = normalize_uncertainty([p.uncertainty_raw for p in posts], method="minmax")
        for p, v in zip(posts, norm):
            p.uncertainty_norm = float(v)
    return posts


POSTERIOR_FIELDS = ("sample_id", "true_label") + tuple(f"mean_prob_{c}" for c in CLASSES) + (
    "uncertainty_raw", "uncertainty_norm")


def write_posteriors(path: str | Path, records: Sequence[GlomerulusRecord],
                     posteriors: Sequence[PredictivePosterior], comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines.append(",".join(POSTERIOR_FIELDS))
    for r, p in zip(records, posteriors):
        vals = [r.sample_id, r.label] + [repr(float(v)) for v in p.mean] + [
            repr(float(p.uncertainty_raw)), repr(float(p.uncertainty_norm))]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_posteriors(path: str | Path) -> dict[str, np.ndarray]:
    """Columns of a posteriors CSV as arrays (``mean_probs`` is N x C)."""
    import csv
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = list(csv.DictReader(rows))
    missing = set(POSTERIOR_FIELDS) - set(reader[0] if reader else POSTERIOR_FIELDS)
    if missing:
        raise ValidationError(f"{path}: missing columns {sorted(missing)}")
    return {
        "sample_id": np.array([r["sample_id"] for r in reader]),
        "true_label": np.array([CLASSES.index(r["true_label"]) for r in reader]),
        "mean_probs": np.array([[float(r[f"mean_prob_{c}"]) for c in CLASSES] for r in reader]).reshape(-1, len(CLASSES)),
        "uncertainty_raw": np.array([float(r["uncertainty_raw"]) for r in reader]),
        "uncertainty_norm": np.array([float(r["uncertainty_norm"]) for r in reader]),
    }
