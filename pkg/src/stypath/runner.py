"""Config-driven experiments: splits, augment, train, predict, evaluate, explain.

Each stage writes its artifacts under the run directory and records their
hashes in ``stages.json``; ``resume`` verifies those hashes and continues
from the first stage that has not completed.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from stypath import augment, bayes, data, evaluation, gradcam, plotting
from stypath import backbone as bb
from stypath.errors import ConfigurationError, IntegrityError, StageFailure, ValidationError
from stypath.seeding import config_hash, derive_seed, file_hash
from stypath.style import StyleTransferConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("splits", "augment", "train", "predict", "evaluate", "explain")

# published reference values; the private data behind them is not available
REFERENCE = {
    "baseline_balanced_accuracy": 0.852,
    "saturated_balanced_accuracy": 0.885,
    "saturation_n_per_class": 300,
    "n_10000_balanced_accuracy": 0.882,
    "reproducible_here": False,
}


@dataclass
class ExperimentConfig:
    manifest: str
    output_dir: str
    seed: int = 0
    k: int = 5
    n_per_class: list[int] = field(default_factory=lambda: [0, 50, 150, 300])
    T: int = 30
    measure: str = "mutual_information"
    explain: int = 4  # test samples of fold 0 rendered as Grad-CAM panels
    explain_class: str = "predicted"
    augment_batch_size: int = 64
    style_transfer: StyleTransferConfig = field(default_factory=StyleTransferConfig)
    train: bayes.TrainConfig = field(default_factory=bayes.TrainConfig)

    def __post_init__(self):
        if isinstance(self.style_transfer, dict):
            self.style_transfer = StyleTransferConfig(**self.style_transfer)
        if isinstance(self.train, dict):
            self.train = bayes.TrainConfig.from_dict(self.train)
        self.n_per_class = [int(n) for n in self.n_per_class]
        if not self.n_per_class or self.n_per_class[0] != 0:
            raise ConfigurationError("n_per_class must start with 0 (the baseline)")
        if any(b <= a for a, b in zip(self.n_per_class, self.n_per_class[1:])):
            raise ConfigurationError("n_per_class must be strictly increasing")
        if self.k < 2:
            raise ConfigurationError("k must be >= 2")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.measure not in ("mutual_information", "entropy"):
            raise ConfigurationError(f"unknown uncertainty measure {self.measure!r}")
        if self.explain_class not in ("predicted", "true"):
            raise ConfigurationError("explain_class must be 'predicted' or 'true'")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown experiment keys {sorted(unknown)}")
        for key in ("manifest", "output_dir"):
            if key not in d:
                raise ConfigurationError(f"experiment config needs {key!r}")
            if base is not None and not Path(d[key]).is_absolute():
                d[key] = str((base / d[key]).resolve())
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def from_toml(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = tomllib.loads(path.read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        d.update(overrides)
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest, "output_dir": self.output_dir, "seed": self.seed, "k": self.k,
            "n_per_class": list(self.n_per_class), "T": self.T, "measure": self.measure,
            "explain": self.explain, "explain_class": self.explain_class,
            "augment_batch_size": self.augment_batch_size,
            "style_transfer": self.style_transfer.to_dict(), "train": self.train.to_dict(),
        }

    def hash(self) -> str:
        """Hash of everything that shapes results.

        Locations are left out and the manifest enters by content, so a
        relocated rerun of the same experiment hashes identically.
        """
        d = self.to_dict()
        d.pop("output_dir")
        mp = Path(d.pop("manifest"))
        d["manifest_sha256"] = file_hash(mp) if mp.exists() else None
        return config_hash(d)

    def stage_seeds(self) -> dict:
        return {s: derive_seed(self.seed, s) for s in STAGES}


def header(cfg: ExperimentConfig) -> dict:
    return {**cfg.to_dict(), "config_hash": cfg.hash(), "stage_seeds": cfg.stage_seeds()}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class Run:
    """Book-keeping for one run directory."""

    def __init__(self, cfg: ExperimentConfig, root: Path):
        self.cfg = cfg
        self.root = Path(root)
        self.hash = cfg.hash()
        self.state_path = self.root / "stages.json"
        self.state = {"config_hash": self.hash, "root_seed": cfg.seed, "stages": {}, "cells": {}}

    def provenance(self, stage: str) -> dict:
        return {"root_seed": self.cfg.seed, "config_hash": self.hash, "stage": stage}

    def rel(self, p: Path) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def save_state(self) -> None:
        _write_json(self.state_path, self.state)

    def done(self, stage: str) -> bool:
        return self.state["stages"].get(stage, {}).get("status") == "complete"

    def complete(self, stage: str, files) -> None:
        self.state["stages"][stage] = {"status": "complete",
                                       "artifacts": {self.rel(f): file_hash(f) for f in sorted(files)}}
        self.save_state()

    def verify(self, stage: str) -> None:
        for rel, h in self.state["stages"][stage]["artifacts"].items():
            p = self.root / rel
            if not p.is_file():
                raise IntegrityError(f"{stage}: artifact {rel} is missing")
            if file_hash(p) != h:
                raise IntegrityError(f"{stage}: artifact {rel} does not match its recorded hash")

    def cell_done(self, stage: str, key: str, files) -> None:
        self.state["cells"].setdefault(stage, {})[key] = {self.rel(f): file_hash(f) for f in files}
        self.save_state()

    def cell_ok(self, stage: str, key: str) -> bool:
        entry = self.state["cells"].get(stage, {}).get(key)
        if not entry:
            return False
        for rel, h in entry.items():
            p = self.root / rel
            if not p.is_file() or file_hash(p) != h:
                raise IntegrityError(f"{stage}: cell {key} artifact {rel} does not match its recorded hash")
        return True


# stage bodies --------------------------------------------------------------

def _stage_splits(run: Run) -> list[Path]:
    cfg = run.cfg
    registry = data.load_manifest(cfg.manifest)
    split = data.grouped_kfold(registry, cfg.k, derive_seed(cfg.seed, "splits"))
    problems = data.check_split(registry, split)
    if problems:
        raise ValidationError("; ".join(problems))
    out = run.root / "splits.json"
    split.save(out, run.provenance("splits"))
    return [out]


def _fold_dir(run: Run, fold: int) -> Path:
    return run.root / "augment" / f"fold{fold}"


def _stage_augment(run: Run) -> list[Path]:
    cfg = run.cfg
    registry = data.load_manifest(cfg.manifest)
    split = data.FoldSplit.load(run.root / "splits.json")
    n_max = max(cfg.n_per_class)
    st = cfg.style_transfer
    net = bb.VGGBackbone(st.checkpoint_id, max_layer=st.deepest_layer()) if n_max else None
    plans, files = [], []
    for fold in range(split.k):
        out = _fold_dir(run, fold)
        train_recs, _ = data.fold_records(registry, split, fold, include_generated=False)
        plan, generated = augment.build_augmented_set(
            registry, train_recs, n_max, st, derive_seed(cfg.seed, "augment", fold), out,
            backbone=net, batch_size=cfg.augment_batch_size, prefix=f"st-f{fold}",
            provenance=run.provenance("augment"))
        originals = [data.GlomerulusRecord(r.sample_id, os.path.relpath(registry.resolve(r), out), r.label,
                                           r.section_id, r.origin) for r in registry.records]
        data.write_manifest(originals + generated, out / "augmented_manifest.csv",
                            comment=json.dumps(run.provenance("augment"), sort_keys=True))
        (out / "pairing_log.json").write_text(plan.dumps(run.provenance("augment")))
        plans.append(plan.to_dict())
        files += [out / "augmented_manifest.csv", out / "pairing_log.json"]
        files += [out / r.image_path for r in generated]
    combined = run.root / "pairing_log.json"
    text = json.dumps({"folds": plans, "provenance": run.provenance("augment"),
                       "checkpoint_id": net.checkpoint_id if net else st.checkpoint_id},
                      indent=2, sort_keys=True) + "\n"
    combined.write_text(text)
    return files + [combined]


def _cell_key(fold: int, n: int) -> str:
    return f"fold{fold}_n{n}"


def _cell_records(run: Run, split: data.FoldSplit, fold: int, n: int):
    reg = data.load_manifest(_fold_dir(run, fold) / "augmented_manifest.csv", check_images=False)
    plan = augment.AugmentationPlan.from_dict(json.loads((_fold_dir(run, fold) / "pairing_log.json").read_text()))
    extra = reg.subset(p.output_id for p in plan.prefix(n).pairing_log)
    train_recs = reg.subset(split.folds[fold].train_samples)
    test_recs = reg.subset(split.folds[fold].test_samples)
    return reg, train_recs + extra, test_recs


def _train_cell(run: Run, split: data.FoldSplit, fold: int, n: int) -> list[Path]:
    """Train one (fold, n) cell; every n in a fold shares the fold's seed."""
    reg, train_recs, _ = _cell_records(run, split, fold, n)
    tcfg = bayes.TrainConfig.from_dict({**run.cfg.train.to_dict(), "seed": derive_seed(run.cfg.seed, "train", fold)})
    ckpt = run.root / "train" / f"{_cell_key(fold, n)}.pt"
    _, train_log = bayes.train(reg, train_recs, tcfg, ckpt, provenance=run.provenance("train"))
    train_log = {k: v for k, v in train_log.items() if k != "wall_time"}
    log_path = run.root / "train" / f"{_cell_key(fold, n)}.json"
    _write_json(log_path, {**train_log, "provenance": run.provenance("train")})
    return [ckpt, log_path]


def _stage_train(run: Run) -> list[Path]:
    split = data.FoldSplit.load(run.root / "splits.json")
    files = []
    for fold in range(split.k):
        for n in run.cfg.n_per_class:
            key = _cell_key(fold, n)
            if not run.cell_ok("train", key):
                log.info("training %s", key)
                run.cell_done("train", key, _train_cell(run, split, fold, n))
            files += [run.root / rel for rel in run.state["cells"]["train"][key]]
    return files


def _stage_predict(run: Run) -> list[Path]:
    cfg = run.cfg
    split = data.FoldSplit.load(run.root / "splits.json")
    files = []
    for fold in range(split.k):
        for n in cfg.n_per_class:
            key = _cell_key(fold, n)
            reg, _, test_recs = _cell_records(run, split, fold, n)
            model, payload = bayes.load_checkpoint(run.root / "train" / f"{key}.pt")
            tcfg = bayes.TrainConfig.from_dict(payload["train_config"])
            posts = bayes.mc_predict(model, [reg.load_image(r) for r in test_recs], cfg.T, tcfg.input_size,
                                     measure=cfg.measure, seed=derive_seed(cfg.seed, "predict", fold))
            out = run.root / "predict" / f"{key}.csv"
            out.parent.mkdir(parents=True, exist_ok=True)
            bayes.write_posteriors(out, test_recs, posts, json.dumps(run.provenance("predict"), sort_keys=True))
            files.append(out)
    return files


def _load_cells(run: Run):
    split = data.FoldSplit.load(run.root / "splits.json")
    cells = {}
    for n in run.cfg.n_per_class:
        cells[n] = [bayes.read_posteriors(run.root / "predict" / f"{_cell_key(f, n)}.csv") for f in range(split.k)]
    return split, cells


def _stage_evaluate(run: Run) -> list[Path]:
    split, cells = _load_cells(run)
    points, curves = [], {}
    for n, posts in cells.items():
        fold_eval = [evaluation.evaluate_posteriors(p) for p in posts]
        points.append(evaluation.sweep_point(n, [e["balanced_accuracy"] for e in fold_eval],
                                             [e["accuracy"] for e in fold_eval]))
        curves[n] = [evaluation.filter_curve(p["uncertainty_norm"], p["mean_probs"].argmax(1), p["true_label"],
                                             list(p["sample_id"])) for p in posts]
    sweep = evaluation.SaturationSweep(points, split.k)
    fig_dir = run.root / "figures"
    best = sweep.best.n_per_class
    shown = {f"n={n}" + (" (baseline)" if n == 0 else "") + (" (best)" if n == best and n else ""): curves[n]
             for n in sorted({0, best})}
    figs = [Path(plotting.plot_saturation(sweep, fig_dir / "saturation.png")),
            Path(plotting.plot_filter_curves(shown, fig_dir / "filter_curves.png"))]
    metrics = {
        "sweep": sweep.to_dict(),
        "filter_curves": {str(n): {"per_fold": [c.to_dict() for c in cs],
                                   "balanced": evaluation.aggregate_curves(cs),
                                   "plain": evaluation.aggregate_curves(cs, "plain_accuracy")}
                          for n, cs in curves.items()},
        "provenance": run.provenance("evaluate"),
    }
    out = run.root / "metrics.json"
    _write_json(out, metrics)
    return [out] + figs


def _stage_explain(run: Run) -> list[Path]:
    cfg = run.cfg
    metrics = json.loads((run.root / "metrics.json").read_text())
    best = metrics["sweep"]["best_n"]
    split = data.FoldSplit.load(run.root / "splits.json")
    conditions = sorted({0, best})
    reg, _, test_recs = _cell_records(run, split, 0, 0)
    chosen = test_recs[:: max(1, len(test_recs) // max(cfg.explain, 1))][: cfg.explain]
    if not chosen:
        return []
    models = {n: bayes.load_checkpoint(run.root / "train" / f"{_cell_key(0, n)}.pt") for n in conditions}
    rows = []
    for r in chosen:
        img = reg.load_image(r)
        images, labels = [img], [f"{r.sample_id} ({r.label})"]
        for n in conditions:
            model, payload = models[n]
            size = tuple(payload["train_config"]["input_size"])
            post = bayes.mc_predict(model, img, 1, size, stochastic=False)[0]
            target = post.predicted if cfg.explain_class == "predicted" else r.class_index
            cam = gradcam.compute_cam(model, img, target, input_size=size)
            images.append(gradcam.overlay(img, cam))
            labels.append(f"n={n}: pred {data.CLASSES[post.predicted]}")
        rows.append({"title": r.sample_id, "images": images, "labels": labels})
    return [Path(plotting.plot_cam_panels(rows, run.root / "figures" / "gradcam_panels.png"))]


STAGE_FUNCS = {
    "splits": _stage_splits,
    "augment": _stage_augment,
    "train": _stage_train,
    "predict": _stage_predict,
    "evaluate": _stage_evaluate,
    "explain": _stage_explain,
}


def _check_disk(cfg: ExperimentConfig, root: Path) -> None:
    side = min(cfg.style_transfer.max_side_px, 512)
    need = cfg.k * 2 * max(cfg.n_per_class) * side * side * 3 + 50_000_000
    free = shutil.disk_usage(root if root.exists() else root.parent).free
    if free < need:
        raise ValidationError(f"run needs about {need / 1e9:.2f} GB free; {free / 1e9:.2f} GB available")


def _report(run: Run) -> dict:
    metrics = json.loads((run.root / "metrics.json").read_text())
    artifacts = {}
    for s in STAGES:
        artifacts.update(run.state["stages"][s]["artifacts"])
    report = {
        "header": header(run.cfg),
        "sweep": metrics["sweep"],
        "filter_curves": {n: {k: v for k, v in c.items() if k != "per_fold"}
                          for n, c in metrics["filter_curves"].items()},
        "figures": sorted(a for a in artifacts if a.startswith("figures/")),
        "gradcam_panels": sorted(run.state["stages"]["explain"]["artifacts"]),
        "artifacts": {a: h for a, h in artifacts.items() if not a.startswith("augment/fold")},
        "reference_metadata": REFERENCE,
        "provenance": run.provenance("report"),
    }
    _write_json(run.root / "report.json", report)
    return report


def _execute(run: Run) -> dict:
    for stage in STAGES:
        if run.done(stage):
            run.verify(stage)
            continue
        log.info("stage %s", stage)
        try:
            files = STAGE_FUNCS[stage](run)
        except (IntegrityError, ValidationError, ConfigurationError):
            raise
        except Exception as exc:
            run.state["stages"][stage] = {"status": "failed", "error": repr(exc)}
            run.save_state()
            raise StageFailure(stage, exc) from exc
        run.complete(stage, files)
    return _report(run)


def run(cfg: ExperimentConfig) -> dict:
    """Execute every stage into ``cfg.output_dir``; returns the report dict."""
    root = Path(cfg.output_dir)
    _check_disk(cfg, root)
    if (root / "stages.json").exists():
        raise ValidationError(f"{root} already holds a run; use resume")
    root.mkdir(parents=True, exist_ok=True)
    data.load_manifest(cfg.manifest)  # fail early on a bad manifest
    _write_json(root / "config.json", cfg.to_dict())
    r = Run(cfg, root)
    r.save_state()
    return _execute(r)


def resume(run_dir: str | Path) -> dict:
    """Continue an interrupted run; a completed run just returns its report."""
    root = Path(run_dir)
    try:
        state = json.loads((root / "stages.json").read_text())
        cfg = ExperimentConfig.from_dict(json.loads((root / "config.json").read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise IntegrityError(f"{root}: unreadable run checkpoint ({exc})") from None
    # the stored config may name the directory it was created in
    cfg.output_dir = str(root)
    r = Run(cfg, root)
    if state.get("config_hash") != r.hash:
        raise IntegrityError(f"{root}: config hash {r.hash} does not match checkpoint {state.get('config_hash')}")
    r.state = state
    r.state.setdefault("cells", {})
    if all(r.done(s) for s in STAGES) and (root / "report.json").exists():
        for s in STAGES:
            r.verify(s)
        return json.loads((root / "report.json").read_text())
    return _execute(r)
