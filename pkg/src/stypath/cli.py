"""Command-line entry point: ``stypath <command> ...``.

Exit codes: 0 success, 2 validation/configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from stypath.errors import StageFailure, StypathError, ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("stypath")


def _read_toml(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _load_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


def cmd_synthesize(args) -> None:
    from stypath.augment import _save_png
    from stypath.style import StyleTransferConfig, synthesize

    opts = _read_toml(args.config)
    opts.update({k: v for k, v in {"alpha": args.alpha, "iterations": args.iterations,
                                   "optimizer": args.optimizer, "max_side_px": args.max_side}.items()
                 if v is not None})
    cfg = StyleTransferConfig(**opts, seed=args.seed)
    res = synthesize(_load_rgb(args.content), _load_rgb(args.style), cfg, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _save_png(res.image, Path(args.out), {"seed": args.seed, "checkpoint_id": res.checkpoint_id,
                                          "config": cfg.to_dict()})
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["iteration", "total_loss", "content_loss", "style_loss"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(res.trace_rows())
    _emit({"out": args.out, "initial": res.trace[0], "final": res.final, "wall_time": res.wall_time,
           "checkpoint_id": res.checkpoint_id})


def cmd_splits(args) -> None:
    from stypath import data
    reg = data.load_manifest(args.manifest)
    split = data.grouped_kfold(reg, args.k, args.seed, stratified=not args.unstratified)
    problems = data.check_split(reg, split)
    if problems:
        raise ValidationError("; ".join(problems))
    split.save(args.out, {"root_seed": args.seed, "stage": "splits"})
    _emit({"out": args.out, "k": args.k, "fold_sizes": [len(f.test_samples) for f in split.folds],
           "excluded_inconclusive": len(reg.excluded)})


def cmd_augment(args) -> None:
    import os
    from stypath import augment, data
    from stypath.style import StyleTransferConfig

    reg = data.load_manifest(args.manifest)
    split = data.FoldSplit.load(args.split)
    cfg = StyleTransferConfig(**_read_toml(args.config))
    train, _ = data.fold_records(reg, split, args.fold, include_generated=False)
    out = Path(args.out_dir)
    prov = {"root_seed": args.seed, "stage": "augment", "fold": args.fold}
    plan, generated = augment.build_augmented_set(reg, train, args.n_per_class, cfg, args.seed, out,
                                                  batch_size=args.batch_size, provenance=prov)
    originals = [data.GlomerulusRecord(r.sample_id, os.path.relpath(reg.resolve(r), out), r.label,
                                       r.section_id, r.origin) for r in reg.records]
    data.write_manifest(originals + generated, out / "augmented_manifest.csv")
    (out / "pairing_log.json").write_text(plan.dumps(prov))
    _emit({"out_dir": str(out), "generated": len(generated), "skipped": len(plan.skipped),
           "counts": data.class_counts(originals + generated, by_origin=True)})


def cmd_train(args) -> None:
    from stypath import bayes, data
    opts = _read_toml(args.config)
    if args.seed is not None:
        opts["seed"] = args.seed
    cfg = bayes.TrainConfig.from_dict(opts)
    reg = data.load_manifest(args.manifest)
    split = data.FoldSplit.load(args.split)
    train, _ = data.fold_records(reg, split, args.fold, include_generated=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, train_log = bayes.train(reg, train, cfg, out / "model.pt",
                               provenance={"stage": "train", "fold": args.fold, "config_hash": cfg.hash()})
    (out / "train_log.json").write_text(json.dumps(train_log, indent=2, sort_keys=True) + "\n")
    _emit({"checkpoint": str(out / "model.pt"), **train_log["header"],
           "final_loss": train_log["epochs"][-1]["loss"]})


def cmd_predict(args) -> None:
    from stypath import bayes, data
    model, payload = bayes.load_checkpoint(args.checkpoint)
    reg = data.load_manifest(args.manifest)
    if args.split:
        _, records = data.fold_records(reg, data.FoldSplit.load(args.split), args.fold, include_generated=False)
    else:
        records = reg.originals
    size = tuple(payload["train_config"]["input_size"])
    posts = bayes.mc_predict(model, [reg.load_image(r) for r in records], args.T, size,
                             stochastic=not args.deterministic, measure=args.measure, seed=args.seed)
    bayes.write_posteriors(args.out, records, posts,
                           json.dumps({"checkpoint_config_hash": payload["config_hash"], "T": args.T,
                                       "seed": args.seed, "measure": args.measure}, sort_keys=True))
    _emit({"out": args.out, "n": len(records), "T": args.T, "measure": args.measure})


def cmd_evaluate(args) -> None:
    from stypath import bayes, evaluation, plotting
    from stypath.seeding import file_hash
    post = bayes.read_posteriors(args.posteriors)
    metrics = evaluation.evaluate_posteriors(post)
    curve = evaluation.FilterCurve([evaluation.CurvePoint(**p) for p in metrics["filter_curve"]["points"]])
    plot = Path(args.out).with_suffix(".filter_curve.png")
    plotting.plot_filter_curves({Path(args.posteriors).stem: [curve]}, plot)
    report = {**metrics, "posteriors": args.posteriors, "posteriors_sha256": file_hash(args.posteriors),
              "figures": [str(plot)]}
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({"out": args.out, "balanced_accuracy": metrics["balanced_accuracy"], "accuracy": metrics["accuracy"]})


def cmd_sweep(args) -> None:
    from stypath import bayes, data, evaluation, plotting
    from stypath.seeding import config_hash, derive_seed
    from stypath.style import StyleTransferConfig

    opts = _read_toml(args.config)
    st = StyleTransferConfig(**opts.get("style_transfer", {}))
    tcfg = bayes.TrainConfig.from_dict(opts.get("train", {}))
    reg = data.load_manifest(args.manifest)
    split = data.grouped_kfold(reg, args.k, derive_seed(args.seed, "splits"))
    n_values = [int(v) for v in args.n.split(",")]
    out = Path(args.out_dir)
    sweep, extra = evaluation.saturation_sweep(reg, split, n_values, st, tcfg, args.T, args.seed, out / "work")
    plots = [plotting.plot_saturation(sweep, out / "saturation.png"),
             plotting.plot_filter_curves({f"n={n}": extra["curves"][n] for n in n_values}, out / "filter_curves.png")]
    report = {
        "sweep": sweep.to_dict(),
        "filter_curves": {str(n): evaluation.aggregate_curves(c) for n, c in extra["curves"].items()},
        "root_seed": args.seed,
        "config_hash": config_hash({"st": st.to_dict(), "train": tcfg.to_dict(), "k": args.k, "n": n_values,
                                    "T": args.T}),
        "figures": plots,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({"out_dir": str(out), "sweep": [(p.n_per_class, p.mean_accuracy, p.std_accuracy) for p in sweep.points]})


def cmd_gradcam(args) -> None:
    from stypath import bayes, data, gradcam, plotting
    model, payload = bayes.load_checkpoint(args.checkpoint)
    reg = data.load_manifest(args.manifest)
    size = tuple(payload["train_config"]["input_size"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s for s in args.samples.split(",") if s]
    missing = [s for s in ids if s not in reg]
    if missing:
        raise ValidationError(f"unknown sample ids {missing}")
    rows, written = [], []
    for sid in ids:
        rec = reg[sid]
        img = reg.load_image(rec)
        post = bayes.mc_predict(model, img, 1, size, stochastic=False)[0]
        if args.which == "true":
            if not rec.conclusive:
                raise ValidationError(f"{sid} has no conclusive true label")
            target = rec.class_index
        else:
            target = post.predicted
        cam = gradcam.compute_cam(model, img, target, layer=args.layer, input_size=size)
        ov = gradcam.overlay(img, cam)
        rows.append({"title": sid, "images": [img, ov],
                     "labels": [f"{sid} ({rec.label})", f"class {target}, p={post.mean[target]:.2f}"]})
        written.append(plotting.plot_cam_panels(rows[-1:], out / f"{sid}_gradcam.png"))
    written.append(plotting.plot_cam_panels(rows, out / "gradcam_panels.png"))
    _emit({"out_dir": str(out), "panels": written})


def cmd_run(args) -> None:
    from stypath import runner
    overrides = {"output_dir": args.out_dir} if args.out_dir else {}
    cfg = runner.ExperimentConfig.from_toml(args.config, **overrides)
    report = runner.run(cfg)
    _emit({"output_dir": cfg.output_dir, "best_n": report["sweep"]["best_n"], "figures": report["figures"]})


def cmd_resume(args) -> None:
    from stypath import runner
    report = runner.resume(args.dir)
    _emit({"output_dir": args.dir, "best_n": report["sweep"]["best_n"], "figures": report["figures"]})


def cmd_fixture(args) -> None:
    from stypath import fixture
    spec = fixture.SyntheticSpec.from_dict(_read_toml(args.spec))
    summary = fixture.generate(spec, args.out_dir)
    _emit({k: summary[k] for k in ("n_records", "counts", "min_section_hue_chi2", "separation_threshold")})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stypath", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="stylize one content image")
    s.add_argument("--content", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--optimizer", choices=["lbfgs", "adam"])
    s.add_argument("--max-side", type=int)
    s.add_argument("--config", help="TOML with style-transfer options")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("splits", help="section-grouped k-fold split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--unstratified", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_splits)

    s = sub.add_parser("augment", help="style-transfer samples for one training fold")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--n-per-class", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="TOML with style-transfer options")
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train one fold")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="MC-dropout posteriors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--T", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--measure", choices=["mutual_information", "entropy"], default="mutual_information")
    s.add_argument("--deterministic", action="store_true", help="dropout off")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="metrics and filter curve for a posteriors file")
    s.add_argument("--posteriors", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="accuracy vs. style-transfer samples per class")
    s.add_argument("--manifest", required=True)
    s.add_argument("--n", default="0,100,200,300")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--T", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="TOML with [style_transfer] and [train] tables")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcam", help="Grad-CAM panels")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--samples", required=True)
    s.add_argument("--class", dest="which", choices=["predicted", "true"], default="predicted")
    s.add_argument("--layer", default="features.relu5")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_gradcam)

    s = sub.add_parser("run", help="full experiment from a TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", help="override output_dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("resume", help="continue an interrupted run")
    s.add_argument("--dir", required=True)
    s.set_defaults(func=cmd_resume)

    s = sub.add_parser("fixture", help="generate the synthetic dataset")
    s.add_argument("--spec")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_fixture)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (StypathError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
