import json
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from stypath import augment, data
from stypath.augment import OnlineTransformConfig, online_transform, plan_pairings
from stypath.data import GlomerulusRecord, Registry
from stypath.errors import ConfigurationError, ValidationError
from stypath.style import StyleTransferConfig


def fold_train(n_neg=30, n_pos=70, per_section=5):
    recs = []
    for label, n in (("negative", n_neg), ("positive", n_pos)):
        for i in range(n):
            recs.append(GlomerulusRecord(f"{label[0]}{i:03d}", f"images/{label[0]}{i:03d}.png", label,
                                         f"{label[0].upper()}{i // per_section:02d}"))
    return recs


@pytest.fixture
def image_registry(tmp_path):
    rng = np.random.default_rng(0)
    recs = fold_train(6, 6, per_section=3)
    (tmp_path / "images").mkdir()
    for r in recs:
        Image.fromarray((rng.random((8, 8, 3)) * 255).astype(np.uint8)).save(tmp_path / r.image_path)
    return Registry(recs, tmp_path)


# pairing plans ------------------------------------------------------------

def test_labels_inherited_and_content_from_target_class():
    train = fold_train()
    by_id = {r.sample_id: r for r in train}
    plan = plan_pairings(train, 40, seed=1)
    assert len(plan.pairing_log) == 80
    for p in plan.pairing_log:
        assert by_id[p.content_id].label == p.label
    assert len({p.output_id for p in plan.pairing_log}) == 80


def test_style_pairing_is_independent_of_content():
    train = fold_train(30, 70)
    by_id = {r.sample_id: r for r in train}
    plan = plan_pairings(train, 600, seed=2)
    assert len(plan.pairing_log) >= 1000
    p_pos = 0.7
    for cls in data.CLASSES:
        styles = [by_id[p.style_id] for p in plan.pairing_log if p.label == cls]
        frac = np.mean([s.label == "positive" for s in styles])
        se = np.sqrt(p_pos * (1 - p_pos) / len(styles))
        assert abs(frac - p_pos) < 3 * se, cls
    # the style's section is not tied to the content's section either
    same = np.mean([by_id[p.style_id].section_id == by_id[p.content_id].section_id for p in plan.pairing_log])
    expected = 5 / 100
    se = np.sqrt(expected * (1 - expected) / len(plan.pairing_log))
    assert abs(same - expected) < 3 * se


def test_smaller_plans_are_prefixes():
    train = fold_train()
    big = plan_pairings(train, 300, seed=7)
    for n in (0, 50, 150, 300):
        small = plan_pairings(train, n, seed=7)
        assert small.pairing_log == big.prefix(n).pairing_log
    with pytest.raises(ValidationError):
        big.prefix(301)


def test_zero_plan_is_empty_and_seed_matters():
    train = fold_train()
    assert plan_pairings(train, 0, 1).pairing_log == []
    assert plan_pairings(train, 5, 1).pairing_log != plan_pairings(train, 5, 2).pairing_log


def test_missing_class_rejected():
    with pytest.raises(ValidationError):
        plan_pairings(fold_train(0, 10), 3, 0)


def test_plan_serialization_roundtrip():
    plan = plan_pairings(fold_train(), 4, 3)
    text = plan.dumps({"root_seed": 3})
    assert json.loads(text)["provenance"] == {"root_seed": 3}
    assert augment.AugmentationPlan.from_dict(json.loads(text)) == plan


# building the augmented set ----------------------------------------------

def fake_synth():
    calls = []

    def synth(contents, styles, cfg, net, seeds):
        calls.append(len(contents))
        out = []
        for c, s in zip(contents, styles):
            out.append(SimpleNamespace(image=(c + s) / 2, diverged_iteration=None))
        return out
    synth.calls = calls
    return synth


def test_build_writes_images_and_inherits_section(image_registry, tmp_path):
    cfg = StyleTransferConfig(iterations=1, checkpoint_id="random:0")
    plan, recs = augment.build_augmented_set(image_registry, image_registry.records, 4, cfg, 0,
                                             tmp_path / "aug", backbone=object(), synth=fake_synth())
    assert len(recs) == 8
    for p, r in zip(plan.pairing_log, recs):
        content = image_registry[p.content_id]
        assert r.label == content.label and r.section_id == content.section_id
        assert r.origin == "style_transfer"
        assert (tmp_path / "aug" / r.image_path).is_file()


def content_marker_synth(bad_ids, registry):
    """Diverges whenever the content image is one of ``bad_ids``."""
    bad = [registry.load_image(registry[i]) for i in bad_ids]

    def synth(contents, styles, cfg, net, seeds):
        return [SimpleNamespace(image=c, diverged_iteration=2 if any(np.array_equal(c, b) for b in bad) else None)
                for c in contents]
    return synth


def test_divergent_pairs_are_redrawn(image_registry, tmp_path):
    cfg = StyleTransferConfig(iterations=1, checkpoint_id="random:0")
    first = augment.plan_pairings(image_registry.records, 6, 0)
    bad = first.pairing_log[0].content_id
    plan, recs = augment.build_augmented_set(image_registry, image_registry.records, 6, cfg, 0, tmp_path / "a",
                                             backbone=object(), synth=content_marker_synth([bad], image_registry))
    assert bad not in {p.content_id for p in plan.pairing_log}
    was_bad = {p.output_id for p in first.pairing_log if p.content_id == bad}
    for p in plan.pairing_log:
        assert (p.attempt > 0) == (p.output_id in was_bad)
    assert len(recs) + len(plan.skipped) == 12


def test_always_divergent_pairs_are_skipped(image_registry, tmp_path):
    cfg = StyleTransferConfig(iterations=1, checkpoint_id="random:0")
    every = [r.sample_id for r in image_registry.records]
    plan, recs = augment.build_augmented_set(image_registry, image_registry.records, 2, cfg, 0, tmp_path / "a",
                                             backbone=object(), synth=content_marker_synth(every, image_registry))
    assert recs == [] and plan.pairing_log == []
    assert len(plan.skipped) == 4
    assert all(s["attempts"] == augment.MAX_RETRIES + 1 for s in plan.skipped)


def test_batches_respect_batch_size(image_registry, tmp_path):
    cfg = StyleTransferConfig(iterations=1, checkpoint_id="random:0")
    synth = fake_synth()
    augment.build_augmented_set(image_registry, image_registry.records, 5, cfg, 0, tmp_path / "a",
                                backbone=object(), batch_size=4, synth=synth)
    assert synth.calls == [4, 4, 2]


# online transforms --------------------------------------------------------

def test_all_probabilities_zero_is_resize_only():
    img = np.random.default_rng(1).random((20, 24, 3)).astype(np.float32)
    cfg = OnlineTransformConfig.disabled(target_size=(20, 24))
    rec = {}
    out = online_transform(img, cfg, np.random.default_rng(0), rec)
    assert np.array_equal(out, img) and rec == {}
    assert online_transform(img, OnlineTransformConfig.disabled((10, 12)), np.random.default_rng(0)).shape == (10, 12, 3)


def test_hflip_is_pixel_exact():
    img = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
    cfg = OnlineTransformConfig(1, 0, 0, 0.3, 0, 90, (16, 16))
    expected = np.stack([img[:, 15 - x] for x in range(16)], axis=1)
    assert np.array_equal(online_transform(img, cfg, np.random.default_rng(0)), expected)
    # flipping commutes with the symmetric resize kernel
    small = OnlineTransformConfig(1, 0, 0, 0.3, 0, 90, (8, 8))
    plain = online_transform(img, OnlineTransformConfig.disabled((8, 8)), np.random.default_rng(0))
    np.testing.assert_allclose(online_transform(img, small, np.random.default_rng(0)), plain[:, ::-1], atol=1e-6)


def test_vflip_and_crop_bounds():
    img = np.random.default_rng(3).random((20, 20, 3)).astype(np.float32)
    out = online_transform(img, OnlineTransformConfig(0, 1, 0, 0.3, 0, 90, (20, 20)), np.random.default_rng(0))
    assert np.array_equal(out, img[::-1])
    for seed in range(20):
        rec = {}
        online_transform(img, OnlineTransformConfig(0, 0, 1, 0.3, 0, 90, (20, 20)), np.random.default_rng(seed), rec)
        y0, x0, ch, cw = rec["crop"]
        assert ch >= 14 and cw >= 14 and y0 + ch <= 20 and x0 + cw <= 20


def test_rotation_angle_bounded():
    img = np.random.default_rng(4).random((12, 12, 3)).astype(np.float32)
    cfg = OnlineTransformConfig(0, 0, 0, 0.3, 1, 30, (12, 12))
    for seed in range(20):
        rec = {}
        out = online_transform(img, cfg, np.random.default_rng(seed), rec)
        assert abs(rec["rotate"]) <= 30 and out.min() >= 0 and out.max() <= 1


def test_seeded_transforms_are_deterministic():
    img = np.random.default_rng(5).random((24, 24, 3)).astype(np.float32)
    cfg = OnlineTransformConfig(target_size=(16, 16))
    a = online_transform(img, cfg, np.random.default_rng(9))
    b = online_transform(img, cfg, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_epochs_draw_different_streams():
    from stypath.bayes import sample_rng
    img = np.random.default_rng(6).random((24, 24, 3)).astype(np.float32)
    cfg = OnlineTransformConfig(target_size=(16, 16))
    outs = {online_transform(img, cfg, sample_rng(0, e, "x")).tobytes() for e in range(6)}
    assert len(outs) > 1
    assert sample_rng(0, 1, "x").random() == sample_rng(0, 1, "x").random()
    assert sample_rng(0, 1, "x").random() != sample_rng(0, 1, "y").random()


def test_transform_config_validation():
    with pytest.raises(ConfigurationError):
        OnlineTransformConfig(p_hflip=1.5)
    with pytest.raises(ConfigurationError):
        OnlineTransformConfig(max_crop_fraction=0.5)
    with pytest.raises(ConfigurationError):
        OnlineTransformConfig(max_rotation_deg=120)
    with pytest.raises(ValidationError):
        online_transform(np.zeros((4, 4)), OnlineTransformConfig(), np.random.default_rng(0))
