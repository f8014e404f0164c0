import math

import numpy as np
import pytest

from stypath import bayes, data, fixture
from stypath.bayes import PredictivePosterior, TrainConfig, TrainingError
from stypath.errors import ConfigurationError, ValidationError
from stypath.models import DenseNet, build_classifier, dropout_modules


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=10, learning_rate=1e-3, input_size=(32, 32), arch="densenet_small",
                pretrained=False, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def reg40(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx40")
    fixture.generate(fixture.SyntheticSpec(n_sections=4, images_per_section=5, seed=1), out)
    reg = data.load_manifest(out / "manifest.csv")
    assert len(reg) == 40
    return reg


@pytest.fixture(scope="module")
def trained(reg40):
    return bayes.train(reg40, reg40.records, small_cfg())


# training ------------------------------------------------------------------

def test_loss_decreases_over_two_epochs(trained):
    _, log = trained
    losses = [e["loss"] for e in log["epochs"]]
    assert len(losses) == 2 and losses[1] < losses[0]


def test_seeded_epoch_loss_is_reproducible(reg40, trained):
    _, again = bayes.train(reg40, reg40.records, small_cfg(epochs=1))
    assert round(again["epochs"][0]["loss"], 6) == round(trained[1]["epochs"][0]["loss"], 6)


def test_header_echoes_protocol_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.dropout_rate) == (200, 10, 1e-4, 0.1)
    assert cfg.input_size == (256, 256) and cfg.pretrained and cfg.arch == "densenet121"


def test_header_logged(trained):
    h = trained[1]["header"]
    assert h["epochs"] == 2 and h["batch_size"] == 10 and h["dropout_rate"] == 0.1
    assert h["n_train"] == 40 and h["n_generated"] == 0 and len(h["config_hash"]) == 16


def test_dropout_in_every_bottleneck():
    model, _ = build_classifier("densenet121", 2, 0.1, pretrained=False)
    drops = dropout_modules(model)
    assert len(drops) == 2 * (6 + 12 + 24 + 16)
    assert all(d.p == 0.1 for d in drops)


def test_missing_class_is_configuration_error(reg40):
    negatives = [r for r in reg40.records if r.label == "negative"]
    with pytest.raises(ConfigurationError):
        bayes.train(reg40, negatives, small_cfg(epochs=1))
    with pytest.raises(ValidationError):
        bayes.train(reg40, [], small_cfg(epochs=1))


def test_non_finite_loss_aborts_with_context(reg40, monkeypatch):
    real = DenseNet.forward
    monkeypatch.setattr(DenseNet, "forward", lambda self, x: real(self, x) * float("nan"))
    with pytest.raises(TrainingError) as info:
        bayes.train(reg40, reg40.records, small_cfg(epochs=1))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_config_validation_and_roundtrip():
    for bad in (dict(epochs=0), dict(dropout_rate=1.0), dict(learning_rate=0), dict(batch_size=0)):
        with pytest.raises(ConfigurationError):
            small_cfg(**bad)
    cfg = small_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigurationError):
        build_classifier("resnet", 2)


def test_checkpoint_roundtrip(reg40, trained, tmp_path):
    model, _ = trained
    path = tmp_path / "m.pt"
    bayes.save_checkpoint({"state_dict": model.state_dict(), "classes": list(data.CLASSES),
                           "train_config": small_cfg().to_dict()}, path)
    assert [p.name for p in tmp_path.iterdir()] == ["m.pt"]  # no temp file left behind
    loaded, payload = bayes.load_checkpoint(path)
    imgs = [reg40.load_image(r) for r in reg40.records[:3]]
    a = bayes.mc_probabilities(model, imgs, 1, (32, 32), stochastic=False)
    b = bayes.mc_probabilities(loaded, imgs, 1, (32, 32), stochastic=False)
    assert np.array_equal(a, b)


# MC inference ---------------------------------------------------------------

def test_T_must_be_positive(trained, reg40):
    with pytest.raises(ValidationError):
        bayes.mc_predict(trained[0], reg40.load_image(reg40.records[0]), T=0, input_size=(32, 32))


def test_dropout_off_rows_identical_and_zero_uncertainty(trained, reg40):
    imgs = [reg40.load_image(r) for r in reg40.records[:5]]
    for p in bayes.mc_predict(trained[0], imgs, T=10, input_size=(32, 32), stochastic=False):
        assert np.all(p.samples == p.samples[0])
        assert p.uncertainty_raw == 0.0 and p.uncertainty_norm == 0.0


@pytest.mark.parametrize("T", [1, 10, 30])
def test_rows_are_distributions(trained, reg40, T):
    imgs = [reg40.load_image(r) for r in reg40.records[::4]]
    for p in bayes.mc_predict(trained[0], imgs, T=T, input_size=(32, 32)):
        assert p.samples.shape == (T, 2)
        assert np.all(p.samples >= 0)
        assert np.all(np.abs(p.samples.sum(1) - 1) <= 1e-5)
        np.testing.assert_allclose(p.mean, p.samples.mean(0), rtol=0, atol=1e-15)
        assert 0 <= p.uncertainty_raw <= math.log(2)
        assert 0 <= p.predictive_entropy <= math.log(2) + 1e-12


def test_stochastic_passes_differ(trained, reg40):
    (p,) = bayes.mc_predict(trained[0], reg40.load_image(reg40.records[0]), T=10, input_size=(32, 32))
    assert len({tuple(r) for r in p.samples}) > 1
    # training mode is restored to deterministic afterwards
    assert not any(d.training for d in dropout_modules(trained[0]))


def test_uncertainty_variance_shrinks_with_T(trained, reg40):
    img = reg40.load_image(reg40.records[0])

    def spread(T):
        vals = [bayes.mc_predict(trained[0], img, T=T, input_size=(32, 32), seed=s)[0].uncertainty_raw
                for s in range(20)]
        return np.var(vals)

    assert spread(50) < spread(5)


# posterior arithmetic --------------------------------------------------------

def test_mean_of_two_samples():
    p = PredictivePosterior.from_samples([[0.8, 0.2], [0.6, 0.4]])
    np.testing.assert_allclose(p.mean, [0.7, 0.3], atol=1e-15)


def test_entropy_examples():
    assert bayes.epistemic_uncertainty([[1.0, 0.0]], "entropy") == 0
    assert bayes.epistemic_uncertainty([[0.5, 0.5]], "entropy") == pytest.approx(0.6931, abs=1e-4)
    h = bayes.epistemic_uncertainty([[0.7, 0.3]], "entropy")
    assert h == pytest.approx(0.61086, abs=1e-5)
    assert bayes.normalize_uncertainty([h])[0] == pytest.approx(0.8813, abs=1e-4)
    p = PredictivePosterior.from_samples([[0.8, 0.2], [0.6, 0.4]], measure="entropy")
    assert p.uncertainty_norm == pytest.approx(0.8813, abs=1e-4)


def test_mutual_information():
    assert bayes.epistemic_uncertainty([[0.7, 0.3]] * 4) == 0.0
    s = np.array([[0.9, 0.1], [0.1, 0.9]])
    mi = bayes.epistemic_uncertainty(s)
    expected = math.log(2) - float(bayes.entropy([0.9, 0.1]))
    assert mi == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ConfigurationError):
        bayes.epistemic_uncertainty(s, "variance")


def test_normalization():
    np.testing.assert_allclose(bayes.normalize_uncertainty([math.log(2), 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(bayes.normalize_uncertainty([1.0, 2.0, 3.0], method="minmax"), [0, 0.5, 1])
    np.testing.assert_array_equal(bayes.normalize_uncertainty([0.4, 0.4], method="minmax"), [0, 0])
    with pytest.raises(ValidationError):
        bayes.normalize_uncertainty([])


def test_posteriors_csv_roundtrip(tmp_path):
    recs = [data.GlomerulusRecord("a", "a.png", "negative", "S"), data.GlomerulusRecord("b", "b.png", "positive", "T")]
    posts = [PredictivePosterior.from_samples([[0.8, 0.2], [0.6, 0.4]]),
             PredictivePosterior.from_samples([[1 / 3, 2 / 3]])]
    path = tmp_path / "post.csv"
    bayes.write_posteriors(path, recs, posts, comment="provenance")
    back = bayes.read_posteriors(path)
    assert list(back["sample_id"]) == ["a", "b"]
    assert list(back["true_label"]) == [0, 1]
    assert np.array_equal(back["mean_probs"], np.array([p.mean for p in posts]))
    assert np.array_equal(back["uncertainty_raw"], [p.uncertainty_raw for p in posts])
    assert path.read_text().splitlines()[1].split(",") == list(bayes.POSTERIOR_FIELDS)
