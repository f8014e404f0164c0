import numpy as np
import pytest
import torch

from stypath import backbone as bb
from stypath.errors import ConfigurationError, SynthesisDiverged, ValidationError
from stypath.style import (
    StyleObjective,
    StyleTransferConfig,
    content_term,
    style_term,
    synthesize,
    synthesize_batch,
)
from stypath.style import engine

from oracles import central_fd, max_rel_err


class TinyNet:
    """Two conv+ReLU layers in float64 standing in for the VGG extractor."""

    def __init__(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64) * 0.5
        self.w2 = torch.randn(5, 4, 3, 3, generator=g, dtype=torch.float64) * 0.5
        self.names = {"conv1_1": 1, "conv2_1": 2, "conv4_2": 2}

    def __call__(self, x, layers):
        h1 = torch.relu(torch.nn.functional.conv2d(x, self.w1, padding=1))
        h2 = torch.relu(torch.nn.functional.conv2d(h1, self.w2, padding=1))
        out = {1: h1, 2: h2}
        return bb.FeatureStack((n, out[self.names[n]].flatten(2)) for n in layers)


def tiny_cfg(**kw):
    return StyleTransferConfig(content_layers=("conv4_2",), style_layers=("conv1_1", "conv2_1"), **kw)


@pytest.mark.parametrize("seed", range(5))
def test_pixel_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    net = TinyNet(seed)
    content = torch.from_numpy(rng.random((1, 3, 4, 4)))
    style = torch.from_numpy(rng.random((1, 3, 4, 4)))
    cfg = tiny_cfg(alpha=0.5)
    obj = StyleObjective(net, content, style, cfg)
    x0 = rng.random((1, 3, 4, 4))
    x = torch.from_numpy(x0.copy()).requires_grad_(True)
    (grad,) = torch.autograd.grad(obj(x)[0].sum(), x)

    def f(arr):
        with torch.no_grad():
            return float(obj(torch.from_numpy(arr))[0].sum())

    assert max_rel_err(grad.numpy(), central_fd(f, x0)) < 1e-4


def test_custom_functions_match_plain_autograd():
    rng = np.random.default_rng(4)
    f = torch.from_numpy(rng.random((2, 3, 7))).requires_grad_(True)
    fc = torch.from_numpy(rng.random((2, 3, 7)))
    s = torch.from_numpy(rng.random((2, 3, 7)))
    gs = s @ s.transpose(1, 2)  # a Gram target is symmetric
    (a,) = torch.autograd.grad((content_term(f, fc) + style_term(f, gs)).sum(), f)
    plain = 0.5 * ((f - fc) ** 2).sum((1, 2)) + ((f @ f.transpose(1, 2) - gs) ** 2).sum((1, 2)) / (4 * 9 * 49)
    (b,) = torch.autograd.grad(plain.sum(), f)
    torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)


@pytest.fixture(scope="module")
def vgg():
    return bb.VGGBackbone("random:0")


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(11)
    y, x = np.mgrid[:24, :24] / 23
    content = np.stack([y, x, 0.5 * np.ones_like(x)], -1)
    style = rng.random((20, 20, 3))
    return content.astype(np.float32), style.astype(np.float32)


@pytest.mark.parametrize("optimizer", ["lbfgs", "adam"])
def test_result_invariants(vgg, pair, optimizer):
    cfg = StyleTransferConfig(iterations=8, optimizer=optimizer, checkpoint_id="random:0")
    res = synthesize(*pair, cfg, vgg, seed=0)
    assert len(res.trace) == 8
    assert np.all(np.isfinite(res.trace))
    assert res.trace[0][1] == 0.0  # content copy start
    best = res.best_so_far
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert res.image.shape == pair[0].shape and res.image.min() >= 0 and res.image.max() <= 1
    assert res.trace[-1][2] < res.trace[0][2]
    assert res.checkpoint_id == "random:0" and res.wall_time > 0


def test_style_is_resized_to_content(vgg, pair):
    res = synthesize(pair[0], pair[1], StyleTransferConfig(iterations=1, checkpoint_id="random:0"), vgg)
    assert res.image.shape == (24, 24, 3)


def test_max_side_limits_resolution(vgg, pair):
    cfg = StyleTransferConfig(iterations=1, max_side_px=16, checkpoint_id="random:0")
    assert synthesize(*pair, cfg, vgg).image.shape == (16, 16, 3)


@pytest.mark.parametrize("optimizer", ["lbfgs", "adam"])
def test_seed_determinism(vgg, pair, optimizer):
    cfg = StyleTransferConfig(iterations=4, optimizer=optimizer, init_mode="noise", checkpoint_id="random:0")
    a = synthesize(*pair, cfg, vgg, seed=5)
    b = synthesize(*pair, cfg, vgg, seed=5)
    c = synthesize(*pair, cfg, vgg, seed=6)
    assert a.trace == b.trace
    assert np.array_equal(a.image, b.image)
    assert a.trace != c.trace


def test_adam_batch_equals_single_runs(vgg, pair):
    cfg = StyleTransferConfig(iterations=5, optimizer="adam", checkpoint_id="random:0")
    rng = np.random.default_rng(2)
    contents = [pair[0], rng.random((24, 24, 3)).astype(np.float32)]
    styles = [pair[1], rng.random((24, 24, 3)).astype(np.float32)]
    batch = synthesize_batch(contents, styles, cfg, vgg, seeds=[0, 1])
    for i in range(2):
        single = synthesize(contents[i], styles[i], cfg, vgg, seed=i)
        np.testing.assert_allclose(batch[i].trace, single.trace, rtol=1e-4)
        np.testing.assert_allclose(batch[i].image, single.image, atol=1e-4)


def test_divergence_raises_with_iteration(vgg, pair, monkeypatch):
    real_call = StyleObjective.__call__
    calls = {"n": 0}

    def flaky(self, x):
        total, c, s = real_call(self, x)
        calls["n"] += 1
        if calls["n"] > 4:
            total = total * float("nan")
        return total, c, s

    monkeypatch.setattr(StyleObjective, "__call__", flaky)
    cfg = StyleTransferConfig(iterations=10, optimizer="adam", checkpoint_id="random:0")
    with pytest.raises(SynthesisDiverged) as info:
        synthesize(*pair, cfg, vgg)
    # one call estimates the objective scale, then one per iteration
    assert info.value.iteration == 3


def test_batch_reports_divergence_per_sample(vgg, pair, monkeypatch):
    real_call = StyleObjective.__call__

    def nan_second(self, x):
        total, c, s = real_call(self, x)
        if x.shape[0] == 2:
            total = total * torch.tensor([1.0, float("nan")])
        return total, c, s

    monkeypatch.setattr(StyleObjective, "__call__", nan_second)
    cfg = StyleTransferConfig(iterations=3, optimizer="adam", checkpoint_id="random:0")
    res = synthesize_batch([pair[0], pair[0]], [pair[1], pair[1]], cfg, vgg)
    assert res[0].diverged_iteration is None
    assert res[1].diverged_iteration == 0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        StyleTransferConfig(alpha=0)
    with pytest.raises(ConfigurationError):
        StyleTransferConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        StyleTransferConfig(init_mode="zeros")
    with pytest.raises(ConfigurationError):
        StyleTransferConfig(layer_weights={"conv1_1": 1.0})
    with pytest.raises(ConfigurationError):
        StyleTransferConfig(style_layers=())
    cfg = StyleTransferConfig()
    assert cfg.weights() == {n: 0.2 for n in cfg.style_layers}
    assert cfg.deepest_layer() == "conv5_1"
    assert cfg.alpha == 2e-4 and cfg.iterations == 100 and cfg.optimizer == "lbfgs"


def test_invalid_images(vgg):
    cfg = StyleTransferConfig(iterations=1, checkpoint_id="random:0")
    with pytest.raises(ValidationError):
        synthesize(np.full((8, 8, 3), 2.0), np.zeros((8, 8, 3)), cfg, vgg)


def test_lbfgs_rejects_batched_run(vgg, pair):
    content, style = engine._prepare_pair(*pair, 512)
    cfg = StyleTransferConfig(iterations=1, checkpoint_id="random:0")
    obj = StyleObjective(vgg, torch.cat([content] * 2), torch.cat([style] * 2), cfg)
    with pytest.raises(ValidationError):
        engine._run(obj, torch.cat([content] * 2), cfg)
