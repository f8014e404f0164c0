"""Iterative style-transfer synthesis over image pixels."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
import torch

from stypath import backbone as bb
from stypath.errors import ConfigurationError, SynthesisDiverged, ValidationError
from stypath.style.losses import (
    content_gradient,
    content_loss,
    default_layer_weights,
    gram_matrix,
    style_gradient,
    style_layer_loss,
)

log = logging.getLogger(__name__)


@dataclass
class StyleTransferConfig:
    alpha: float = 2e-4
    iterations: int = 100
    layer_weights: dict[str, float] | None = None
    init_mode: Literal["content_copy", "noise"] = "content_copy"
    content_layers: tuple[str, ...] = bb.LAYER_PRESETS["gatys"][0]
    style_layers: tuple[str, ...] = bb.LAYER_PRESETS["gatys"][1]
    optimizer: Literal["lbfgs", "adam"] = "lbfgs"
    lbfgs_history: int = 10
    adam_lr: float = 0.02
    max_side_px: int = 512
    objective_scale: float | Literal["auto"] = "auto"
    checkpoint_id: str = bb.DEFAULT_CHECKPOINT
    seed: int = 0

    def __post_init__(self):
        self.content_layers = tuple(self.content_layers)
        self.style_layers = tuple(self.style_layers)
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if int(self.iterations) < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.init_mode not in ("content_copy", "noise"):
            raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.objective_scale != "auto" and not float(self.objective_scale) > 0:
            raise ConfigurationError("objective_scale must be 'auto' or a positive number")
        bb.layer_specs(self.content_layers, self.style_layers)
        weights = self.weights()
        if set(weights) != set(self.style_layers):
            raise ConfigurationError("layer_weights must cover exactly the style layers")
        if any(w < 0 for w in weights.values()):
            raise ConfigurationError("layer_weights must be nonnegative")

    def weights(self) -> dict[str, float]:
        return dict(self.layer_weights) if self.layer_weights else default_layer_weights(self.style_layers)

    def deepest_layer(self) -> str:
        names = set(self.content_layers) | set(self.style_layers)
        return max(names, key=bb.VGG19_CONV_ORDER.index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["content_layers"] = list(self.content_layers)
        d["style_layers"] = list(self.style_layers)
        return d


@dataclass
class SynthesisResult:
    image: np.ndarray
    trace: list[tuple[float, float, float]]
    wall_time: float
    final: tuple[float, float, float]
    checkpoint_id: str = ""
    diverged_iteration: int | None = None

    @property
    def best_so_far(self) -> list[float]:
        return list(np.minimum.accumulate([t[0] for t in self.trace]))

    def trace_rows(self) -> list[dict]:
        return [
            {"iteration": i, "total_loss": t, "content_loss": c, "style_loss": s}
            for i, (t, c, s) in enumerate(self.trace)
        ]


class _ContentTerm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f_out, f_cont):
        ctx.save_for_backward(f_out, f_cont)
        return content_loss(f_out, f_cont)

    @staticmethod
    def backward(ctx, grad):
        f_out, f_cont = ctx.saved_tensors
        return grad[..., None, None] * content_gradient(f_out, f_cont), None


class _StyleTerm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f_out, g_sty):
        n, m = f_out.shape[-2:]
        g_out = gram_matrix(f_out)
        ctx.save_for_backward(f_out, g_out, g_sty)
        return style_layer_loss(g_out, g_sty, n, m)

    @staticmethod
    def backward(ctx, grad):
        f_out, g_out, g_sty = ctx.saved_tensors
        n, m = f_out.shape[-2:]
        return grad[..., None, None] * style_gradient(f_out, g_out, g_sty, n, m), None


def content_term(f_out, f_cont):
    """Content loss whose backward pass uses :func:`content_gradient`."""
    return _ContentTerm.apply(f_out, f_cont)


def style_term(f_out, g_sty):
    """Per-layer style loss whose backward pass uses :func:`style_gradient`."""
    return _StyleTerm.apply(f_out, g_sty)


class StyleObjective:
    """Total loss of a batch of pixel images against fixed content/style targets.

    ``extractor`` maps a normalized B x 3 x H x W batch to a FeatureStack of
    (B, N_l, M_l) matrices; anything with the backbone's call signature works.
    """

    def __init__(self, extractor, content: torch.Tensor, style: torch.Tensor, cfg: StyleTransferConfig):
        self.extractor = extractor
        self.cfg = cfg
        self.weights = cfg.weights()
        layers = list(cfg.content_layers) + [l for l in cfg.style_layers if l not in cfg.content_layers]
        self.layers = layers
        with torch.no_grad():
            fc = extractor(bb.normalize(content), layers)
            fs = extractor(bb.normalize(style), layers)
        self.content_targets = {n: fc[n].detach() for n in cfg.content_layers}
        self.style_targets = {n: gram_matrix(fs[n]).detach() for n in cfg.style_layers}

    def __call__(self, x: torch.Tensor):
        feats = self.extractor(bb.normalize(x), self.layers)
        c = sum(content_term(feats[n], t) for n, t in self.content_targets.items())
        s = sum(self.weights[n] * style_term(feats[n], g) for n, g in self.style_targets.items())
        return self.cfg.alpha * c + s, c, s


def _prepare_pair(x_cont, x_sty, max_side: int) -> tuple[torch.Tensor, torch.Tensor]:
    x_cont = bb.resize_max_side(np.asarray(bb._check_image(x_cont), dtype=np.float32), max_side)
    x_sty = np.asarray(bb._check_image(x_sty), dtype=np.float32)
    # Gram magnitude scales with M_l, so the style image is brought to the output size
    x_sty = bb.resize_image(x_sty, x_cont.shape[:2])
    return bb.to_tensor(x_cont), bb.to_tensor(x_sty)


def _init_pixels(content: torch.Tensor, cfg: StyleTransferConfig, seed: int) -> torch.Tensor:
    if cfg.init_mode == "content_copy":
        return content.clone()
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(content.shape, generator=gen, dtype=content.dtype)


def _make_backbone(cfg: StyleTransferConfig, backbone: bb.VGGBackbone | None) -> bb.VGGBackbone:
    if backbone is None:
        return bb.VGGBackbone(cfg.checkpoint_id, max_layer=cfg.deepest_layer())
    return backbone


def _objective_scale(objective: StyleObjective, x0: torch.Tensor, cfg: StyleTransferConfig) -> torch.Tensor:
    """Per-sample constant multiplying the loss seen by the optimizer.

    The minimizer is unchanged. "auto" brings the largest initial pixel
    gradient to 1, since torch's L-BFGS curvature test and Adam's epsilon are
    absolute and stall on objectives whose gradients sit near 1e-7.
    """
    b = x0.shape[0]
    if cfg.objective_scale != "auto":
        return x0.new_full((b,), float(cfg.objective_scale))
    x = x0.clone().requires_grad_(True)
    total, _, _ = objective(x)
    (g,) = torch.autograd.grad(total.sum(), x)
    peak = g.detach().abs().reshape(b, -1).amax(dim=1)
    ok = torch.isfinite(peak) & (peak > 0)
    return torch.where(ok, 1.0 / torch.where(ok, peak, torch.ones_like(peak)), torch.ones_like(peak))


def _run(objective: StyleObjective, x0: torch.Tensor, cfg: StyleTransferConfig):
    """Optimize ``x0`` in place; returns per-sample traces and divergence indices."""
    scale = _objective_scale(objective, x0, cfg)
    x = x0.clone().requires_grad_(True)
    b = x.shape[0]
    traces: list[list[tuple[float, float, float]]] = [[] for _ in range(b)]
    diverged: dict[int, int] = {}
    step_state = {"first": True}

    def record(i, total, c, s):
        vals = torch.stack([total, c, s], dim=-1).detach().double().cpu().numpy()
        for j in range(b):
            traces[j].append(tuple(float(v) for v in vals[j]))
            if j not in diverged and not np.isfinite(vals[j]).all():
                diverged[j] = i

    if cfg.optimizer == "lbfgs":
        if b != 1:
            raise ValidationError("L-BFGS synthesis runs one image at a time")
        opt = torch.optim.LBFGS(
            [x], lr=1.0, max_iter=1, history_size=cfg.lbfgs_history,
            line_search_fn="strong_wolfe", tolerance_grad=0.0, tolerance_change=0.0,
        )
        for i in range(cfg.iterations):
            step_state["first"] = True

            def closure():
                opt.zero_grad()
                total, c, s = objective(x)
                if step_state["first"]:
                    record(i, total, c, s)
                    step_state["first"] = False
                loss = (scale * total).sum()
                if torch.isfinite(loss):
                    loss.backward()
                else:
                    x.grad = torch.zeros_like(x)
                return loss

            opt.step(closure)
            if diverged:
                break
    else:
        opt = torch.optim.Adam([x], lr=cfg.adam_lr)
        for i in range(cfg.iterations):
            opt.zero_grad()
            total, c, s = objective(x)
            record(i, total, c, s)
            if len(diverged) == b:
                break
            alive = torch.isfinite(total)
            loss = torch.where(alive, scale * total, torch.zeros_like(total)).sum()
            loss.backward()
            with torch.no_grad():
                x.grad[~alive] = 0
            opt.step()
    return x.detach(), traces, diverged


def _final(objective: StyleObjective, x: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        total, c, s = objective(x)
    return torch.stack([total, c, s], dim=-1).double().cpu().numpy()


def synthesize(x_cont, x_sty, cfg: StyleTransferConfig | None = None,
               backbone: bb.VGGBackbone | None = None, seed: int | None = None) -> SynthesisResult:
    """Stylize ``x_cont`` with the texture statistics of ``x_sty``.

    Both images are H x W x 3 arrays in [0, 1]. Raises :class:`SynthesisDiverged`
    if the objective becomes non-finite.
    """
    cfg = cfg or StyleTransferConfig()
    seed = cfg.seed if seed is None else seed
    net = _make_backbone(cfg, backbone)
    t0 = time.perf_counter()
    content, style = _prepare_pair(x_cont, x_sty, cfg.max_side_px)
    objective = StyleObjective(net, content, style, cfg)
    x, traces, diverged = _run(objective, _init_pixels(content, cfg, seed), cfg)
    if diverged:
        it = diverged[0]
        raise SynthesisDiverged(it, traces[0][it][0])
    x = x.clamp(0, 1)
    final = _final(objective, x)[0]
    return SynthesisResult(
        image=x[0].permute(1, 2, 0).numpy(),
        trace=traces[0],
        wall_time=time.perf_counter() - t0,
        final=tuple(float(v) for v in final),
        checkpoint_id=net.checkpoint_id,
    )


def synthesize_batch(contents: Sequence[np.ndarray], styles: Sequence[np.ndarray],
                     cfg: StyleTransferConfig | None = None, backbone: bb.VGGBackbone | None = None,
                     seeds: Sequence[int] | None = None) -> list[SynthesisResult]:
    """Synthesize many pairs; one result per pair, in order.

    With the Adam optimizer, same-sized pairs are stacked into one batch. The
    objective is a sum of per-sample terms and Adam is elementwise, so this is
    the same computation as running each pair on its own. L-BFGS pairs run
    sequentially. Diverged samples come back with ``diverged_iteration`` set
    instead of raising.
    """
    cfg = cfg or StyleTransferConfig()
    if len(contents) != len(styles):
        raise ValidationError("contents and styles must pair up")
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(len(contents))]
    net = _make_backbone(cfg, backbone)
    results: list[SynthesisResult | None] = [None] * len(contents)
    if cfg.optimizer == "lbfgs":
        for i, (c, s) in enumerate(zip(contents, styles)):
            try:
                results[i] = synthesize(c, s, cfg, net, seeds[i])
            except SynthesisDiverged as exc:
                results[i] = SynthesisResult(np.asarray(c), [], 0.0, (math.nan,) * 3, net.checkpoint_id, exc.iteration)
        return results

    pairs = [_prepare_pair(c, s, cfg.max_side_px) for c, s in zip(contents, styles)]
    groups: dict[tuple, list[int]] = {}
    for i, (c, _) in enumerate(pairs):
        groups.setdefault(tuple(c.shape), []).append(i)
    for idx in groups.values():
        t0 = time.perf_counter()
        content = torch.cat([pairs[i][0] for i in idx])
        style = torch.cat([pairs[i][1] for i in idx])
        objective = StyleObjective(net, content, style, cfg)
        x0 = torch.cat([_init_pixels(pairs[i][0], cfg, seeds[i]) for i in idx])
        x, traces, diverged = _run(objective, x0, cfg)
        x = x.clamp(0, 1)
        final = _final(objective, x)
        per = (time.perf_counter() - t0) / len(idx)
        for j, i in enumerate(idx):
            results[i] = SynthesisResult(
                image=x[j].permute(1, 2, 0).numpy(),
                trace=traces[j],
                wall_time=per,
                final=tuple(float(v) for v in final[j]),
                checkpoint_id=net.checkpoint_id,
                diverged_iteration=diverged.get(j),
            )
    return results
