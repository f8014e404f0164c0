"""Grad-CAM heat maps and overlays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from matplotlib import colormaps

from stypath import backbone as bb
from stypath.errors import ConfigurationError, ShapeError, ValidationError
from stypath.models import set_mc_dropout

DEFAULT_LAYER = "features.relu5"


@dataclass
class CamMap:
    heat: np.ndarray  # H' x W', >= 0
    upsampled: np.ndarray  # H x W in [0, 1]
    target_class: int


def _upsample(heat: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(heat, dtype=np.float64))[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def gradcam_from_maps(activations, gradients, size: tuple[int, int] | None = None,
                      target_class: int = 0) -> CamMap:
    """Grad-CAM from a ``K x H' x W'`` activation stack and its gradients."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    a = a[None] if a.ndim == 2 else a
    g = g[None] if g.ndim == 2 else g
    if a.shape != g.shape or a.ndim != 3:
        raise ShapeError(f"activations {a.shape} and gradients {g.shape} must both be K x H x W")
    weights = g.mean(axis=(1, 2))
    heat = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    up = _upsample(heat, size) if size is not None and tuple(size) != heat.shape else heat.copy()
    up = np.maximum(up, 0.0)
    peak = up.max()
    up = up / peak if peak > 0 else np.zeros_like(up)
    return CamMap(heat, up, int(target_class))


def _module(model: nn.Module, name: str) -> nn.Module:
    mods = dict(model.named_modules())
    if name not in mods:
        raise ConfigurationError(f"model has no layer {name!r}")
    return mods[name]


def compute_cam(model: nn.Module, image: np.ndarray, target_class: int, layer: str = DEFAULT_LAYER,
                input_size: tuple[int, int] | None = None) -> CamMap:
    """Grad-CAM of ``target_class`` for one H x W x 3 image in [0, 1].

    Dropout is switched off so the explanation is deterministic. The map is
    upsampled back to the image's own size.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {img.shape}")
    n_classes = model.classifier.out_features if hasattr(model, "classifier") else None
    if not isinstance(target_class, (int, np.integer)) or target_class < 0 or (
            n_classes is not None and target_class >= n_classes):
        raise ValidationError(f"target_class {target_class} out of range for {n_classes} classes")
    x_img = bb.resize_image(img, tuple(input_size)) if input_size else img
    x = bb.normalize(torch.from_numpy(np.ascontiguousarray(x_img)).permute(2, 0, 1)[None].float())

    store = {}

    def hook(_m, _inp, out):
        out.retain_grad()
        store["a"] = out

    was_training = model.training
    set_mc_dropout(model, False)
    handle = _module(model, layer).register_forward_hook(hook)
    try:
        x.requires_grad_(True)  # keeps a graph even when parameters are frozen
        logits = model(x)
        model.zero_grad()
        logits[0, int(target_class)].backward()
    finally:
        handle.remove()
        model.zero_grad()
        model.train(was_training)
        if not was_training:
            set_mc_dropout(model, False)
    act = store["a"]
    return gradcam_from_maps(act[0].detach().double().numpy(), act.grad[0].double().numpy(),
                             img.shape[:2], target_class)


def overlay(image: np.ndarray, cam: CamMap | np.ndarray, colormap: str = "jet", alpha: float = 0.5) -> np.ndarray:
    """Blend a pseudo-color map over ``image``: ``(1 - a c) img + a c cmap(c)``.

    A zero map leaves the image unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    c = np.asarray(cam.upsampled if isinstance(cam, CamMap) else cam, dtype=np.float64)
    if img.shape[:2] != c.shape:
        raise ShapeError(f"cam {c.shape} does not match image {img.shape[:2]}")
    color = colormaps[colormap](c)[..., :3]
    w = (alpha * c)[..., None]
    return (1 - w) * img + w * color
