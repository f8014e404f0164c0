"""VGG19 feature extraction as plain per-layer activation matrices.

The loss code in :mod:`stypath.style` only ever sees ``N_l x M_l`` matrices
(filters x spatial positions), so everything framework-specific lives here.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from stypath.errors import ConfigurationError, ShapeError, ValidationError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_CHECKPOINT = "torchvision:vgg19:IMAGENET1K_V1"

# Index of every conv layer inside torchvision's ``vgg19().features``.
VGG19_CONV_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30, "conv5_3": 32, "conv5_4": 34,
}
VGG19_CONV_ORDER = list(VGG19_CONV_INDEX)

# (filters, spatial downsampling factor) per conv layer.
VGG19_LAYER_TABLE = {
    name: (
        {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}[int(name[4])],
        2 ** (int(name[4]) - 1),
    )
    for name in VGG19_CONV_INDEX
}

# "gatys": conv4_2 content, first conv of each block for style.
# "sequential": 4th conv layer in network order for content, convs 1-5 in order for style.
LAYER_PRESETS = {
    "gatys": (("conv4_2",), ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")),
    "sequential": (("conv2_2",), tuple(VGG19_CONV_ORDER[:5])),
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    role: Literal["content", "style"]

    def __post_init__(self):
        if self.role not in ("content", "style"):
            raise ConfigurationError(f"unknown layer role {self.role!r}")
        if self.name not in VGG19_CONV_INDEX:
            raise ConfigurationError(f"layer {self.name!r} is not a VGG19 conv layer")


def layer_specs(content: Iterable[str], style: Iterable[str]) -> list[LayerSpec]:
    specs = [LayerSpec(n, "content") for n in content] + [LayerSpec(n, "style") for n in style]
    roles = {s.role for s in specs}
    if roles != {"content", "style"}:
        raise ConfigurationError("need at least one content layer and one style layer")
    return specs


def preset_layers(preset: str = "gatys") -> list[LayerSpec]:
    try:
        content, style = LAYER_PRESETS[preset]
    except KeyError:
        raise ConfigurationError(f"unknown layer preset {preset!r}; choose from {sorted(LAYER_PRESETS)}") from None
    return layer_specs(content, style)


class FeatureStack(dict):
    """Ordered ``layer name -> (..., N_l, M_l)`` activation matrices.

    Leading dimensions (if any) are batch dimensions.
    """

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: tuple(v.shape[-2:]) for k, v in self.items()}

    def validate(self) -> "FeatureStack":
        for name, mat in self.items():
            n, m = mat.shape[-2:]
            if n < 1 or m < 1:
                raise ShapeError(f"layer {name} has empty activation matrix {tuple(mat.shape)}")
            if not bool(torch.isfinite(torch.as_tensor(mat)).all()):
                raise ValidationError(f"layer {name} has non-finite activations")
        return self


def _check_image(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {tuple(x.shape)}")
    if torch.isnan(x).any():
        raise ValidationError("image contains NaN pixels")
    if not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise ValidationError("image values must be finite and in [0, 1]")
    return x


def to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 1 x 3 x H x W tensor (unnormalized)."""
    return _check_image(image).to(dtype).permute(2, 0, 1).unsqueeze(0).contiguous()


def normalize(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return x * std + mean


def preprocess(image, dtype=torch.float32) -> torch.Tensor:
    """Channel-normalize an RGB image in [0, 1] to the backbone's input statistics."""
    return normalize(to_tensor(image, dtype))


def deprocess(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`preprocess` for a single image."""
    return denormalize(x)[0].permute(1, 2, 0).detach().cpu().numpy()


def resize_max_side(image: np.ndarray, max_side: int | None) -> np.ndarray:
    """Bilinear downscale so the longer side is at most ``max_side``."""
    h, w = image.shape[:2]
    if not max_side or max(h, w) <= max_side:
        return image
    scale = max_side / max(h, w)
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    return resize_image(image, size)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(image.shape[:2]) == tuple(size):
        return np.asarray(image)
    x = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=True)
    return y[0].permute(1, 2, 0).clamp(0, 1).numpy()


def _load_state_dict(checkpoint_id: str) -> tuple[dict | None, str]:
    """Resolve ``checkpoint_id`` to a ``features`` state dict.

    Accepted forms: ``torchvision:vgg19:<WEIGHTS>``, ``random:<seed>``, or a
    path to a saved state dict. Returns ``(state_dict or None, effective id)``.
    """
    if checkpoint_id.startswith("random:"):
        return None, checkpoint_id
    if checkpoint_id.startswith("torchvision:"):
        _, arch, weights = checkpoint_id.split(":")
        if arch != "vgg19":
            raise ConfigurationError(f"unsupported backbone architecture {arch!r}")
        try:
            model = torchvision.models.vgg19(weights=weights)
        except Exception as exc:  # offline, or unknown weights tag
            warnings.warn(
                f"could not load {checkpoint_id} ({exc.__class__.__name__}); "
                "falling back to seeded random initialization random:0",
                RuntimeWarning,
                stacklevel=3,
            )
            return None, "random:0"
        return model.features.state_dict(), checkpoint_id
    path = Path(checkpoint_id)
    if not path.exists():
        raise ConfigurationError(f"backbone checkpoint {checkpoint_id!r} not found")
    state = torch.load(path, map_location="cpu", weights_only=True)
    state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier")}
    return state, checkpoint_id


class VGGBackbone(nn.Module):
    """Frozen VGG19 ``features`` stack truncated after the deepest requested layer.

    Activations are read after the rectifier that follows each conv.
    """

    def __init__(self, checkpoint_id: str = DEFAULT_CHECKPOINT, max_layer: str = "conv5_1"):
        super().__init__()
        if max_layer not in VGG19_CONV_INDEX:
            raise ConfigurationError(f"unknown VGG19 layer {max_layer!r}")
        state, effective = _load_state_dict(checkpoint_id)
        if state is None:
            seed = int(effective.split(":", 1)[1])
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                full = torchvision.models.vgg19(weights=None).features
        else:
            full = torchvision.models.vgg19(weights=None).features
            keep = VGG19_CONV_INDEX[max_layer] + 2
            needed = {k for k in full.state_dict() if int(k.split(".")[0]) < keep}
            missing = needed - set(state)
            if missing:
                raise ConfigurationError(f"checkpoint {checkpoint_id!r} lacks {sorted(missing)[:4]} needed up to {max_layer}")
            full.load_state_dict({k: v for k, v in state.items() if k in needed}, strict=False)
        # keep through the rectifier after max_layer
        self.features = full[: VGG19_CONV_INDEX[max_layer] + 2].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.requested_checkpoint = checkpoint_id
        self.checkpoint_id = effective
        self._relu_index = {name: idx + 1 for name, idx in VGG19_CONV_INDEX.items() if idx + 1 < len(self.features)}

    @property
    def pretrained(self) -> bool:
        return not self.checkpoint_id.startswith("random:")

    def train(self, mode: bool = True):
        # inference mode is permanent
        return super().train(False)

    def resolve(self, layers: Sequence[LayerSpec] | Sequence[str]) -> list[str]:
        names = [l.name if isinstance(l, LayerSpec) else l for l in layers]
        if not names:
            raise ConfigurationError("no layers requested")
        for n in names:
            if n not in self._relu_index:
                raise ConfigurationError(
                    f"layer {n!r} does not resolve in this backbone (available: {sorted(self._relu_index)})"
                )
        return names

    def forward(self, x: torch.Tensor, layers: Sequence[LayerSpec] | Sequence[str]) -> FeatureStack:
        names = self.resolve(layers)
        wanted = {self._relu_index[n]: n for n in names}
        last = max(wanted)
        out: dict[str, torch.Tensor] = {}
        h = x
        for i, module in enumerate(self.features):
            h = module(h)
            if i in wanted:
                b, c = h.shape[:2]
                out[wanted[i]] = h.reshape(b, c, -1)
            if i == last:
                break
        return FeatureStack((n, out[n]) for n in names)

    def weight_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def expected_shapes(layers: Sequence[str], height: int, width: int) -> dict[str, tuple[int, int]]:
    """Per-layer ``(N_l, M_l)`` from the VGG19 architecture table."""
    shapes = {}
    for name in layers:
        filters, factor = VGG19_LAYER_TABLE[name]
        h, w = height, width
        for _ in range(int(np.log2(factor))):
            h, w = h // 2, w // 2
        shapes[name] = (filters, h * w)
    return shapes


def extract_features(
    backbone: VGGBackbone, image: torch.Tensor, layers: Sequence[LayerSpec] | Sequence[str]
) -> FeatureStack:
    """Activations of ``image`` (already preprocessed, B x 3 x H x W) at ``layers``.

    Batch dimension is dropped when ``B == 1``.
    """
    with torch.no_grad():
        stack = backbone(image, layers)
    if image.shape[0] == 1:
        stack = FeatureStack((k, v[0]) for k, v in stack.items())
    return stack.validate()


def layers_from_config(cfg: Mapping) -> list[LayerSpec]:
    return layer_specs(cfg.get("content_layers", LAYER_PRESETS["gatys"][0]),
                       cfg.get("style_layers", LAYER_PRESETS["gatys"][1]))
