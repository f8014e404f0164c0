"""DenseNet classifiers with switchable MC dropout.

Parameter names follow torchvision's DenseNet so published checkpoints load
directly. Unlike torchvision, dropout is an ``nn.Dropout`` module after each
of the two convolutions in every bottleneck layer; that lets MC inference
put only the dropout modules in training mode while batch norm stays frozen.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from stypath.errors import ConfigurationError

ARCHITECTURES = {
    # name: (growth_rate, block_config, num_init_features, torchvision weights)
    "densenet121": (32, (6, 12, 24, 16), 64, "DenseNet121_Weights.IMAGENET1K_V1"),
    # desk-scale variant for CPU acceptance runs
    "densenet_small": (12, (3, 3, 3), 24, None),
}


class _DenseLayer(nn.Module):
    def __init__(self, in_features: int, growth_rate: int, bn_size: int, drop_rate: float):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(in_features)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv1 = nn.Conv2d(in_features, bn_size * growth_rate, 1, bias=False)
        self.drop1 = nn.Dropout(drop_rate)
        self.norm2 = nn.BatchNorm2d(bn_size * growth_rate)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(bn_size * growth_rate, growth_rate, 3, padding=1, bias=False)
        self.drop2 = nn.Dropout(drop_rate)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        x = torch.cat(features, 1)
        x = self.drop1(self.conv1(self.relu1(self.norm1(x))))
        return self.drop2(self.conv2(self.relu2(self.norm2(x))))


class _DenseBlock(nn.ModuleDict):
    def __init__(self, num_layers: int, in_features: int, growth_rate: int, bn_size: int, drop_rate: float):
        super().__init__()
        for i in range(num_layers):
            self.add_module(f"denselayer{i + 1}",
                            _DenseLayer(in_features + i * growth_rate, growth_rate, bn_size, drop_rate))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = [x]
        for layer in self.values():
            features.append(layer(features))
        return torch.cat(features, 1)


class _Transition(nn.Sequential):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_features)
        self.relu = nn.ReLU(inplace=True)
        self.conv = nn.Conv2d(in_features, out_features, 1, bias=False)
        self.pool = nn.AvgPool2d(2, 2)


class DenseNet(nn.Module):
    def __init__(self, growth_rate=32, block_config=(6, 12, 24, 16), num_init_features=64,
                 bn_size=4, drop_rate=0.1, num_classes=2):
        super().__init__()
        self.features = nn.Sequential(OrderedDict([
            ("conv0", nn.Conv2d(3, num_init_features, 7, stride=2, padding=3, bias=False)),
            ("norm0", nn.BatchNorm2d(num_init_features)),
            ("relu0", nn.ReLU(inplace=True)),
            ("pool0", nn.MaxPool2d(3, stride=2, padding=1)),
        ]))
        n = num_init_features
        for i, num_layers in enumerate(block_config):
            self.features.add_module(f"denseblock{i + 1}", _DenseBlock(num_layers, n, growth_rate, bn_size, drop_rate))
            n += num_layers * growth_rate
            if i != len(block_config) - 1:
                self.features.add_module(f"transition{i + 1}", _Transition(n, n // 2))
                n //= 2
        self.features.add_module("norm5", nn.BatchNorm2d(n))
        # last feature maps seen by the classifier; the default Grad-CAM target
        self.features.add_module("relu5", nn.ReLU(inplace=False))
        self.classifier = nn.Linear(n, num_classes)
        self.drop_rate = drop_rate
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)
            elif isinstance(m, nn.Linear):
                nn.init.constant_(m.bias, 0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.classifier(x)


def dropout_modules(model: nn.Module) -> list[nn.Dropout]:
    return [m for m in model.modules() if isinstance(m, nn.Dropout)]


def set_mc_dropout(model: nn.Module, active: bool) -> nn.Module:
    """Eval mode everywhere, with dropout modules stochastic iff ``active``."""
    model.eval()
    for m in dropout_modules(model):
        m.train(active)
    return model


def build_classifier(arch: str = "densenet121", num_classes: int = 2, drop_rate: float = 0.1,
                     pretrained: bool = True) -> tuple[DenseNet, bool]:
    """Returns ``(model, pretrained_loaded)``.

    ImageNet weights are loaded for the backbone when requested and
    available; the classifier head is always fresh. When they cannot be
    fetched a warning is issued and the model stays randomly initialized.
    """
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    growth, blocks, init, weights = ARCHITECTURES[arch]
    model = DenseNet(growth, blocks, init, drop_rate=drop_rate, num_classes=num_classes)
    loaded = False
    if pretrained and weights is not None:
        try:
            ref = torchvision.models.densenet121(weights=weights)
        except Exception as exc:
            warnings.warn(f"could not load {weights} ({exc.__class__.__name__}); training from random init",
                          RuntimeWarning, stacklevel=2)
        else:
            state = _remap_torchvision(ref.state_dict())
            state = {k: v for k, v in state.items() if not k.startswith("classifier")}
            model.load_state_dict(state, strict=False)
            loaded = True
    return model, loaded


def _remap_torchvision(state: dict) -> dict:
    # torchvision >= 0.13 names are already "denselayerN.norm1"; older ones used "norm.1"
    return {k.replace("norm.1", "norm1").replace("conv.1", "conv1").replace("norm.2", "norm2")
             .replace("conv.2", "conv2"): v for k, v in state.items()}
