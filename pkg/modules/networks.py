"""
networks.py — Classifiers with a softmax head.

  • ConvNet      desk-scale reference: six 3×3 conv layers (~100k parameters)
  • WideResNet   WRN-28-2 for full-scale runs
  • LinearSoftmax  tiny model for gradient checks

Every forward pass returns class probabilities, one row per input.
The classification head is always built last, so two models that differ
only in class count share identical backbone initialisation for a seed.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from modules.config_data import seeded_generator
from modules.errors import ConfigError


def _conv_bn(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.LeakyReLU(0.1),
    )


class ConvNet(nn.Module):
    def __init__(self, num_classes: int, width: int = 16, in_channels: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            _conv_bn(in_channels, width),
            _conv_bn(width, width),
            nn.MaxPool2d(2),
            _conv_bn(width, 2 * width),
            _conv_bn(2 * width, 2 * width),
            nn.MaxPool2d(2),
            _conv_bn(2 * width, 4 * width),
            _conv_bn(4 * width, 4 * width),
            nn.AdaptiveAvgPool2d((1, 1)),
            nn.Flatten(),
        )
        self.head = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        return F.softmax(self.head(self.features(x)), dim=1)


class WideBasicBlock(nn.Module):
    """Pre-activation residual block: BN-ReLU-conv twice plus a shortcut."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_channels, momentum=0.001)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels, momentum=0.001)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)

        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
            )

    def forward(self, x):
        out = F.leaky_relu(self.bn1(x), 0.1)
        shortcut = x if len(self.shortcut) == 0 else self.shortcut(out)
        out = self.conv1(out)
        out = self.conv2(F.leaky_relu(self.bn2(out), 0.1))
        return out + shortcut


class WideResNet(nn.Module):
    def __init__(self, num_classes: int, depth: int = 28, widen: int = 2, in_channels: int = 3):
        super().__init__()
        if (depth - 4) % 6:
            raise ConfigError("depth", "wide resnet depth must be 6n + 4")
        blocks = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]

        self.in_channels = widths[0]
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        self.stack1 = self._make_stack(widths[1], blocks, first_block_stride=1)
        self.stack2 = self._make_stack(widths[2], blocks, first_block_stride=2)
        self.stack3 = self._make_stack(widths[3], blocks, first_block_stride=2)
        self.bn = nn.BatchNorm2d(widths[3], momentum=0.001)
        self.head = nn.Linear(widths[3], num_classes)

    def _make_stack(self, out_channels, num_blocks, first_block_stride):
        strides = [first_block_stride] + [1] * (num_blocks - 1)
        layers = []
        for stride in strides:
            layers.append(WideBasicBlock(self.in_channels, out_channels, stride))
            self.in_channels = out_channels
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.stack3(self.stack2(self.stack1(self.conv1(x))))
        out = F.leaky_relu(self.bn(out), 0.1)
        out = torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)
        return F.softmax(self.head(out), dim=1)


class LinearSoftmax(nn.Module):
    def __init__(self, num_classes: int, in_features: int):
        super().__init__()
        self.flatten = nn.Flatten()
        self.head = nn.Linear(in_features, num_classes)

    def forward(self, x):
        return F.softmax(self.head(self.flatten(x)), dim=1)


def build_model(name: str, num_classes: int, width: int, seed: int, image_shape=(32, 32, 3)) -> nn.Module:
    """Instantiate a classifier with initialisation fixed by *seed*.

    The global torch RNG is left untouched.
    """
    if num_classes < 2:
        raise ConfigError("num_classes", "must be >= 2")
    if width < 1:
        raise ConfigError("model_width", "must be >= 1")
    h, w, c = image_shape
    torch_seed = int(seeded_generator(seed, "init").integers(2**63 - 1))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed)
        if name == "convnet":
            return ConvNet(num_classes, width, in_channels=c)
        if name == "wrn28_2":
            return WideResNet(num_classes, depth=28, widen=2, in_channels=c)
        if name == "linear":
            return LinearSoftmax(num_classes, h * w * c)
    raise ConfigError("model", f"unknown model {name!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
