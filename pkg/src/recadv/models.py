"""Network definitions: perturbation generator, recovery net, discriminator,
target classifiers, and a small classifier zoo for transfer studies.

The generator and the recovery net share one architecture (encoder of
three conv layers with instance norm + ReLU, a bottleneck of residual
blocks, a mirrored decoder) so that the pair stays homologous; only the
bottleneck depth and the output bound differ between instances.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

PROB_CLAMP = 1e-6  # keep discriminator outputs strictly inside (0, 1)

ZOO_ARCHS = ("lenet5", "convnet", "mlp", "resnetlite")
LENET5_DEPTH = 5  # fixed by the architecture definition


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    base_width: int = 16
    bottleneck_depth: int = 4
    out_bound: float = 0.3  # tanh output scale, caps per-pixel magnitude
    norm: str = "instance"
    long_skips: bool = False

    def __post_init__(self):
        if self.bottleneck_depth < 1:
            raise ConfigError("bottleneck_depth must be >= 1")
        if self.out_bound <= 0:
            raise ConfigError("out_bound must be positive")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")


@dataclass(frozen=True)
class RecoverConfig(GeneratorConfig):
    # the regression target is a pixel difference, so its natural range is
    # [-1, 1]; a tighter tanh bound would saturate exactly where accurate
    # amplitudes matter. Plain (norm-free) features keep per-image
    # amplitude information that instance norm would strip, and the
    # decoder reuses encoder features so fine stroke geometry survives.
    out_bound: float = 1.0
    norm: str = "none"
    long_skips: bool = True


def homologous_recover_config(gen_cfg, depth=None, out_bound=None):
    """Recovery-net config matching the generator's width and depth."""
    return RecoverConfig(
        in_channels=gen_cfg.in_channels,
        base_width=gen_cfg.base_width,
        bottleneck_depth=gen_cfg.bottleneck_depth if depth is None else depth,
        out_bound=1.0 if out_bound is None else out_bound,
    )


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, channels, norm="instance"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(norm, channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


class PerturbationNet(nn.Module):
    """Image-to-perturbation network used for both generation and recovery.

    Encoder strides 1,2,2; a bottleneck of residual blocks; a mirrored
    decoder; with ``long_skips`` the decoder stages additively reuse the
    matching encoder features (fine spatial structure survives, no extra
    parameters). The final
    activation is tanh scaled by ``out_bound``. Inputs whose sides are
    not divisible by 4 are reflect-padded to the next multiple and the
    output is cropped back, so output shape always equals input shape.
    """

    TOTAL_STRIDE = 4

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.enc1 = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w, 3, stride=1, padding=1),
            _norm(cfg.norm, w),
            nn.ReLU(inplace=True),
        )
        self.enc2 = nn.Sequential(
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            _norm(cfg.norm, 2 * w),
            nn.ReLU(inplace=True),
        )
        self.enc3 = nn.Sequential(
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            _norm(cfg.norm, 4 * w),
            nn.ReLU(inplace=True),
        )
        self.bottleneck = nn.Sequential(
            *[ResidualBlock(4 * w, cfg.norm) for _ in range(cfg.bottleneck_depth)]
        )
        self.dec1 = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1),
            _norm(cfg.norm, 2 * w),
            nn.ReLU(inplace=True),
        )
        self.dec2 = nn.Sequential(
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1),
            _norm(cfg.norm, w),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(w, cfg.in_channels, 3, padding=1)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected rank-4 input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        _, _, h, w = x.shape
        pad_h = (-h) % self.TOTAL_STRIDE
        pad_w = (-w) % self.TOTAL_STRIDE
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d1 = self.dec1(self.bottleneck(e3))
        if self.cfg.long_skips:
            d1 = d1 + e2
        d2 = self.dec2(d1)
        if self.cfg.long_skips:
            d2 = d2 + e1
        out = self.head(d2)
        if pad_h or pad_w:
            out = out[:, :, :h, :w]
        return self.cfg.out_bound * torch.tanh(out)


def make_generator(cfg=None):
    return PerturbationNet(cfg or GeneratorConfig())


def make_recover(cfg=None):
    return PerturbationNet(cfg or RecoverConfig())


class Discriminator(nn.Module):
    """Four strided conv stages, global average, sigmoid probability."""

    def __init__(self, in_channels=1, base_width=16):
        super().__init__()
        w = base_width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 4, stride=2, padding=1),
        )

    def forward(self, x):
        score = self.features(x).mean(dim=(1, 2, 3))
        return torch.sigmoid(score).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


# --------------------------------------------------------------------------
# target classifiers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierSpec:
    arch: str = "lenet5"
    depth: int = LENET5_DEPTH
    num_classes: int = 10
    input_shape: tuple = (1, 28, 28)

    def __post_init__(self):
        if self.arch not in ZOO_ARCHS:
            raise ConfigError(f"unsupported arch {self.arch!r}")
        if self.arch == "lenet5":
            if self.depth != LENET5_DEPTH:
                raise ConfigError("lenet5 depth is fixed")
            if self.input_shape != (1, 28, 28) or self.num_classes != 10:
                raise ConfigError("lenet5 is fixed to 28x28x1 input with 10 classes")
        elif self.depth < 1:
            raise ConfigError("depth must be >= 1")

    def to_dict(self):
        return {
            "arch": self.arch,
            "depth": self.depth,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            arch=d["arch"],
            depth=int(d["depth"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
        )


class LeNet5(nn.Module):
    def __init__(self, num_classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x)


class ConvNet(nn.Module):
    """Plain conv stack; ``depth`` = number of 3x3 conv layers."""

    def __init__(self, depth, in_channels=1, num_classes=10, width=16,
                 input_hw=(28, 28)):
        super().__init__()
        layers = []
        c = in_channels
        h, w = input_hw
        for i in range(depth):
            layers.append(nn.Conv2d(c, width, 3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            if i < 2:  # 28 -> 14 -> 7, then keep resolution
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            c = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(width * h * w, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class MLP(nn.Module):
    """Fully-connected net; ``depth`` = number of hidden layers."""

    def __init__(self, depth, input_shape=(1, 28, 28), num_classes=10, width=256):
        super().__init__()
        d_in = int(torch.tensor(input_shape).prod())
        dims = [d_in] + [width] * depth
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(dims[-1], num_classes)

    def forward(self, x):
        return self.head(self.body(x.flatten(1)))


class PlainResidualBlock(nn.Module):
    # no norm layers: keeps the forward a pure function of (input, params)
    def __init__(self, channels):
        super().__init__()
        self.c1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.c2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.c2(F.relu(self.c1(x))))


class ResNetLite(nn.Module):
    """Small residual classifier; ``depth`` = number of residual blocks."""

    def __init__(self, depth, in_channels=1, num_classes=10, width=16,
                 input_hw=(28, 28)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.blocks = nn.Sequential(*[PlainResidualBlock(width) for _ in range(depth)])
        self.pool = nn.MaxPool2d(2)
        h, w = input_hw[0] // 4, input_hw[1] // 4
        self.head = nn.Linear(width * h * w, num_classes)

    def forward(self, x):
        x = self.pool(self.blocks(self.stem(x)))
        return self.head(x.flatten(1))


def build_classifier(spec):
    """Instantiate the classifier a spec describes."""
    if spec.arch == "lenet5":
        return LeNet5(spec.num_classes)
    if spec.arch == "convnet":
        return ConvNet(spec.depth, spec.input_shape[0], spec.num_classes,
                       input_hw=spec.input_shape[1:])
    if spec.arch == "mlp":
        return MLP(spec.depth, spec.input_shape, spec.num_classes)
    if spec.arch == "resnetlite":
        return ResNetLite(spec.depth, spec.input_shape[0], spec.num_classes,
                          input_hw=spec.input_shape[1:])
    raise ConfigError(f"unsupported arch {spec.arch!r}")


def build_model_family(arch, depths):
    """Specs for one architecture family at several depths."""
    if arch not in ZOO_ARCHS:
        raise ConfigError(f"unsupported arch {arch!r}")
    return [ClassifierSpec(arch=arch, depth=d) for d in depths]


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
