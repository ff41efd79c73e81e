"""Multi-head segmentation network: one shared trunk, L independently initialised heads."""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError
from .perturb import channel_dropout
from .seeding import make_generator


@dataclass
class ModelSpec:
    classes: int
    heads: int = 10
    bands: int = 3
    trunk: str = "desk"
    width: int = 32
    dropout: float = 0.5
    seed: int = 0

    def validate(self):
        if self.heads < 1:
            raise ConfigurationError(f"head count must be >= 1, got {self.heads}")
        if self.classes < 2:
            raise ConfigurationError(f"class count must be >= 2, got {self.classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.bands < 1:
            raise ConfigurationError(f"band count must be >= 1, got {self.bands}")


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(math.gcd(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class DeskTrunk(nn.Module):
    """Four strided conv blocks (down to 1/16) with a top-down fusion back to 1/4.

    The deepest block is wide but runs at 4x4 on 64x64 inputs, so most of the
    parameters sit where they are cheap to evaluate. Output: [B, width, H/4, W/4].
    """

    stride = 4

    def __init__(self, bands, width=32):
        super().__init__()
        self.stem = _conv_block(bands, 32, stride=2)
        self.block2 = _conv_block(32, 64, stride=2)
        self.block3 = _conv_block(64, 128, stride=2)
        self.block4 = nn.Sequential(_conv_block(128, 256, stride=2), _conv_block(256, 256))
        self.top = nn.Conv2d(256, width, 1)
        self.lateral3 = nn.Conv2d(128, width, 1)
        self.lateral2 = nn.Conv2d(64, width, 1)
        self.out_norm = nn.GroupNorm(math.gcd(8, width), width)
        self.in_channels = bands
        self.out_channels = width

    def forward(self, x):
        f2 = self.block2(self.stem(x))
        f3 = self.block3(f2)
        f4 = self.block4(f3)
        y = self.lateral3(f3) + F.interpolate(self.top(f4), size=f3.shape[-2:], mode="bilinear", align_corners=False)
        y = self.lateral2(f2) + F.interpolate(y, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        return F.relu(self.out_norm(y))


class Head(nn.Module):
    """conv3x3(F->F) + ReLU, optional channel dropout, conv1x1(F->C)."""

    def __init__(self, width, classes, dropout=0.0):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, classes, 1)
        self.dropout = dropout

    def forward(self, feats, dropout=False, generator=None):
        h = F.relu(self.conv1(feats))
        if dropout:
            h = channel_dropout(h, self.dropout, generator)
        return self.conv2(h)


class MultiHeadNet(nn.Module):
    def __init__(self, trunk, heads):
        super().__init__()
        self.trunk = trunk
        self.heads = nn.ModuleList(heads)

    @property
    def head_count(self):
        return len(self.heads)

    @property
    def in_channels(self):
        return self.trunk.in_channels

    def forward(self, x, dropout=False, generator=None):
        """Return a list of per-head logits, each resized to the input resolution."""
        return self.run_heads(self.trunk(x), x.shape[-2:], dropout, generator)

    def run_heads(self, feats, size, dropout=False, generator=None):
        outs = []
        for head in self.heads:
            logits = head(feats, dropout=dropout, generator=generator)
            outs.append(F.interpolate(logits, size=size, mode="bilinear", align_corners=False))
        return outs


def kaiming_init_(module, generator):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_trunk(spec):
    if isinstance(spec.trunk, nn.Module):
        return spec.trunk
    if spec.trunk == "desk":
        return DeskTrunk(spec.bands, spec.width)
    raise ConfigurationError(f"unknown trunk {spec.trunk!r}")


def build_multihead_model(spec):
    """Build a net whose trunk and every head are seeded from ``spec.seed``.

    Head i is initialised from its own sub-stream derived from (seed, i), so
    heads start from different weights yet the whole net is reproducible.
    An externally supplied trunk (an ``nn.Module`` with ``in_channels`` and
    ``out_channels``) is used as-is without re-initialisation.
    """
    spec.validate()
    trunk = build_trunk(spec)
    if isinstance(spec.trunk, str):
        kaiming_init_(trunk, make_generator(spec.seed, "init", "trunk"))
    heads = []
    for i in range(spec.heads):
        head = Head(trunk.out_channels, spec.classes, spec.dropout)
        kaiming_init_(head, make_generator(spec.seed, "init", "head", i))
        heads.append(head)
    return MultiHeadNet(trunk, heads)


def check_images(net, images):
    if images.dim() != 4:
        raise ShapeError(f"expected [B, C, H, W] images, got shape {tuple(images.shape)}")
    expected = getattr(net, "in_channels", None)
    if expected is not None and images.shape[1] != expected:
        raise ShapeError(f"model expects {expected} bands, images have {images.shape[1]}")


def forward_heads(net, images, dropout_enabled=False, rng=None):
    check_images(net, images)
    if isinstance(net, MultiHeadNet):
        return net(images, dropout=dropout_enabled, generator=rng)
    return [net(images)]


def count_params(module):
    return sum(p.numel() for p in module.parameters())


def parameter_footprint(net):
    trunk = count_params(net.trunk)
    per_head = count_params(net.heads[0])
    return {
        "trunk_params": trunk,
        "per_head_params": per_head,
        "head_count": net.head_count,
        "total_params": trunk + net.head_count * per_head,
    }
