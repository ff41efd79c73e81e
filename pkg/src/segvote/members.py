"""Three small segmentation networks with different topologies for cross-model training.

Desk-scale stand-ins for a pyramid-pooling net, a skip-connected U-shaped net
and an unpooling encoder-decoder. Each maps [B, Cin, H, W] to logits [B, C, H, W].
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .segmodel import _conv_block, kaiming_init_
from .seeding import make_generator


class PyramidPoolNet(nn.Module):
    def __init__(self, bands, classes, width=48, bins=(1, 2, 4)):
        super().__init__()
        self.encoder = nn.Sequential(
            _conv_block(bands, 24, stride=2),
            _conv_block(24, width, stride=2),
            _conv_block(width, width),
        )
        self.bins = bins
        self.reduce = nn.ModuleList(nn.Conv2d(width, width // 4, 1) for _ in bins)
        self.fuse = _conv_block(width + len(bins) * (width // 4), width)
        self.classifier = nn.Conv2d(width, classes, 1)
        self.in_channels = bands

    def forward(self, x):
        f = self.encoder(x)
        pooled = [f]
        for b, conv in zip(self.bins, self.reduce):
            p = conv(F.adaptive_avg_pool2d(f, b))
            pooled.append(F.interpolate(p, size=f.shape[-2:], mode="bilinear", align_corners=False))
        y = self.classifier(self.fuse(torch.cat(pooled, dim=1)))
        return F.interpolate(y, size=x.shape[-2:], mode="bilinear", align_corners=False)


class UNetLite(nn.Module):
    def __init__(self, bands, classes, base=12):
        super().__init__()
        self.enc1 = _conv_block(bands, base)
        self.enc2 = _conv_block(base, base * 2, stride=2)
        self.enc3 = _conv_block(base * 2, base * 4, stride=2)
        self.dec2 = _conv_block(base * 4 + base * 2, base * 2)
        self.dec1 = _conv_block(base * 2 + base, base)
        self.classifier = nn.Conv2d(base, classes, 1)
        self.in_channels = bands

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        return self.classifier(d1)


class UnpoolNet(nn.Module):
    """Encoder with max-pool indices reused by max-unpooling in the decoder; no skips."""

    def __init__(self, bands, classes, widths=(16, 32, 48)):
        super().__init__()
        w1, w2, w3 = widths
        self.enc1 = _conv_block(bands, w1)
        self.enc2 = _conv_block(w1, w2)
        self.enc3 = _conv_block(w2, w3)
        self.dec3 = _conv_block(w3, w2)
        self.dec2 = _conv_block(w2, w1)
        self.dec1 = _conv_block(w1, w1)
        self.classifier = nn.Conv2d(w1, classes, 1)
        self.in_channels = bands

    def forward(self, x):
        h, i1 = F.max_pool2d(self.enc1(x), 2, return_indices=True)
        h, i2 = F.max_pool2d(self.enc2(h), 2, return_indices=True)
        h = self.enc3(h)
        h = F.max_unpool2d(self.dec3(h), i2, 2)
        h = F.max_unpool2d(self.dec2(h), i1, 2)
        return self.classifier(self.dec1(h))


MEMBER_ARCHS = {"pspnet": PyramidPoolNet, "unet": UNetLite, "segnet": UnpoolNet}


def build_member(arch, bands, classes, seed, index=0):
    try:
        cls = MEMBER_ARCHS[arch]
    except KeyError:
        raise ConfigurationError(f"unknown member architecture {arch!r}; choose from {sorted(MEMBER_ARCHS)}") from None
    net = cls(bands, classes)
    kaiming_init_(net, make_generator(seed, "init", "member", index, arch))
    net.classes = classes
    net.arch = arch
    return net
