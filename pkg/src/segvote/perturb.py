"""Perturbations: per-head channel dropout, dynamic head freezing, Gaussian input noise."""
import contextlib
from dataclasses import dataclass

import torch

from .errors import ArgumentError, ConfigurationError


def channel_dropout(features, rate, generator=None):
    """Zero whole feature channels independently per sample.

    ``features`` is [B, F, H, W]; each (b, f) channel is dropped with probability
    ``rate`` and survivors are scaled by 1/(1 - rate). Rate 0 returns the input
    untouched and consumes no randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return features
    keep = 1.0 - rate
    probs = torch.full(features.shape[:2] + (1, 1), keep, dtype=features.dtype)
    mask = torch.bernoulli(probs, generator=generator)
    return features * mask / keep


@dataclass(frozen=True)
class FreezeMask:
    frozen: frozenset
    head_count: int

    def __post_init__(self):
        bad = [i for i in self.frozen if not 0 <= i < self.head_count]
        if bad:
            raise ArgumentError(f"freeze indices {sorted(bad)} out of range for {self.head_count} heads")

    def __contains__(self, index):
        return index in self.frozen

    def __len__(self):
        return len(self.frozen)

    def as_list(self):
        return sorted(self.frozen)


def select_freeze_set(head_count, generator=None, count=None):
    """Draw ``count`` distinct heads uniformly without replacement (default: half, rounded down)."""
    if head_count < 2:
        raise ConfigurationError(f"dynamic freezing needs at least 2 heads, got {head_count}")
    if count is None:
        count = head_count // 2
    if not 0 <= count <= head_count:
        raise ConfigurationError(f"freeze count {count} invalid for {head_count} heads")
    perm = torch.randperm(head_count, generator=generator)
    return FreezeMask(frozenset(int(i) for i in perm[:count]), head_count)


@contextlib.contextmanager
def frozen_heads(net, mask, allow_all=False):
    """Exclude the masked heads' parameters from gradient updates inside the block.

    Frozen heads still run forward and still pass gradient down to the trunk;
    only their own weights stop receiving ``.grad``. Always unfreezes on exit.
    """
    heads = net.heads
    if mask.head_count != len(heads):
        raise ArgumentError(f"mask built for {mask.head_count} heads, net has {len(heads)}")
    if len(mask) == len(heads) and len(heads) > 0 and not allow_all:
        raise ArgumentError("freezing every head requires allow_all=True")
    saved = {}
    try:
        for i in mask.frozen:
            for p in heads[i].parameters():
                saved[p] = p.requires_grad
                p.requires_grad_(False)
                p.grad = None
        yield mask
    finally:
        for p, flag in saved.items():
            p.requires_grad_(flag)


def with_frozen_heads(net, mask, body, allow_all=False):
    with frozen_heads(net, mask, allow_all=allow_all):
        return body()


def gaussian_perturb(images, sd, generator=None):
    if not sd > 0 or not torch.isfinite(torch.tensor(float(sd))):
        raise ConfigurationError(f"noise sd must be a positive finite number, got {sd}")
    noise = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    return images + sd * noise
