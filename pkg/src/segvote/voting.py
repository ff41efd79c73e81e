"""Pseudo-label voting over head predictions: mean voting, then weighted max voting.

Score maps are [B, C, H, W]; label maps are [B, H, W] integer tensors. All argmax
ties go to the lowest class index; in max voting a tie that includes the
mean-vote class goes to the mean-vote class.
"""
from dataclasses import dataclass

import torch

from .errors import ArgumentError, ConfigurationError


@dataclass
class VoteWeight:
    phi: float = 1.0
    mode: str = "fixed"  # or "learnable"

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise ConfigurationError(f"unknown vote-weight mode {self.mode!r}")
        if not (self.phi >= 0 and self.phi < float("inf")):
            raise ConfigurationError(f"phi must be finite and >= 0, got {self.phi}")


def argmax_lowest(scores, dim=1):
    """Argmax that resolves ties to the lowest index on every backend."""
    best = scores.max(dim=dim, keepdim=True).values
    hit = scores == best
    idx = torch.arange(scores.shape[dim], device=scores.device)
    shape = [1] * scores.dim()
    shape[dim] = -1
    big = torch.full_like(idx, scores.shape[dim])
    return torch.where(hit, idx.view(shape), big.view(shape)).min(dim=dim).values


def _check_maps(maps, what):
    if len(maps) == 0:
        raise ArgumentError(f"{what}: need at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ArgumentError(f"{what}: shape mismatch {tuple(m.shape)} vs {tuple(shape)}")


def mean_vote(head_probs):
    _check_maps(head_probs, "mean_vote")
    mean_prob = torch.stack(list(head_probs)).mean(dim=0)
    return mean_prob, argmax_lowest(mean_prob)


def vote_tally(individual_labels, mean_label, phi, classes):
    """Per-pixel, per-class vote totals [B, C, H, W] in float64."""
    _check_maps(list(individual_labels) + [mean_label], "max_vote")
    for lab in list(individual_labels) + [mean_label]:
        if lab.dtype.is_floating_point:
            raise ArgumentError("label maps must be integer tensors")
        if (lab < 0).any() or (lab >= classes).any():
            raise ArgumentError("label maps must hold class indices in [0, C); IGNORE is not allowed")
    b, h, w = mean_label.shape
    tally = torch.zeros(b, classes, h, w, dtype=torch.float64)
    for lab in individual_labels:
        tally.scatter_add_(1, lab.unsqueeze(1), torch.ones(b, 1, h, w, dtype=torch.float64))
    tally.scatter_add_(1, mean_label.unsqueeze(1), torch.full((b, 1, h, w), float(phi), dtype=torch.float64))
    return tally


def max_vote(individual_labels, mean_label, weight, classes=None):
    phi = weight.phi if isinstance(weight, VoteWeight) else float(weight)
    if classes is None:
        classes = int(max(int(lab.max()) for lab in list(individual_labels) + [mean_label])) + 1
    tally = vote_tally(individual_labels, mean_label, phi, classes)
    best = tally.max(dim=1).values
    mean_wins = tally.gather(1, mean_label.unsqueeze(1)).squeeze(1) == best
    return torch.where(mean_wins, mean_label, argmax_lowest(tally))


@torch.no_grad()
def make_pseudo_label(head_probs, weight):
    """Full voting pipeline; returns (final_label, mean_prob), both detached."""
    if len(head_probs) < 2:
        raise ArgumentError("make_pseudo_label needs at least two head maps")
    head_probs = [p.detach() for p in head_probs]
    mean_prob, mean_label = mean_vote(head_probs)
    individual = [argmax_lowest(p) for p in head_probs]
    final = max_vote(individual, mean_label, weight, classes=head_probs[0].shape[1])
    return final, mean_prob


def phi_surrogate_loss(phi, head_probs, mean_prob, final_label):
    """Differentiable proxy for learning phi.

    Cross-entropy of the phi-weighted soft mixture (sum of head probabilities
    plus phi times the mean probability, renormalised) against the voted label.
    Only ``phi`` carries gradient.
    """
    heads_sum = torch.stack([p.detach() for p in head_probs]).sum(dim=0)
    mix = (heads_sum + phi * mean_prob.detach()) / (len(head_probs) + phi)
    picked = mix.gather(1, final_label.unsqueeze(1)).clamp_min(1e-12)
    return -picked.log().mean()
