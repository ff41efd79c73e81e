"""Cross-entropy loss stack for multi-head and cross-model training.

Predictions are raw logits [B, C, H, W]; softmax happens inside the fused
log-softmax of ``pixel_ce``. Reductions always go pixels first, then heads
or networks.
"""
import itertools

import torch
import torch.nn.functional as F

from .errors import ArgumentError, DegenerateTargetError

IGNORE_INDEX = 255


def pixel_ce(logits, target, ignore_index=IGNORE_INDEX):
    """Mean of -log softmax(logits)[target] over the non-ignored pixels."""
    if logits.dim() != 4 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ArgumentError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not agree")
    if not (target != ignore_index).any():
        raise DegenerateTargetError("every target pixel is IGNORE")
    return F.cross_entropy(logits, target, ignore_index=ignore_index)


def supervised_multihead_loss(head_logits, gt, ignore_index=IGNORE_INDEX):
    if len(head_logits) == 0:
        raise ArgumentError("need at least one head")
    return torch.stack([pixel_ce(p, gt, ignore_index) for p in head_logits]).mean()


def unsupervised_head_loss(main_logits, pseudo):
    # pseudo labels are dense: no ignore index, and no gradient path back to the voters
    return pixel_ce(main_logits, pseudo.detach(), ignore_index=-100)


def total_loss(sup, unsup, lam=1.0):
    return sup + lam * unsup


def dm_supervised_loss(preds, gt, ignore_index=IGNORE_INDEX):
    if len(preds) != 3:
        raise ArgumentError(f"expected predictions from exactly 3 networks, got {len(preds)}")
    return torch.stack([pixel_ce(p, gt, ignore_index) for p in preds]).mean()


def dm_pair_losses(preds, pseudos):
    """Every cross term {(m, n): CE(preds[m], pseudos[n])} for m != n."""
    if len(preds) != 3 or len(pseudos) != 3:
        raise ArgumentError(f"expected 3 predictions and 3 pseudo labels, got {len(preds)} and {len(pseudos)}")
    return {
        (m, n): unsupervised_head_loss(preds[m], pseudos[n])
        for m, n in itertools.permutations(range(3), 2)
    }


def dm_unsupervised_loss(preds, pseudos):
    terms = dm_pair_losses(preds, pseudos)
    return torch.stack(list(terms.values())).mean()
