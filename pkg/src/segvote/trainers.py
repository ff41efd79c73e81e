"""Training steps: multi-head voting (freezing or dropout), cross-model, and baselines.

A step takes a ``TrainerState`` plus one labelled and one unlabelled batch,
performs exactly one optimizer update per model and returns a ``StepReport``.
"""
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import ArgumentError, ConfigurationError
from .losses import (
    IGNORE_INDEX,
    dm_pair_losses,
    dm_supervised_loss,
    supervised_multihead_loss,
    total_loss,
    unsupervised_head_loss,
)
from .perturb import FreezeMask, frozen_heads, gaussian_perturb, select_freeze_set
from .segmodel import MultiHeadNet, check_images, forward_heads
from .voting import VoteWeight, argmax_lowest, make_pseudo_label, phi_surrogate_loss

DF, DT = "df", "dt"
BASE, SHS, INPUT_PERTURB = "base", "shs", "input-perturb"


def cyclic_pairs(labelled_count, unlabelled_count):
    """(labelled index, unlabelled index) pairs, cycling the labelled set: s = k mod M."""
    if labelled_count < 1 or unlabelled_count < 1:
        raise ConfigurationError(f"need M >= 1 and N >= 1, got M={labelled_count}, N={unlabelled_count}")
    return [(k % labelled_count, k) for k in range(unlabelled_count)]


def epoch_batches(labelled_count, unlabelled_count, batch_size, generator):
    """Shuffle both sets, pair them cyclically and chunk into batches of index tensors."""
    perm_l = torch.randperm(labelled_count, generator=generator)
    perm_u = torch.randperm(unlabelled_count, generator=generator)
    pairs = cyclic_pairs(labelled_count, unlabelled_count)
    s_idx = perm_l[torch.tensor([s for s, _ in pairs])]
    k_idx = perm_u[torch.tensor([k for _, k in pairs])]
    return [
        (s_idx[i:i + batch_size], k_idx[i:i + batch_size])
        for i in range(0, unlabelled_count, batch_size)
    ]


def steps_per_epoch(unlabelled_count, batch_size):
    return math.ceil(unlabelled_count / batch_size)


@dataclass
class OptimState:
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iter: int = 0
    max_iter: int = 1

    def __post_init__(self):
        if self.max_iter <= 0:
            raise ConfigurationError(f"max_iter must be > 0, got {self.max_iter}")


def poly_lr(state):
    frac = min(state.iter, state.max_iter) / state.max_iter
    return state.base_lr * (1.0 - frac) ** state.power


def make_optimizer(model, optim, branch_lr_mult=1.0):
    """SGD whose parallel branches learn at ``branch_lr_mult`` times the scheduled rate.

    A mean over B branches hands each branch 1/B of the gradient; scaling the
    branch learning rate by B restores single-branch pace. For a multi-head net
    the branches are the heads (the shared trunk keeps the base rate); any other
    model is itself one branch of an ensemble.
    """
    mult = float(branch_lr_mult)
    if isinstance(model, MultiHeadNet):
        groups = [
            {"params": list(model.trunk.parameters()), "lr_mult": 1.0},
            {"params": list(model.heads.parameters()), "lr_mult": mult},
        ]
    else:
        groups = [{"params": list(model.parameters()), "lr_mult": mult}]
    return torch.optim.SGD(groups, lr=optim.base_lr, momentum=optim.momentum, weight_decay=optim.weight_decay)


@dataclass
class TrainerState:
    method: str
    models: list
    optimizers: list
    streams: dict
    optim: OptimState
    vote: VoteWeight = field(default_factory=VoteWeight)
    lam: float = 1.0
    freeze_count: int | None = None
    noise_sd: float = 0.01
    ignore_index: int = IGNORE_INDEX
    epoch: int = 0
    warmup_iters: int = 0   # unsupervised term switched off before this iteration

    @property
    def effective_lam(self):
        return 0.0 if self.optim.iter < self.warmup_iters else self.lam

    @property
    def iteration(self):
        return self.optim.iter


@dataclass
class StepReport:
    iteration: int
    lr: float
    sup: float
    unsup: float
    total: float
    freeze: list | None = None
    dropout: bool = False
    main_head: int | None = None
    phi: float | None = None
    pair_terms: dict | None = None
    note: str | None = None

    def to_record(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _apply_lr(state):
    lr = poly_lr(state.optim)
    for opt in state.optimizers:
        for group in opt.param_groups:
            group["lr"] = lr * group.get("lr_mult", 1.0)
    return lr


def _update_phi(state, head_probs, mean_prob, final, lr):
    phi = torch.tensor(float(state.vote.phi), dtype=torch.float64, requires_grad=True)
    loss = phi_surrogate_loss(phi, [p.double() for p in head_probs], mean_prob.double(), final)
    (grad,) = torch.autograd.grad(loss, phi)
    state.vote.phi = max(0.0, float(phi - lr * grad))


def diversehead_step(state, labelled, unlabelled, mode=DF):
    """One iteration of multi-head training with voted pseudo labels.

    DF: half the heads (or ``state.freeze_count``) are frozen for this update.
    DT: channel dropout is active inside every head on the unlabelled
    forward; nothing is frozen.
    The supervised term averages over all heads, frozen ones included. The
    unsupervised term trains one uniformly drawn head (frozen or not) against
    the voted label.
    """
    if mode not in (DF, DT):
        raise ArgumentError(f"unknown multi-head mode {mode!r}")
    net = state.models[0]
    opt = state.optimizers[0]
    L = net.head_count
    if L < 2:
        raise ConfigurationError("multi-head training needs at least 2 heads")
    x, y = labelled
    u = unlabelled
    lr = _apply_lr(state)
    if mode == DF:
        mask = select_freeze_set(L, state.streams["freeze"], state.freeze_count)
    else:
        mask = FreezeMask(frozenset(), L)
    n_lab = x.shape[0]

    with frozen_heads(net, mask, allow_all=state.freeze_count == L):
        # one trunk pass for both batches; head dropout (DT) only on the unlabelled half
        xs = torch.cat([x, u])
        check_images(net, xs)
        feats = net.trunk(xs)
        size = x.shape[-2:]
        lab_logits = net.run_heads(feats[:n_lab], size)
        u_logits = net.run_heads(feats[n_lab:], size, dropout=mode == DT, generator=state.streams["dropout"])
        sup = supervised_multihead_loss(lab_logits, y, state.ignore_index)
        probs = [F.softmax(o.detach(), dim=1) for o in u_logits]
        final, mean_prob = make_pseudo_label(probs, state.vote)
        main = int(torch.randint(L, (1,), generator=state.streams["main-head"]))
        unsup = unsupervised_head_loss(u_logits[main], final)
        loss = total_loss(sup, unsup, state.effective_lam)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    if state.vote.mode == "learnable":
        _update_phi(state, probs, mean_prob, final, lr)
    state.optim.iter += 1
    return StepReport(
        iteration=state.optim.iter, lr=lr, sup=sup.item(), unsup=unsup.item(), total=loss.item(),
        freeze=mask.as_list() if mode == DF else None, dropout=mode == DT, main_head=main,
        phi=state.vote.phi,
    )


def diversemodel_step(state, labelled, unlabelled):
    """Cross-supervision among three networks: each learns from the other two's argmax."""
    models = state.models
    if len(models) != 3:
        raise ConfigurationError(f"cross-model training needs exactly 3 models, got {len(models)}")
    x, y = labelled
    u = unlabelled
    lr = _apply_lr(state)
    n_lab = x.shape[0]
    xs = torch.cat([x, u])
    outs = [forward_heads(m, xs)[0] for m in models]
    classes = {o.shape[1] for o in outs}
    if len(classes) != 1:
        raise ConfigurationError(f"models disagree on class count: {sorted(classes)}")
    sup = dm_supervised_loss([o[:n_lab] for o in outs], y, state.ignore_index)
    u_logits = [o[n_lab:] for o in outs]
    pseudos = [argmax_lowest(o.detach()) for o in u_logits]
    pairs = dm_pair_losses(u_logits, pseudos)
    unsup = torch.stack(list(pairs.values())).mean()
    loss = total_loss(sup, unsup, state.effective_lam)
    for opt in state.optimizers:
        opt.zero_grad(set_to_none=True)
    loss.backward()
    for opt in state.optimizers:
        opt.step()
    state.optim.iter += 1
    return StepReport(
        iteration=state.optim.iter, lr=lr, sup=sup.item(), unsup=unsup.item(), total=loss.item(),
        pair_terms={f"{m}{n}": v.item() for (m, n), v in pairs.items()},
    )


def baseline_step(state, labelled, unlabelled, kind=BASE):
    """Supervised-only, single-head self-training, or Gaussian input-consistency step."""
    if kind not in (BASE, SHS, INPUT_PERTURB):
        raise ArgumentError(f"unknown baseline kind {kind!r}")
    model = state.models[0]
    opt = state.optimizers[0]
    x, y = labelled
    lr = _apply_lr(state)
    note = None
    zero = torch.zeros(())

    if kind == BASE:
        if unlabelled is not None:
            note = "unlabelled batch ignored"
        sup = supervised_multihead_loss(forward_heads(model, x), y, state.ignore_index)
        unsup = zero
    else:
        if unlabelled is None:
            raise ArgumentError(f"{kind} needs an unlabelled batch")
        n_lab = x.shape[0]
        if kind == SHS:
            outs = forward_heads(model, torch.cat([x, unlabelled]))
            if len(outs) != 1:
                raise ConfigurationError("single-head self-training needs a single-output model")
            sup = supervised_multihead_loss([outs[0][:n_lab]], y, state.ignore_index)
            u_logits = outs[0][n_lab:]
            unsup = unsupervised_head_loss(u_logits, argmax_lowest(u_logits.detach()))
        else:
            with torch.no_grad():
                clean = forward_heads(model, unlabelled)
            target = argmax_lowest(torch.stack([F.softmax(c, 1) for c in clean]).mean(0))
            noisy = gaussian_perturb(unlabelled, state.noise_sd, state.streams["noise"])
            outs = forward_heads(model, torch.cat([x, noisy]))
            sup = supervised_multihead_loss([o[:n_lab] for o in outs], y, state.ignore_index)
            unsup = torch.stack([unsupervised_head_loss(o[n_lab:], target) for o in outs]).mean()
    loss = total_loss(sup, unsup, state.effective_lam)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    state.optim.iter += 1
    return StepReport(
        iteration=state.optim.iter, lr=lr, sup=sup.item(), unsup=float(unsup.item()),
        total=loss.item(), note=note,
    )


@torch.no_grad()
def predict(state, images, batch_size=50):
    """Hard label maps for evaluation.

    Multi-head nets use the same voting as training; three-model ensembles
    average member softmax maps; single-output models take their argmax.
    """
    labels = []
    for m in state.models:
        m.eval()
    try:
        for i in range(0, images.shape[0], batch_size):
            x = images[i:i + batch_size]
            labels.append(predict_batch(state, x))
    finally:
        for m in state.models:
            m.train()
    return torch.cat(labels)


def predict_batch(state, x):
    if len(state.models) > 1:
        probs = [F.softmax(forward_heads(m, x)[0], dim=1) for m in state.models]
        return argmax_lowest(torch.stack(probs).mean(0))
    outs = forward_heads(state.models[0], x)
    if len(outs) == 1:
        return argmax_lowest(outs[0])
    final, _ = make_pseudo_label([F.softmax(o, dim=1) for o in outs], state.vote)
    return final


@torch.no_grad()
def predict_members(state, images, batch_size=50):
    """Per-member hard labels (cross-model runs only)."""
    out = []
    for m in state.models:
        m.eval()
        out.append(torch.cat([argmax_lowest(forward_heads(m, images[i:i + batch_size])[0])
                              for i in range(0, images.shape[0], batch_size)]))
        m.train()
    return out


def is_multihead(model):
    return isinstance(model, MultiHeadNet)
