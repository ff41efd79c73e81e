import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_mean_label, brute_force_vote
from segvote.errors import ArgumentError, ConfigurationError
from segvote.voting import (
    VoteWeight,
    argmax_lowest,
    make_pseudo_label,
    max_vote,
    mean_vote,
    phi_surrogate_loss,
    vote_tally,
)


def one_pixel(*scores):
    return [torch.tensor(s, dtype=torch.float64).view(1, -1, 1, 1) for s in scores]


def labels(*vals):
    return [torch.tensor(v).view(1, 1, 1) for v in vals]


def test_mean_vote_hand_case():
    mean_prob, lab = mean_vote(one_pixel([0.9, 0.1], [0.2, 0.8]))
    assert torch.allclose(mean_prob.flatten(), torch.tensor([0.55, 0.45], dtype=torch.float64))
    assert lab.item() == 0


def test_mean_vote_single_map_is_its_argmax(gen):
    p = torch.rand(2, 4, 5, 5, generator=gen)
    _, lab = mean_vote([p])
    assert torch.equal(lab, argmax_lowest(p))


def test_mean_vote_errors():
    with pytest.raises(ArgumentError):
        mean_vote([])
    with pytest.raises(ArgumentError):
        mean_vote([torch.rand(1, 2, 3, 3), torch.rand(1, 2, 4, 4)])


def test_argmax_ties_go_low():
    s = torch.tensor([0.3, 0.7, 0.7, 0.1]).view(1, 4, 1, 1)
    assert argmax_lowest(s).item() == 1


@pytest.mark.parametrize("phi, expected", [(1.5, 0), (0.5, 1)])
def test_max_vote_hand_cases(phi, expected):
    ind = labels(0, 1, 1)
    (mean,) = labels(0)
    tally = vote_tally(ind, mean, phi, 2).flatten().tolist()
    assert tally == [1 + phi, 2.0]
    assert max_vote(ind, mean, VoteWeight(phi), classes=2).item() == expected


def test_phi_equal_l_mean_outvotes_majority():
    ind = labels(0, 0, 0, 1)
    (mean,) = labels(1)
    assert vote_tally(ind, mean, 4.0, 2).flatten().tolist() == [3.0, 5.0]
    assert max_vote(ind, mean, VoteWeight(4.0), classes=2).item() == 1


def test_tie_resolves_to_mean_class():
    ind = labels(0, 1)
    (mean,) = labels(1)
    # tallies {0: 1, 1: 1 + 0} with phi = 0 -> tie; mean class wins
    assert max_vote(ind, mean, VoteWeight(0.0), classes=2).item() == 1


def test_tie_without_mean_goes_lowest():
    ind = labels(2, 1, 2, 1)
    (mean,) = labels(0)
    assert max_vote(ind, mean, VoteWeight(1.0), classes=3).item() == 1


def test_ignore_rejected():
    ind = labels(0, 255)
    (mean,) = labels(0)
    with pytest.raises(ArgumentError):
        max_vote(ind, mean, VoteWeight(1.0), classes=3)


def test_vote_weight_guards():
    with pytest.raises(ConfigurationError):
        VoteWeight(-1.0)
    with pytest.raises(ConfigurationError):
        VoteWeight(1.0, "sometimes")


def test_make_pseudo_label_needs_two_maps():
    with pytest.raises(ArgumentError):
        make_pseudo_label([torch.rand(1, 2, 2, 2)], VoteWeight())


def test_unanimous_heads(gen):
    p = torch.softmax(torch.randn(2, 3, 6, 6, generator=gen), 1)
    final, _ = make_pseudo_label([p, p.clone(), p.clone()], VoteWeight())
    assert torch.equal(final, argmax_lowest(p))


def test_pseudo_label_carries_no_gradient(gen):
    logits = torch.randn(1, 3, 4, 4, generator=gen, requires_grad=True)
    final, mean_prob = make_pseudo_label([logits.softmax(1), (2 * logits).softmax(1)], VoteWeight())
    assert not final.requires_grad and not mean_prob.requires_grad


def random_instance(gen, L, C, size=8, batch=1):
    return [torch.softmax(torch.randn(batch, C, size, size, generator=gen) * 2, 1) for _ in range(L)]


@settings(max_examples=100, deadline=None)
@given(L=st.integers(2, 4), C=st.integers(2, 4), phi=st.floats(0, 6), seed=st.integers(0, 2**31))
def test_oracle_equivalence(L, C, phi, seed):
    g = torch.Generator().manual_seed(seed)
    probs = random_instance(g, L, C, size=5)
    final, _ = make_pseudo_label(probs, VoteWeight(phi))
    mean_label = brute_force_mean_label(probs)
    individual = [argmax_lowest(p) for p in probs]
    assert torch.equal(final, brute_force_vote(individual, mean_label, phi, C))


@settings(max_examples=50, deadline=None)
@given(L=st.integers(2, 4), C=st.integers(2, 4), seed=st.integers(0, 2**31), phi=st.floats(0, 5))
def test_head_permutation_invariance(L, C, seed, phi):
    g = torch.Generator().manual_seed(seed)
    probs = random_instance(g, L, C)
    perm = torch.randperm(L, generator=g).tolist()
    a, _ = make_pseudo_label(probs, VoteWeight(phi))
    b, _ = make_pseudo_label([probs[i] for i in perm], VoteWeight(phi))
    assert torch.equal(a, b)


def test_scale_invariance_of_labels(gen):
    probs = random_instance(gen, 3, 4)
    a, _ = make_pseudo_label(probs, VoteWeight(1.0))
    b, _ = make_pseudo_label([p * 4.0 for p in probs], VoteWeight(1.0))
    assert torch.equal(a, b)


@settings(max_examples=50, deadline=None)
@given(L=st.integers(1, 5), C=st.integers(2, 5), phi=st.floats(0, 10), seed=st.integers(0, 2**31))
def test_tally_conservation(L, C, phi, seed):
    g = torch.Generator().manual_seed(seed)
    ind = [torch.randint(C, (2, 4, 4), generator=g) for _ in range(L)]
    mean = torch.randint(C, (2, 4, 4), generator=g)
    tally = vote_tally(ind, mean, phi, C)
    assert torch.allclose(tally.sum(1), torch.full((2, 4, 4), L + phi, dtype=torch.float64), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(L=st.integers(2, 5), C=st.integers(2, 5), seed=st.integers(0, 2**31), frac=st.floats(0, 0.999))
def test_unanimity_dominates_when_phi_below_l(L, C, seed, frac):
    g = torch.Generator().manual_seed(seed)
    k = torch.randint(C, (1, 3, 3), generator=g)
    mean = torch.randint(C, (1, 3, 3), generator=g)
    out = max_vote([k.clone() for _ in range(L)], mean, VoteWeight(frac * L), C)
    assert torch.equal(out, k)


def test_unanimity_at_phi_equal_l_is_a_tie_won_by_mean():
    ind = labels(0, 0)
    (mean,) = labels(1)
    assert max_vote(ind, mean, VoteWeight(2.0), classes=2).item() == 1


def test_phi_surrogate_has_gradient_only_in_phi(gen):
    probs = random_instance(gen, 3, 3)
    final, mean_prob = make_pseudo_label(probs, VoteWeight())
    phi = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    loss = phi_surrogate_loss(phi, [p.double() for p in probs], mean_prob.double(), final)
    loss.backward()
    assert torch.isfinite(phi.grad)
