import pytest
import torch

from segvote.errors import ConfigurationError, ShapeError
from segvote.members import MEMBER_ARCHS, build_member
from segvote.segmodel import ModelSpec, build_multihead_model, forward_heads, parameter_footprint


def test_forward_shapes(gen):
    net = build_multihead_model(ModelSpec(classes=4, heads=3, bands=5, seed=1))
    outs = forward_heads(net, torch.randn(2, 5, 32, 48, generator=gen))
    assert len(outs) == 3 and all(o.shape == (2, 4, 32, 48) for o in outs)


def test_deterministic_without_dropout(gen):
    net = build_multihead_model(ModelSpec(classes=3, heads=3, seed=1))
    x = torch.randn(1, 3, 32, 32, generator=gen)
    a, b = forward_heads(net, x), forward_heads(net, x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_dropout_rate_zero_matches_off(gen):
    net = build_multihead_model(ModelSpec(classes=3, heads=2, dropout=0.0, seed=1))
    x = torch.randn(1, 3, 32, 32, generator=gen)
    on = forward_heads(net, x, dropout_enabled=True, rng=torch.Generator().manual_seed(0))
    off = forward_heads(net, x)
    assert all(torch.equal(p, q) for p, q in zip(on, off))


def test_dropout_changes_outputs(gen):
    net = build_multihead_model(ModelSpec(classes=3, heads=2, dropout=0.5, seed=1))
    x = torch.randn(1, 3, 32, 32, generator=gen)
    on = forward_heads(net, x, dropout_enabled=True, rng=torch.Generator().manual_seed(0))
    assert not torch.equal(on[0], forward_heads(net, x)[0])


def test_heads_differ_and_build_is_reproducible():
    a = build_multihead_model(ModelSpec(classes=3, heads=3, seed=4))
    b = build_multihead_model(ModelSpec(classes=3, heads=3, seed=4))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.heads[0].conv1.weight, a.heads[1].conv1.weight)


@pytest.mark.parametrize("kw", [dict(heads=0), dict(classes=1), dict(dropout=1.0), dict(bands=0)])
def test_spec_errors(kw):
    args = dict(classes=3)
    args.update(kw)
    with pytest.raises(ConfigurationError):
        build_multihead_model(ModelSpec(**args))


def test_band_mismatch():
    net = build_multihead_model(ModelSpec(classes=3, heads=2, bands=3))
    with pytest.raises(ShapeError):
        forward_heads(net, torch.zeros(1, 4, 16, 16))
    with pytest.raises(ShapeError):
        forward_heads(net, torch.zeros(3, 16, 16))


def test_external_trunk():
    class Tiny(torch.nn.Module):
        in_channels, out_channels = 2, 6

        def __init__(self):
            super().__init__()
            self.conv = torch.nn.Conv2d(2, 6, 3, padding=1)

        def forward(self, x):
            return self.conv(x)

    trunk = Tiny()
    net = build_multihead_model(ModelSpec(classes=3, heads=2, bands=2, trunk=trunk))
    assert net.trunk is trunk
    assert forward_heads(net, torch.zeros(1, 2, 8, 8))[0].shape == (1, 3, 8, 8)


def test_parameter_overhead():
    one = parameter_footprint(build_multihead_model(ModelSpec(classes=3, heads=1)))
    ten = parameter_footprint(build_multihead_model(ModelSpec(classes=3, heads=10)))
    assert ten["total_params"] == ten["trunk_params"] + 10 * ten["per_head_params"]
    assert ten["total_params"] <= 1.2 * one["total_params"]


@pytest.mark.parametrize("arch", sorted(MEMBER_ARCHS))
def test_members(arch, gen):
    net = build_member(arch, 3, 4, seed=0)
    assert net(torch.randn(2, 3, 64, 64, generator=gen)).shape == (2, 4, 64, 64)
    with pytest.raises(ConfigurationError):
        build_member("resnet", 3, 4, 0)
