import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pgst.errors import InvalidInputError, ShapeError
from pgst.featstats import (
    EPS_STYLE,
    ChannelStyle,
    batched_channel_stats,
    channel_stats,
    pgst_apply,
)


def two_pass_stats(f: torch.Tensor):
    """Independent oracle: explicit two-pass mean/variance per channel."""
    c = f.shape[0]
    mu = torch.empty(c, dtype=torch.float64)
    sigma = torch.empty(c, dtype=torch.float64)
    for i in range(c):
        vals = f[i].flatten().double()
        m = vals.sum() / vals.numel()
        var = ((vals - m) ** 2).sum() / vals.numel()
        mu[i] = m
        sigma[i] = max(math.sqrt(float(var)), EPS_STYLE)
    return mu, sigma


def test_known_map():
    f = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]])
    s = channel_stats(f)
    assert s.mu.item() == pytest.approx(4.0, abs=1e-7)
    assert s.sigma.item() == pytest.approx(math.sqrt(5.0), abs=1e-6)


def test_constant_map_clamps_sigma():
    f = torch.full((2, 3, 5), 2.5)
    s = channel_stats(f)
    assert torch.allclose(s.mu, torch.full((2,), 2.5))
    assert torch.all(s.sigma == EPS_STYLE)


def test_matches_two_pass_oracle():
    g = torch.Generator().manual_seed(0)
    f = torch.randn(8, 16, 16, generator=g)
    s = channel_stats(f)
    mu, sigma = two_pass_stats(f)
    assert torch.allclose(s.mu.double(), mu, atol=1e-9)
    assert torch.allclose(s.sigma.double(), sigma, atol=1e-9)


def test_nonfinite_rejected():
    f = torch.ones(1, 2, 2)
    f[0, 0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        channel_stats(f)


def test_wrong_rank_rejected():
    with pytest.raises(ShapeError):
        channel_stats(torch.ones(2, 2))


def test_identity_style():
    g = torch.Generator().manual_seed(1)
    f = torch.randn(4, 8, 8, generator=g)
    out = pgst_apply(f, channel_stats(f))
    assert torch.allclose(out, f, atol=1e-6)


def test_known_normalization():
    f = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]])
    style = ChannelStyle(torch.zeros(1), torch.ones(1))
    out = pgst_apply(f, style)
    r5 = math.sqrt(5.0)
    want = torch.tensor([[[-3 / r5, -1 / r5], [1 / r5, 3 / r5]]])
    assert torch.allclose(out, want, atol=1e-6)


def test_degenerate_sigma_collapses_to_mu():
    g = torch.Generator().manual_seed(2)
    f = torch.randn(3, 6, 6, generator=g)
    style = ChannelStyle(torch.full((3,), 9.0), torch.full((3,), EPS_STYLE))
    out = pgst_apply(f, style)
    assert torch.allclose(out, torch.full_like(out, 9.0), atol=1e-3)


def test_channel_mismatch_rejected():
    f = torch.randn(3, 4, 4)
    with pytest.raises(ShapeError):
        pgst_apply(f, ChannelStyle(torch.zeros(2), torch.ones(2)))


def test_round_trip():
    g = torch.Generator().manual_seed(3)
    f = torch.randn(4, 10, 10, generator=g)
    src = channel_stats(f)
    style = ChannelStyle(torch.randn(4, generator=g), torch.rand(4, generator=g) + 0.5)
    back = pgst_apply(pgst_apply(f, style), src)
    assert torch.allclose(back, f, atol=1e-4)


def test_idempotent_restyle():
    g = torch.Generator().manual_seed(4)
    f = torch.randn(4, 10, 10, generator=g)
    style = ChannelStyle(torch.randn(4, generator=g), torch.rand(4, generator=g) + 0.5)
    once = pgst_apply(f, style)
    twice = pgst_apply(once, style)
    assert torch.allclose(once, twice, atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(1, 6),
    h=st.integers(2, 9),
    w=st.integers(2, 9),
    seed=st.integers(0, 10_000),
)
def test_postcondition_property(c, h, w, seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(c, h, w, generator=g, dtype=torch.float64)
    f = f * (torch.rand(c, 1, 1, generator=g, dtype=torch.float64) + 0.1)
    if float(f.view(c, -1).std(dim=1, correction=0).min()) < 1e-3:
        return
    style = ChannelStyle(
        torch.randn(c, generator=g, dtype=torch.float64) * 3,
        torch.rand(c, generator=g, dtype=torch.float64) * 2 + 1e-3,
    )
    got = channel_stats(pgst_apply(f, style))
    assert torch.allclose(got.mu, style.mu, atol=1e-5)
    assert torch.allclose(got.sigma, style.sigma, rtol=1e-4)


def test_gradients_flow_and_match_fd():
    g = torch.Generator().manual_seed(5)
    f = torch.randn(2, 5, 5, generator=g, dtype=torch.float64)
    mu = torch.randn(2, dtype=torch.float64, requires_grad=True)
    sigma = (torch.rand(2, dtype=torch.float64) + 0.5).requires_grad_(True)

    def scalar(m, s):
        return (pgst_apply(f, ChannelStyle(m, s)) ** 2).sum()

    scalar(mu, sigma).backward()
    h = 1e-3
    for p, grad in [(mu, mu.grad), (sigma, sigma.grad)]:
        for i in range(2):
            e = torch.zeros_like(p)
            e[i] = h
            num = (
                float(scalar((p + e).detach(), sigma.detach()) if p is mu
                      else scalar(mu.detach(), (p + e).detach()))
                - float(scalar((p - e).detach(), sigma.detach()) if p is mu
                        else scalar(mu.detach(), (p - e).detach()))
            ) / (2 * h)
            rel = abs(float(grad[i]) - num) / max(abs(num), 1e-8)
            assert rel < 1e-3


def test_batched_stats_match_single():
    g = torch.Generator().manual_seed(6)
    batch = torch.randn(4, 3, 7, 7, generator=g)
    mu, sigma = batched_channel_stats(batch)
    assert mu.shape == (4, 3) and sigma.shape == (4, 3)
    for i in range(4):
        s = channel_stats(batch[i])
        assert torch.allclose(mu[i], s.mu, atol=1e-6)
        assert torch.allclose(sigma[i], s.sigma, atol=1e-6)


def test_style_validation():
    with pytest.raises(InvalidInputError):
        ChannelStyle(torch.zeros(2), torch.tensor([1.0, 0.0])).validate()
    with pytest.raises(ShapeError):
        ChannelStyle(torch.zeros(2), torch.ones(3))


def test_style_json_round_trip():
    s = ChannelStyle(torch.tensor([1.0, -2.0]), torch.tensor([0.5, 3.0]))
    s2 = ChannelStyle.from_json(s.to_json())
    assert torch.equal(s.mu, s2.mu) and torch.equal(s.sigma, s2.sigma)
