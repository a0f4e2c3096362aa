import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stflow import attention as A


def test_manhattan_spatial_hand_example():
    m = A.manhattan_bias_spatial(2, 2)
    expected = -torch.tensor([[0.0, 1, 1, 2],
                              [1, 0, 2, 1],
                              [1, 2, 0, 1],
                              [2, 1, 1, 0]])
    assert torch.equal(m, expected)


def test_manhattan_temporal_hand_example():
    m = A.manhattan_bias_temporal(3)
    expected = -torch.tensor([[0.0, 1, 2], [1, 0, 1], [2, 1, 0]])
    assert torch.equal(m, expected)


@given(st.integers(1, 5), st.integers(1, 5))
@settings(max_examples=20, deadline=None)
def test_manhattan_properties(nh, nw):
    m = A.manhattan_bias_spatial(nh, nw)
    assert torch.equal(m, m.T)                       # symmetric
    assert torch.equal(torch.diag(m), torch.zeros(nh * nw))
    assert (m <= 0).all()


def test_downsample_aux_averages_patches():
    aux = torch.arange(16, dtype=torch.float32).reshape(1, 1, 1, 4, 4)
    down = A.downsample_aux(aux, (2, 2))
    assert down.shape == (1, 1, 1, 2, 2)
    assert down[0, 0, 0, 0, 0].item() == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_aux_bias_spatial_oracle():
    g = torch.Generator().manual_seed(0)
    q = torch.randn(2, 3, 2, 2, 2, generator=g)   # (B, T, C, nh, nw)
    m = A.aux_bias_spatial(q)
    assert m.shape == (2, 3, 4, 4)
    flat = q.reshape(2, 3, 2, 4)
    for i in range(4):
        for j in range(4):
            expected = -(flat[1, 2, :, i] - flat[1, 2, :, j]).abs().mean()
            assert m[1, 2, i, j].item() == pytest.approx(expected.item(), abs=1e-6)
    assert torch.equal(torch.diagonal(m, dim1=-2, dim2=-1),
                       torch.zeros(2, 3, 4))


def test_aux_bias_temporal_oracle():
    g = torch.Generator().manual_seed(1)
    q = torch.randn(1, 3, 2, 2, 2, generator=g)
    m = A.aux_bias_temporal(q)
    assert m.shape == (1, 4, 3, 3)
    flat = q.reshape(1, 3, 2, 4)
    for a in range(3):
        for b in range(3):
            expected = -(flat[0, a, :, 2] - flat[0, b, :, 2]).abs().mean()
            assert m[0, 2, a, b].item() == pytest.approx(expected.item(), abs=1e-6)


def test_aux_bias_rejects_nonfinite():
    q = torch.zeros(1, 1, 1, 2, 2)
    q[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        A.aux_bias_spatial(q)


def test_attention_matches_unbiased_oracle():
    g = torch.Generator().manual_seed(2)
    att = A.BiasedSelfAttention(8, 2)
    with torch.no_grad():
        for p in att.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.3)
    x = torch.randn(1, 5, 8, generator=g)
    out = att(x, None)

    q, k, v = att.qkv(x).chunk(3, dim=-1)
    heads = []
    for h in range(2):
        sl = slice(h * 4, (h + 1) * 4)
        logits = q[0, :, sl] @ k[0, :, sl].T / math.sqrt(4)
        heads.append(torch.softmax(logits, dim=-1) @ v[0, :, sl])
    manual = att.out(torch.cat(heads, dim=-1))
    assert torch.allclose(out[0], manual, atol=1e-5)


def test_bias_shifts_logits_not_values():
    g = torch.Generator().manual_seed(3)
    att = A.BiasedSelfAttention(8, 2)
    x = torch.randn(2, 4, 8, generator=g)
    bias = torch.full((1, 4, 4), 3.14)
    # constant bias is absorbed by softmax normalization
    assert torch.allclose(att(x, bias), att(x, None), atol=1e-5)
    varying = torch.randn(1, 4, 4, generator=g)
    assert not torch.allclose(att(x, varying), att(x, None), atol=1e-4)


def test_bias_broadcast_per_batch():
    g = torch.Generator().manual_seed(4)
    att = A.BiasedSelfAttention(8, 2)
    x = torch.randn(2, 4, 8, generator=g)
    bias = torch.randn(2, 4, 4, generator=g)
    out = att(x, bias)
    single = att(x[1:2], bias[1:2])
    assert torch.allclose(out[1:2], single, atol=1e-6)


def test_bias_mixer_zero_at_init_and_mixing():
    mix = A.SpatioTemporalBias()
    m_pos = A.manhattan_bias_temporal(4)
    m_aux = torch.randn(1, 4, 4, generator=torch.Generator().manual_seed(5))
    assert torch.equal(mix(m_pos, m_aux), torch.zeros(1, 4, 4))
    with torch.no_grad():
        mix.w_pos.fill_(2.0)
        mix.w_aux.fill_(-0.5)
    assert torch.allclose(mix(m_pos, m_aux), 2.0 * m_pos - 0.5 * m_aux)
    assert torch.allclose(mix(m_pos, None), 2.0 * m_pos)


def test_cross_attention_zero_init_identity_residual():
    x = torch.randn(1, 3, 8, generator=torch.Generator().manual_seed(6))
    cond = torch.randn(1, 5, 8, generator=torch.Generator().manual_seed(7))
    xa = A.CrossAttention(8, 2)
    assert torch.equal(xa(x, cond), torch.zeros_like(x))
