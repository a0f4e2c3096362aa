import pytest
import torch

from stflow import conditioning as C


def _rand(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


def test_injector_identity_at_init():
    for kind, shape in (("spatial", (2, 8, 4, 4)), ("temporal", (2, 8, 5))):
        inj = C.ConditionInjector(8, kind)
        h = _rand(*shape, seed=1)
        q = _rand(*shape, seed=2)
        assert torch.equal(inj(h, q), h)


def test_injector_formula_matches_manual():
    inj = C.ConditionInjector(8, "spatial")
    with torch.no_grad():
        for p in inj.parameters():
            p.uniform_(-0.3, 0.3, generator=torch.Generator().manual_seed(3))
    h = _rand(2, 8, 4, 4, seed=4)
    q = _rand(2, 8, 4, 4, seed=5)
    gamma, beta = inj.conv(q).chunk(2, dim=1)
    manual = gamma * torch.nn.functional.group_norm(h, C.GN_GROUPS, eps=1e-6) + beta + h
    assert torch.allclose(inj(h, q), manual, atol=1e-6)


def test_injector_condition_actually_matters_after_init():
    inj = C.ConditionInjector(8, "temporal")
    with torch.no_grad():
        inj.conv.weight.uniform_(-0.2, 0.2,
                                 generator=torch.Generator().manual_seed(6))
    h = _rand(1, 8, 5, seed=7)
    assert not torch.allclose(inj(h, _rand(1, 8, 5, seed=8)),
                              inj(h, _rand(1, 8, 5, seed=9)))


def test_injector_shape_mismatch():
    inj = C.ConditionInjector(8, "spatial")
    with pytest.raises(Exception):
        inj(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 2, 2))


def test_injector_rejects_bad_width():
    with pytest.raises(ValueError):
        C.ConditionInjector(6, "spatial")
    with pytest.raises(ValueError):
        C.ConditionInjector(8, "diagonal")


def test_modulation_gate_zero_at_init():
    mod = C.FlowTimeModulation(8)
    z = _rand(3, 1, 8, seed=10)
    feat = _rand(3, 5, 8, seed=11)
    out, gate = mod.modulate(feat, z)
    assert torch.equal(gate, torch.zeros_like(gate))


def test_modulation_matches_chunks():
    mod = C.FlowTimeModulation(8)
    with torch.no_grad():
        mod.proj.weight.uniform_(-0.3, 0.3,
                                 generator=torch.Generator().manual_seed(12))
    z = _rand(2, 1, 8, seed=13)
    feat = _rand(2, 4, 8, seed=14)
    gamma, beta, alpha = mod.params(z)
    out, gate = mod.modulate(feat, z)
    assert torch.allclose(out, gamma * feat + beta, atol=1e-6)
    assert torch.equal(gate, alpha)


def test_modulation_width_check():
    mod = C.FlowTimeModulation(8)
    with pytest.raises(Exception):
        mod.params(torch.zeros(1, 1, 6))
