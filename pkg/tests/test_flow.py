import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stflow import flow


def _rand(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


class TestPath:
    def test_endpoints(self):
        x0, x1 = _rand(2, 3, seed=1), _rand(2, 3, seed=2)
        assert torch.equal(flow.interpolate(x0, x1, 0.0), x0)
        assert torch.equal(flow.interpolate(x0, x1, 1.0), x1)

    def test_midpoint(self):
        x0, x1 = _rand(2, 3, seed=3), _rand(2, 3, seed=4)
        assert torch.allclose(flow.interpolate(x0, x1, 0.5), (x0 + x1) / 2)

    def test_per_element_t(self):
        x0, x1 = _rand(2, 3, seed=5), _rand(2, 3, seed=6)
        out = flow.interpolate(x0, x1, torch.tensor([0.0, 1.0]))
        assert torch.equal(out[0], x0[0])
        assert torch.equal(out[1], x1[1])

    def test_t_range_checked(self):
        x = _rand(1, 2, seed=7)
        with pytest.raises(ValueError):
            flow.interpolate(x, x, 1.5)
        with pytest.raises(ValueError):
            flow.interpolate(x, x, torch.tensor([-0.1]))

    @given(st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_velocity_is_path_derivative(self, seed):
        g = torch.Generator().manual_seed(seed)
        x0 = torch.randn(3, 4, generator=g, dtype=torch.float64)
        x1 = torch.randn(3, 4, generator=g, dtype=torch.float64)
        eps = 1e-6
        deriv = (flow.interpolate(x0, x1, 0.5 + eps)
                 - flow.interpolate(x0, x1, 0.5 - eps)) / (2 * eps)
        assert torch.allclose(deriv, flow.velocity_target(x0, x1), atol=1e-8)


class TestLoss:
    def test_perfect_model_zero_loss(self):
        x0, x1 = _rand(4, 3, seed=8), _rand(4, 3, seed=9)
        loss = flow.fm_loss(lambda x_t, t: x1 - x0, x0, x1,
                            torch.Generator().manual_seed(0))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_loss_deterministic_per_seed(self):
        x0, x1 = _rand(4, 3, seed=10), _rand(4, 3, seed=11)
        model = lambda x_t, t: torch.zeros_like(x_t)
        a = flow.fm_loss(model, x0, x1, torch.Generator().manual_seed(5))
        b = flow.fm_loss(model, x0, x1, torch.Generator().manual_seed(5))
        assert a.item() == b.item()

    def test_nonfinite_prediction_raises(self):
        x = _rand(2, 2, seed=12)
        with pytest.raises(FloatingPointError):
            flow.fm_loss(lambda x_t, t: x_t * float("nan"), x, x,
                         torch.Generator().manual_seed(0))


class TestSolvers:
    def test_euler_exact_on_constant_velocity(self):
        v = _rand(2, 3, seed=13)
        x0 = _rand(2, 3, seed=14)
        out = flow.integrate(lambda x, t: v, x0,
                             flow.SolverConfig(method="euler", steps=1))
        assert torch.equal(out, x0 + v)

    def _order(self, method, steps_list):
        # dx/dt = -x, x(0)=1, exact x(1) = e^-1
        errs = []
        for steps in steps_list:
            out = flow.integrate(lambda x, t: -x,
                                 torch.ones(1, dtype=torch.float64),
                                 flow.SolverConfig(method=method, steps=steps))
            errs.append(abs(out.item() - math.exp(-1.0)))
        orders = [math.log(errs[i] / errs[i + 1])
                  / math.log(steps_list[i + 1] / steps_list[i])
                  for i in range(len(errs) - 1)]
        return float(np.mean(orders))

    def test_euler_first_order(self):
        assert self._order("euler", [32, 64, 128, 256]) == pytest.approx(1.0, abs=0.1)

    def test_rk4_fourth_order(self):
        assert self._order("rk4", [4, 8, 16]) == pytest.approx(4.0, abs=0.3)

    def test_dopri5_budget_lands_on_one(self):
        seen = []
        def f(x, t):
            seen.append(t)
            return -x
        out = flow.integrate(f, torch.ones(1, dtype=torch.float64),
                             flow.SolverConfig(method="dopri5", steps=10))
        assert abs(out.item() - math.exp(-1.0)) < 1e-8
        assert max(seen) <= 1.0 + 1e-12

    def test_dopri5_adaptive_tolerance(self):
        out = flow.integrate(lambda x, t: -x,
                             torch.ones(1, dtype=torch.float64),
                             flow.SolverConfig(method="dopri5", steps=10,
                                               rtol=1e-6, atol=1e-9))
        assert abs(out.item() - math.exp(-1.0)) < 1e-5

    def test_dopri5_adaptive_divergence_aborts(self):
        with pytest.raises(flow.SolverDiverged):
            flow.integrate(lambda x, t: x * 1e8,
                           torch.ones(1, dtype=torch.float64),
                           flow.SolverConfig(method="dopri5", steps=10,
                                             rtol=1e-12, atol=1e-14))

    def test_solver_config_validation(self):
        with pytest.raises(ValueError):
            flow.SolverConfig(method="heun")
        with pytest.raises(ValueError):
            flow.SolverConfig(steps=0)
        with pytest.raises(ValueError):
            flow.SolverConfig(rtol=1e-6)       # atol missing
        with pytest.raises(ValueError):
            flow.SolverConfig(rtol=-1.0, atol=1e-9)


class TestSampling:
    def test_sample_deterministic(self):
        model = lambda x, t: -0.5 * x
        a = flow.sample(model, (2, 3), flow.SolverConfig(), seed=42)
        b = flow.sample(model, (2, 3), flow.SolverConfig(), seed=42)
        c = flow.sample(model, (2, 3), flow.SolverConfig(), seed=43)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_sample_integrates_known_solution(self):
        # f = -x => x(1) = x0 * e^-1
        model = lambda x, t: -x
        out = flow.sample(model, (4,), flow.SolverConfig(steps=20), seed=0,
                          dtype=torch.float64)
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(4, generator=g, dtype=torch.float64)
        assert torch.allclose(out, x0 * math.exp(-1.0), atol=1e-8)
