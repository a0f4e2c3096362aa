"""Flow-matching objective and ODE sampling.

The noise-to-data path is the straight line x(t) = (1-t) x0 + t x1 with
constant velocity x1 - x0; training regresses the network onto that
velocity at uniformly sampled t. Sampling integrates dx/dt = f(x, t)
from t=0 to t=1 with Euler, classic RK4, or Dormand-Prince 5(4).

The Dormand-Prince solver has two modes: a fixed-budget mode that lands
on t=1 in exactly ``steps`` accepted steps (the default sampling setup),
and an adaptive mode driven by rtol/atol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .tensorops import ShapeError


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Convex combination (1 - t) * x0 + t * x1; t scalar or (B,)."""
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("flow time outside [0, 1]")
    if t.dim() > 0:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    return (1.0 - t) * x0 + t * x1


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ShapeError(f"velocity_target: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - x0


def fm_loss(model_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
            x0: torch.Tensor, x1: torch.Tensor,
            generator: torch.Generator) -> torch.Tensor:
    """Mean squared velocity regression error, one t ~ U[0,1] per batch element.

    ``model_fn(x_t, t)`` closes over conditions and metadata.
    """
    if x0.shape != x1.shape:
        raise ShapeError(f"fm_loss: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    b = x0.shape[0]
    t = torch.rand(b, generator=generator, dtype=x0.dtype)
    x_t = interpolate(x0, x1, t)
    pred = model_fn(x_t, t)
    if not torch.isfinite(pred).all():
        raise FloatingPointError("non-finite model output in flow-matching loss")
    return ((pred - velocity_target(x0, x1)) ** 2).mean()


@dataclass
class SolverConfig:
    method: str = "dopri5"         # euler | rk4 | dopri5
    steps: int = 10                # fixed-step count / dopri5 step budget
    rtol: float | None = None      # set both to switch dopri5 to adaptive mode
    atol: float | None = None

    def __post_init__(self):
        if self.method not in ("euler", "rk4", "dopri5"):
            raise ValueError(f"unknown solver {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if (self.rtol is None) != (self.atol is None):
            raise ValueError("rtol and atol must be set together")
        if self.rtol is not None and (self.rtol <= 0 or self.atol <= 0):
            raise ValueError("tolerances must be positive")

    @property
    def adaptive(self) -> bool:
        return self.method == "dopri5" and self.rtol is not None


class SolverDiverged(RuntimeError):
    pass


def _euler(f, x, steps):
    dt = 1.0 / steps
    t = 0.0
    for _ in range(steps):
        x = x + dt * f(x, t)
        t += dt
    return x


def _rk4(f, x, steps):
    dt = 1.0 / steps
    t = 0.0
    for _ in range(steps):
        k1 = f(x, t)
        k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(x + dt * k3, t + dt)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    return x


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
          187 / 2100, 1 / 40)


def _dp_step(f, x, t, dt, k1=None):
    """One Dormand-Prince step; returns (x5, error_estimate, k_last)."""
    ks = [k1 if k1 is not None else f(x, t)]
    for i in range(1, 7):
        xi = x
        for aij, kj in zip(_DP_A[i], ks):
            xi = xi + dt * aij * kj
        ks.append(f(xi, t + _DP_C[i] * dt))
    x5 = x
    err = torch.zeros_like(x)
    for b5, b4, kj in zip(_DP_B5, _DP_B4, ks):
        x5 = x5 + dt * b5 * kj
        err = err + dt * (b5 - b4) * kj
    return x5, err, ks[-1]


def _dopri5_budget(f, x, steps):
    """Dormand-Prince stages on a step schedule that spends exactly the budget.

    Each accepted step covers (1 - t) / steps_left, so integration always
    lands on t = 1 after ``steps`` accepted steps; no rejections.
    """
    t = 0.0
    for i in range(steps):
        dt = (1.0 - t) / (steps - i)
        x, _, _ = _dp_step(f, x, t, dt)
        t += dt
    return x


def _dopri5_adaptive(f, x, rtol, atol, max_steps=1000):
    t = 0.0
    dt = 0.1
    k1 = f(x, t)
    n_steps = 0
    while t < 1.0:
        n_steps += 1
        if n_steps > max_steps:
            raise SolverDiverged(
                f"adaptive solver exceeded {max_steps} steps at t={t:.6f}, dt={dt:.3e}")
        dt = min(dt, 1.0 - t)
        x_new, err, k_last = _dp_step(f, x, t, dt, k1)
        scale = atol + rtol * torch.maximum(x.abs(), x_new.abs())
        err_norm = torch.sqrt(((err / scale) ** 2).mean()).item()
        if err_norm <= 1.0:
            t += dt
            x = x_new
            k1 = k_last  # FSAL
        factor = 0.9 * (max(err_norm, 1e-10)) ** (-1.0 / 5.0)
        dt = dt * min(5.0, max(0.2, factor))
    return x


def integrate(f: Callable[[torch.Tensor, float], torch.Tensor], x0: torch.Tensor,
              solver: SolverConfig) -> torch.Tensor:
    """Integrate dx/dt = f(x, t) from t=0 to t=1."""
    if solver.method == "euler":
        return _euler(f, x0, solver.steps)
    if solver.method == "rk4":
        return _rk4(f, x0, solver.steps)
    if solver.adaptive:
        return _dopri5_adaptive(f, x0, solver.rtol, solver.atol)
    return _dopri5_budget(f, x0, solver.steps)


def sample(model_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
           shape, solver: SolverConfig, seed: int,
           dtype: torch.dtype | None = None) -> torch.Tensor:
    """Draw x0 ~ N(0, I) with the given seed and integrate to x1.

    Deterministic given (model, solver, seed).
    """
    g = torch.Generator()
    g.manual_seed(int(seed))
    x0 = torch.randn(*shape, generator=g,
                     dtype=dtype or torch.get_default_dtype())

    def f(x, t):
        tt = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        with torch.no_grad():
            return model_fn(x, tt)

    return integrate(f, x0, solver)
