"""Dense tensor arithmetic with exact gradients and a finite-difference oracle.

Thin, validated layer over torch. Every operation here is differentiable
through torch autograd; ``finite_difference_check`` is an independent
oracle that never touches autograd, so analytic gradients can always be
verified against it.

Default compute dtype is float32; gradient checks should run in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Construct a tensor from external data, rejecting NaN/Inf."""
    t = torch.as_tensor(data, dtype=dtype)
    if not torch.isfinite(t).all():
        raise ValueError("non-finite values rejected at tensor construction")
    return t


def rng(seed: int) -> torch.Generator:
    """Seeded Mersenne-Twister-backed torch generator (bit-reproducible)."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def randn(*shape, seed: int | None = None, generator: torch.Generator | None = None,
          dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    if generator is None:
        generator = rng(0 if seed is None else seed)
    return torch.randn(*shape, generator=generator, dtype=dtype)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        return a + b
    except RuntimeError as e:
        raise ShapeError(f"add: shapes {tuple(a.shape)} vs {tuple(b.shape)}: {e}") from e


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        return a * b
    except RuntimeError as e:
        raise ShapeError(f"multiply: shapes {tuple(a.shape)} vs {tuple(b.shape)}: {e}") from e


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else -1]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, normalized_shape: Sequence[int] | None = None,
               eps: float = 1e-6) -> torch.Tensor:
    if normalized_shape is None:
        normalized_shape = (x.shape[-1],)
    return torch.nn.functional.layer_norm(x, tuple(normalized_shape), eps=eps)


def group_norm(x: torch.Tensor, groups: int = 8, eps: float = 1e-6) -> torch.Tensor:
    """Group normalization without affine parameters.

    ``x`` is (batch, channels, *spatial); statistics are computed per
    sample over each group's channels and all spatial positions.
    """
    c = x.shape[1]
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    return torch.nn.functional.group_norm(x, groups, eps=eps)


def conv2d(x: torch.Tensor, weight: torch.Tensor,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """2D convolution, stride 1, zero 'same' padding (odd kernel)."""
    k = weight.shape[-1]
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} vs weight {weight.shape[1]}")
    return torch.nn.functional.conv2d(x, weight, bias, padding=k // 2)


def conv1d(x: torch.Tensor, weight: torch.Tensor,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """1D convolution, stride 1, zero 'same' padding (odd kernel)."""
    k = weight.shape[-1]
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv1d: input channels {x.shape[1]} vs weight {weight.shape[1]}")
    return torch.nn.functional.conv1d(x, weight, bias, padding=k // 2)


def avg_pool2d(x: torch.Tensor, kernel: int | tuple[int, int]) -> torch.Tensor:
    return torch.nn.functional.avg_pool2d(x, kernel)


def mean(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def variance(x: torch.Tensor, dim=None, keepdim: bool = False,
             unbiased: bool = False) -> torch.Tensor:
    if dim is None:
        return x.var(unbiased=unbiased)
    return x.var(dim=dim, keepdim=keepdim, unbiased=unbiased)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    return x.reshape(tuple(shape))


def transpose(x: torch.Tensor, dim0: int, dim1: int) -> torch.Tensor:
    return x.transpose(dim0, dim1)


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    return torch.cat(list(tensors), dim=dim)


def slice_along(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    return x.narrow(dim, start, stop - start)


def grad(loss: torch.Tensor, params: Sequence[torch.Tensor],
         retain_graph: bool = False) -> list[torch.Tensor]:
    """d(loss)/d(p) for each parameter; loss must be scalar."""
    if loss.numel() != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {tuple(loss.shape)}")
    return list(torch.autograd.grad(loss, list(params), retain_graph=retain_graph))


def finite_difference_check(f: Callable[[torch.Tensor], torch.Tensor],
                            p: torch.Tensor, h: float = 1e-4) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` maps a tensor to a scalar. The numeric side evaluates f at
    p +/- h*e_i without any autograd involvement.
    """
    p = p.detach().to(CHECK_DTYPE).requires_grad_(True)
    loss = f(p)
    if loss.numel() != 1:
        raise ShapeError("finite_difference_check: f must return a scalar")
    (analytic,) = torch.autograd.grad(loss, (p,))
    analytic = analytic.reshape(-1)

    flat = p.detach().clone().reshape(-1)
    worst = 0.0
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        with torch.no_grad():
            fp = f(flat.reshape(p.shape)).item()
        flat[i] = orig - h
        with torch.no_grad():
            fm = f(flat.reshape(p.shape)).item()
        flat[i] = orig
        if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
            raise FloatingPointError(
                f"finite_difference_check: non-finite f value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i].item()
        rel = abs(a - numeric) / (abs(a) + 1e-8)
        worst = max(worst, rel)
    return worst
