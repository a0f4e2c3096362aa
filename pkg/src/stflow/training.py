"""Optimizer and training loop for the velocity field.

AdamW is written out explicitly so non-finite gradients can skip the
update (counted, never applied) instead of poisoning the moments.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import flow, model as model_mod

LOSS_EMA_DECAY = 0.99


class AdamW:
    """Decoupled weight decay Adam. lr constant; skips non-finite grads."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.skipped = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads) -> bool:
        """Apply one update; returns False (and counts) on non-finite grads."""
        if any(g is not None and not torch.isfinite(g).all() for g in grads):
            self.skipped += 1
            return False
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            p.mul_(1 - self.lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps),
                       value=-self.lr)
        return True

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"counters": torch.tensor([self.step_count, self.skipped],
                                        dtype=torch.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.clone()
            out[f"v.{i}"] = v.clone()
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        counters = tensors["counters"]
        self.step_count = int(counters[0].item())
        self.skipped = int(counters[1].item())
        self.m = [tensors[f"m.{i}"].clone() for i in range(len(self.params))]
        self.v = [tensors[f"v.{i}"].clone() for i in range(len(self.params))]


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0      # 0 disables periodic checkpoints
    run_dir: str | None = None


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    ema_losses: list[float] = field(default_factory=list)
    steps_skipped: int = 0
    seconds: float = 0.0

    @property
    def initial_ema(self) -> float:
        return self.ema_losses[0]

    @property
    def final_ema(self) -> float:
        return self.ema_losses[-1]


def _model_call(vf, batch, x_t, t):
    cond = batch["condition"]
    if vf.cfg.forecast:
        return vf.forward_forecast(cond, x_t, t,
                                   fut_doys=batch.get("doys"),
                                   lonlat=batch.get("lonlat"),
                                   aux=batch.get("aux"))
    return vf(x_t, t, cond, doys=batch.get("doys"),
              lonlat=batch.get("lonlat"), aux=batch.get("aux"))


def train(vf: model_mod.VelocityField, sample_batch, config: TrainConfig
          ) -> TrainResult:
    """Flow-matching training loop.

    ``sample_batch(step, generator)`` returns a dict with "state"
    (B, T, C, H, W), "condition", and optional "doys"/"lonlat"/"aux"
    batch tensors. Deterministic for a fixed seed.
    """
    gen = torch.Generator().manual_seed(config.seed)
    opt = AdamW(list(vf.parameters()), lr=config.lr,
                weight_decay=config.weight_decay)
    run_dir = Path(config.run_dir) if config.run_dir else None
    writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        loss_fh = open(run_dir / "losses.csv", "w", newline="")
        writer = csv.writer(loss_fh)
        writer.writerow(["step", "loss", "loss_ema"])

    result = TrainResult()
    ema = None
    start = time.monotonic()
    for step in range(config.steps):
        batch = sample_batch(step, gen)
        x1 = batch["state"]
        x0 = torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
        t = torch.rand(x1.shape[0], generator=gen, dtype=x1.dtype)
        x_t = flow.interpolate(x0, x1, t)
        pred = _model_call(vf, batch, x_t, t)
        if not torch.isfinite(pred).all():
            raise FloatingPointError("non-finite velocity prediction")
        target = flow.velocity_target(x0, x1)
        if vf.cfg.forecast:
            # the decoder also emits the history frames; supervise those
            # directly against the clear history so the joint stream stays
            # grounded, while the future frames keep the velocity target
            target = torch.cat([batch["history_target"], target], dim=1)
        loss = ((pred - target) ** 2).mean()

        grads = torch.autograd.grad(loss, opt.params, allow_unused=True)
        opt.step(grads)

        lval = float(loss.detach())
        ema = lval if ema is None else LOSS_EMA_DECAY * ema + (1 - LOSS_EMA_DECAY) * lval
        result.losses.append(lval)
        result.ema_losses.append(ema)
        if writer is not None and (step % config.log_every == 0
                                   or step == config.steps - 1):
            writer.writerow([step, f"{lval:.6f}", f"{ema:.6f}"])
        if (config.checkpoint_every and run_dir is not None
                and (step + 1) % config.checkpoint_every == 0):
            model_mod.save_checkpoint(run_dir / f"step{step + 1:06d}.ckpt",
                                      vf, step=step + 1, seed=config.seed)

    result.steps_skipped = opt.skipped
    result.seconds = time.monotonic() - start
    if run_dir is not None:
        loss_fh.close()
        model_mod.save_checkpoint(run_dir / "final.ckpt", vf,
                                  step=config.steps, seed=config.seed)
    return result


def make_batch_fn(batches: list[dict], *, forecast: bool = False):
    """Cycle deterministically over pre-assembled batches."""
    def sample_batch(step, generator):
        return batches[step % len(batches)]
    return sample_batch


def smoothed(values: list[float], window: int = 50) -> list[float]:
    """Trailing moving average used for loss-trend checks."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def run_ablation_grid(build_and_train, variants: list[dict],
                      out_csv: str | None = None) -> list[dict]:
    """Train one model per variant dict and collect scalar metrics.

    ``build_and_train(variant)`` returns a dict of metric name to value;
    the variant keys are merged into each row.
    """
    if not variants:
        import warnings
        warnings.warn("ablation grid is empty; nothing to run", stacklevel=2)
        return []
    rows = []
    for variant in variants:
        metrics = build_and_train(variant)
        rows.append({**variant, **metrics})
    if out_csv:
        keys = sorted({k for r in rows for k in r})
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    return rows
