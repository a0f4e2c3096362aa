"""Estimator-style wrapper: fit on samples, predict sequences.

Follows the get_params/set_params/fit/predict convention so the model
slots into generic tooling; the heavy lifting lives in model/flow/
training and can be used directly when more control is needed.
"""

from __future__ import annotations

import inspect

import torch

from . import flow, tasks
from .model import ModelConfig, VelocityField
from .training import TrainConfig, train


class FlowEstimator:
    """Conditional flow-matching generator for image time series."""

    def __init__(self, task="recon", channels=3, cond_channels=5,
                 stm_channels=2, frames=4, image_size=16, patch=4,
                 d=64, depth=4, heads=4, fusion="adaptive", use_stm=True,
                 use_metadata=True, use_ffn=False, aux_dropout=0.0,
                 forecast_history=0, num_classes=0,
                 missing_rate=0.5, steps=2000, batch_size=8, lr=1e-4,
                 sample_steps=10, solver="dopri5", seed=0):
        args = inspect.signature(type(self).__init__).parameters
        for name in list(args)[1:]:
            setattr(self, name, locals()[name])

    def get_params(self, deep=True):
        args = inspect.signature(type(self).__init__).parameters
        return {name: getattr(self, name) for name in list(args)[1:]}

    def set_params(self, **params):
        valid = self.get_params()
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels, cond_channels=self.cond_channels,
            stm_channels=self.stm_channels, frames=self.frames,
            image_size=self.image_size, patch=self.patch, d=self.d,
            depth=self.depth, heads=self.heads, fusion=self.fusion,
            use_stm=self.use_stm, use_metadata=self.use_metadata,
            use_ffn=self.use_ffn,
            forecast=self.task == "forecast",
            t_his=self.forecast_history if self.task == "forecast" else 0,
            rff_seed=self.seed)

    def _assemble(self, sample, generator):
        if self.task == "recon":
            rate = self.missing_rate
            if isinstance(rate, (tuple, list)):
                lo, hi = rate
                rate = lo + (hi - lo) * torch.rand((), generator=generator).item()
            return tasks.assemble_recon(sample, rate, generator,
                                        use_aux=self.use_stm,
                                        aux_channels=self.stm_channels)
        if self.task == "cloudrm":
            return tasks.assemble_cloudrm(sample, use_aux=self.use_stm,
                                          aux_channels=self.stm_channels)
        if self.task == "scd":
            return tasks.assemble_scd(sample, self.num_classes,
                                      use_aux=self.use_stm,
                                      aux_channels=self.stm_channels)
        if self.task == "forecast":
            _, _, batch = tasks.assemble_forecast(
                sample, self.forecast_history, use_aux=self.use_stm,
                aux_channels=self.stm_channels)
            return batch
        raise ValueError(f"unknown task {self.task!r}")

    def fit(self, samples, run_dir=None):
        if self.task not in tasks.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.model_ = VelocityField(self._model_config())

        def sample_batch(step, generator):
            idx = torch.randint(len(samples), (self.batch_size,),
                                generator=generator).tolist()
            assembled = [self._assemble(samples[i], generator) for i in idx]
            batch = {
                "state": torch.stack([b.state for b in assembled]),
                "condition": torch.stack([b.condition for b in assembled]),
                "doys": torch.tensor([b.doys for b in assembled]),
                "lonlat": torch.tensor([b.lonlat for b in assembled]),
            }
            if all(b.aux is not None for b in assembled):
                aux = torch.stack([b.aux for b in assembled])
                if self.aux_dropout > 0:
                    # occasionally blank the auxiliary stream so the model
                    # keeps a usable fallback when it is missing at inference
                    drop = (torch.rand(len(assembled), generator=generator)
                            < self.aux_dropout)
                    aux[drop] = 0.0
                batch["aux"] = aux
            if self.task == "forecast":
                batch["history_target"] = torch.stack(
                    [samples[i].x_clear[:self.forecast_history] for i in idx])
            return batch

        self.train_result_ = train(
            self.model_, sample_batch,
            TrainConfig(steps=self.steps, batch_size=self.batch_size,
                        lr=self.lr, seed=self.seed, run_dir=run_dir))
        return self

    def predict(self, sample, seed=0):
        """Generate the target sequence for one sample."""
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted")
        gen = torch.Generator().manual_seed(seed)
        batch = self._assemble(sample, gen)
        vf = self.model_
        cfg = vf.cfg
        cond = batch.condition.unsqueeze(0)
        doys = torch.tensor([batch.doys])
        lonlat = torch.tensor([batch.lonlat])
        aux = None if batch.aux is None else batch.aux.unsqueeze(0)
        solver = flow.SolverConfig(method=self.solver, steps=self.sample_steps)

        if self.task == "forecast":
            def f(x_t, t):
                out = vf.forward_forecast(cond, x_t, t, fut_doys=doys,
                                          lonlat=lonlat, aux=aux)
                return out[:, cfg.t_his:]
        else:
            def f(x_t, t):
                return vf(x_t, t, cond, doys=doys, lonlat=lonlat, aux=aux)

        shape = (1, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
        out = flow.sample(f, shape, solver, seed=seed)[0]
        if self.task == "scd":
            return tasks.decode_argmax(out)
        return out
