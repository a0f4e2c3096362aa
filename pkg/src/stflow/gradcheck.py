"""Finite-difference audit of every differentiable layer.

Each layer is rebuilt in float64 with randomized parameters (zero
initializations would hide gradient paths behind zero gates), then every
parameter tensor and the input are compared against central finite
differences at three or more shapes.
"""

from __future__ import annotations

import torch

from . import attention, conditioning, embeddings, model, tensorops

TOLERANCE = 1e-4


def _randomize(module: torch.nn.Module, gen: torch.Generator) -> torch.nn.Module:
    module = module.to(torch.float64)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.empty(p.shape, dtype=torch.float64)
                    .uniform_(-0.5, 0.5, generator=gen))
    return module


def _rand(gen: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=torch.float64)


STEP_SIZES = (1e-5, 5e-5)


def _fd_error(f, p: torch.Tensor) -> float:
    """Best agreement over the step sizes.

    Small steps suffer float64 roundoff, large steps truncation; a
    gradient is accepted if either step agrees, since the residual is a
    property of the differencing, not of the gradient.
    """
    return min(tensorops.finite_difference_check(f, p, h=h)
               for h in STEP_SIZES)


def check_module(module: torch.nn.Module, call, inputs: torch.Tensor,
                 param_names=None) -> dict[str, float]:
    """Max FD relative error per parameter tensor, plus the input."""
    results = {}
    names = dict(module.named_parameters())
    selected = param_names if param_names is not None else list(names)

    for name in selected:
        base = names[name]

        def f(p, _name=name):
            overrides = {_name: p}
            return call(lambda *a, **kw: torch.func.functional_call(
                module, overrides, a, kw), inputs)

        results[name] = _fd_error(f, base.detach())

    def f_in(x):
        return call(module, x)

    results["<input>"] = _fd_error(f_in, inputs)
    return results


def _cases():
    """(layer name, shape tag, module, call, input) tuples."""
    gen = torch.Generator().manual_seed(7)
    cases = []

    # condition injection, spatial and temporal, three grids each
    for kind, shapes in (("spatial", [(1, 8, 2, 2), (2, 8, 3, 3), (1, 16, 2, 4)]),
                         ("temporal", [(1, 8, 2), (2, 8, 3), (1, 16, 5)])):
        for shape in shapes:
            d = shape[1]
            inj = _randomize(conditioning.ConditionInjector(d, kind), gen)
            h, q = _rand(gen, *shape), _rand(gen, *shape)
            cases.append((f"condition_injector_{kind}", str(shape), inj,
                          lambda m, x, q=q: (m(x, q) ** 2).mean(), h))

    # flow-time modulation
    for d, b in ((4, 1), (8, 2), (6, 3)):
        mod = _randomize(conditioning.FlowTimeModulation(d), gen)
        z = _rand(gen, b, 1, d)
        feat = _rand(gen, b, 3, d)

        def call(m, x, feat=feat):
            gamma, beta, alpha = m(x)
            return ((gamma * feat + beta) * alpha).pow(2).mean()

        cases.append(("flow_time_modulation", f"d={d},b={b}", mod, call, z))

    # biased self-attention, with and without a bias map
    for b, l, d, heads in ((1, 3, 4, 2), (2, 4, 8, 2), (1, 5, 8, 4)):
        att = _randomize(attention.BiasedSelfAttention(d, heads), gen)
        x = _rand(gen, b, l, d)
        bias = _rand(gen, 1, l, l)
        cases.append(("biased_attention", f"({b},{l},{d})h{heads}", att,
                      lambda m, x, bias=bias: (m(x, bias) ** 2).mean(), x))

    # bias mixer driven through a soft attention readout
    for l in (3, 4, 6):
        mix = _randomize(attention.SpatioTemporalBias(), gen)
        m_pos = attention.manhattan_bias_temporal(l).to(torch.float64)
        m_aux = _rand(gen, 1, l, l)
        logits = _rand(gen, 1, l, l)
        cases.append(("bias_mixer", f"L={l}", mix,
                      lambda m, x, mp=m_pos, ma=m_aux:
                      torch.softmax(x + m(mp, ma), dim=-1).pow(2).mean(),
                      logits))

    # patch embedding
    for b, t, c, hw, patch in ((1, 2, 1, 4, 2), (1, 1, 2, 4, 4), (2, 2, 2, 2, 2)):
        pe = _randomize(embeddings.PatchEmbed(c, 4, (patch, patch)), gen)
        x = _rand(gen, b, t, c, hw, hw)
        cases.append(("patch_embed", f"({b},{t},{c},{hw})p{patch}", pe,
                      lambda m, x: (m(x) ** 2).mean(), x))

    # decoder
    for b, l, d in ((1, 3, 4), (2, 2, 8), (1, 4, 6)):
        dec = _randomize(model.Decoder(d, 5), gen)
        x = _rand(gen, b, l, d)
        zfm = _rand(gen, b, 1, d)
        cases.append(("decoder", f"({b},{l},{d})", dec,
                      lambda m, x, z=zfm: (m(x, z) ** 2).mean(), x))

    return cases


def _model_cases():
    """End-to-end velocity fields; only a few parameter tensors audited."""
    gen = torch.Generator().manual_seed(11)
    cases = []
    for tag, kwargs in (
            ("base", {}),
            ("no_stm", {"use_stm": False, "fusion": "concat"}),
            ("crossattn", {"fusion": "crossattn", "image_size": 8})):
        cfg = model.ModelConfig(channels=1, cond_channels=2, stm_channels=1,
                                frames=2, image_size=kwargs.pop("image_size", 4),
                                patch=2, d=8, depth=1, heads=2, **kwargs)
        vf = _randomize(model.VelocityField(cfg), gen)
        b = 1
        x = _rand(gen, b, cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
        cond = _rand(gen, b, cfg.frames, cfg.cond_channels,
                     cfg.image_size, cfg.image_size)
        t = torch.full((b,), 0.3, dtype=torch.float64)
        aux = (_rand(gen, b, cfg.frames, cfg.stm_channels,
                     cfg.image_size, cfg.image_size) if cfg.use_stm else None)

        def call(m, x, cond=cond, t=t, aux=aux):
            return (m(x, t, cond, aux=aux) ** 2).mean()

        names = dict(vf.named_parameters())
        picks = [n for n in ("embed_state.proj.weight",
                             "decoder.proj.weight", "pos_spatial")
                 if n in names]
        picks += [n for n in names if "blocks.0" in n and "weight" in n][:2]
        cases.append((f"velocity_field_{tag}", str(tuple(x.shape)), vf, call,
                      x, picks))
    return cases


def run_gradcheck(tolerance: float = TOLERANCE, verbose: bool = False
                  ) -> list[str]:
    """Audit all layers; returns failure descriptions (empty means pass)."""
    failures = []
    for name, tag, module, call, inputs in _cases():
        errs = check_module(module, call, inputs)
        worst = max(errs.values())
        if verbose:
            print(f"{name} {tag}: max rel err {worst:.2e}")
        for pname, err in errs.items():
            if err >= tolerance:
                failures.append(f"{name} {tag} {pname}: {err:.2e}")
    for name, tag, module, call, inputs, picks in _model_cases():
        errs = check_module(module, call, inputs, param_names=picks)
        worst = max(errs.values())
        if verbose:
            print(f"{name} {tag}: max rel err {worst:.2e}")
        for pname, err in errs.items():
            if err >= tolerance:
                failures.append(f"{name} {tag} {pname}: {err:.2e}")
    if verbose and not failures:
        print("gradient audit passed")
    return failures
