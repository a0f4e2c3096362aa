"""Command line interface.

Subcommands: synth, train, sample, eval, gradcheck, ablate. Options can
come from a key=value config file (--config), from environment variables
prefixed STFLOW_, or from flags; flags win over environment, environment
wins over the config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import flow, metrics, model as model_mod, synthdata, tasks, tensorops
from .estimator import FlowEstimator
from .training import run_ablation_grid

ENV_PREFIX = "STFLOW_"


def load_config_file(path: str) -> dict[str, str]:
    """Parse a key=value config file; blank lines and # comments allowed."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_options(args: argparse.Namespace, parser: argparse.ArgumentParser
                    ) -> argparse.Namespace:
    """Fold config-file and environment values under explicit flags."""
    layers: dict[str, str] = {}
    if getattr(args, "config", None):
        layers.update(load_config_file(args.config))
    for key, value in os.environ.items():
        if key.startswith(ENV_PREFIX):
            layers[key[len(ENV_PREFIX):].lower()] = value
    if not layers:
        return args
    defaults = {a.dest: a.default for a in parser._actions}
    for key, value in layers.items():
        if key not in defaults or key == "config":
            continue
        if getattr(args, key) != defaults[key]:
            continue  # explicit flag wins
        default = defaults[key]
        if isinstance(default, bool):
            parsed = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            parsed = int(value)
        elif isinstance(default, float):
            parsed = float(value)
        else:
            parsed = value
        setattr(args, key, parsed)
    return args


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value options file")
    p.add_argument("--seed", type=int, default=0)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=tasks.TASKS, default="recon")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--window", type=int, default=4,
                   help="frames per model window")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--fusion", choices=model_mod.FUSION_MODES,
                   default="adaptive")
    p.add_argument("--no-stm", action="store_true",
                   help="disable auxiliary attention-bias maps")
    p.add_argument("--no-metadata", action="store_true",
                   help="disable date and location embeddings")
    p.add_argument("--missing-rate", type=float, default=0.5)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--horizon", type=int, default=4,
                   help="future frames per forecast window")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", choices=("euler", "rk4", "dopri5"),
                   default="dopri5")
    p.add_argument("--steps", type=int, default=10,
                   help="sampling step budget")
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--atol", type=float, default=None)


def _estimator_from(args) -> FlowEstimator:
    channels = 3
    aux_channels = 2 if args.task != "scd" else 1
    if args.task == "scd":
        channels = args.num_classes
        cond = 3 + aux_channels
    elif args.task == "forecast":
        cond = 3 + aux_channels
    else:
        cond = 3 + aux_channels   # masked/contaminated optical + aux
    return FlowEstimator(
        task=args.task, channels=channels, cond_channels=cond,
        stm_channels=aux_channels, frames=args.window,
        image_size=args.size, patch=args.patch, d=args.d, depth=args.depth,
        heads=args.heads, fusion=args.fusion, use_stm=not args.no_stm,
        use_metadata=not args.no_metadata,
        forecast_history=args.horizon if args.task == "forecast" else 0,
        num_classes=args.num_classes, missing_rate=args.missing_rate,
        steps=getattr(args, "train_steps", 0),
        batch_size=getattr(args, "batch_size", 8),
        lr=getattr(args, "lr", 1e-4),
        sample_steps=getattr(args, "steps", 10),
        solver=getattr(args, "solver", "dopri5"), seed=args.seed)


def _load_samples(data_dir: str) -> list:
    index = json.loads((Path(data_dir) / "index.json").read_text())
    return [synthdata.read_sample(Path(data_dir) / name)
            for name in index["samples"]]


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    n_filtered = 0
    for roi in range(args.rois):
        if args.filtered:
            stream = synthdata.generate_stream(
                args.seed + roi, args.size, args.size,
                mean_cloud=args.mean_cloud)
            samples, reasons = synthdata.build_dataset(stream, args.mode)
            n_filtered += len(reasons)
        else:
            samples = synthdata.generate_samples(
                1, args.size, args.window, args.seed + roi)
        for j, sample in enumerate(samples):
            name = f"roi{roi:04d}_{j}.sample"
            synthdata.write_sample(out / name, sample)
            names.append(name)
    (out / "index.json").write_text(json.dumps(
        {"samples": names, "seed": args.seed, "mode": args.mode,
         "filtered_frames": n_filtered}, indent=2))
    print(f"wrote {len(names)} samples to {out} "
          f"({n_filtered} acquisitions filtered out)")
    return 0


def cmd_train(args) -> int:
    samples = _load_samples(args.data)
    est = _estimator_from(args)
    run_dir = args.run_dir or "runs/train"
    est.fit(samples, run_dir=run_dir)
    r = est.train_result_
    print(f"trained {args.task} for {args.train_steps} steps in "
          f"{r.seconds:.1f}s; loss {r.losses[0]:.4f} -> ema {r.final_ema:.4f} "
          f"({r.steps_skipped} skipped updates)")
    print(f"checkpoint: {Path(run_dir) / 'final.ckpt'}")
    return 0


def _restore(args) -> tuple[FlowEstimator, model_mod.VelocityField]:
    vf, manifest = model_mod.load_checkpoint(args.checkpoint)
    est = _estimator_from(args)
    est.model_ = vf
    return est, vf


def cmd_sample(args) -> int:
    est, vf = _restore(args)
    samples = _load_samples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples[:args.limit]):
        pred = est.predict(sample, seed=args.seed + i)
        torch.save(pred, out / f"pred{i:04d}.pt")
    print(f"wrote {min(args.limit, len(samples))} predictions to {out}")
    return 0


def cmd_eval(args) -> int:
    est, vf = _restore(args)
    samples = _load_samples(args.data)
    reports = []
    for i, sample in enumerate(samples[:args.limit]):
        pred = est.predict(sample, seed=args.seed + i)
        if args.task == "scd":
            gt = sample.labels[:vf.cfg.frames]
            ious, mean_iou = metrics.miou(pred.numpy(), gt.numpy(),
                                          args.num_classes)
            reports.append({"miou": mean_iou})
        else:
            gt = (sample.x_clear[vf.cfg.t_his:vf.cfg.t_his + vf.cfg.frames]
                  if args.task == "forecast"
                  else sample.x_clear[:vf.cfg.frames])
            reports.append(metrics.sequence_report(pred.numpy(),
                                                   gt.numpy())["summary"])
    keys = sorted({k for r in reports for k in r if r[k] is not None})
    summary = {k: sum(r[k] for r in reports if r.get(k) is not None)
               / max(1, sum(1 for r in reports if r.get(k) is not None))
               for k in keys}
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"per_sample": reports, "summary": summary}, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    failures = run_gradcheck(tolerance=args.tolerance, verbose=True)
    return 1 if failures else 0


def cmd_ablate(args) -> int:
    samples = _load_samples(args.data)
    variants = [{"fusion": f} for f in model_mod.FUSION_MODES]
    variants += [{"fusion": "adaptive", "use_stm": False}]

    def build_and_train(variant):
        est = _estimator_from(args)
        est.set_params(**{k: v for k, v in variant.items()
                          if k in est.get_params()})
        est.fit(samples)
        psnrs = []
        for i, s in enumerate(samples[:args.limit]):
            pred = est.predict(s, seed=args.seed + i)
            gt = s.x_clear[:est.frames]
            psnrs.append(metrics.psnr(pred.numpy(), gt.numpy()))
        return {"psnr": sum(psnrs) / len(psnrs)}

    out_csv = args.out or "ablation.csv"
    rows = run_ablation_grid(build_and_train, variants, out_csv=out_csv)
    for row in rows:
        print(row)
    print(f"wrote {out_csv}")
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="stflow",
        description="conditional flow matching for image time series")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {}

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--rois", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--mode", choices=("ts_s12", "ts_s12cr"), default="ts_s12")
    p.add_argument("--filtered", action="store_true",
                   help="simulate full acquisition streams and apply "
                        "the benchmark filters")
    p.add_argument("--mean-cloud", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    parsers["synth"] = p

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=cmd_train)
    parsers["train"] = p

    for name, fn in (("sample", cmd_sample), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} with a trained checkpoint")
        _add_common(p)
        _add_model_flags(p)
        _add_solver_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--limit", type=int, default=16)
        p.add_argument("--out", default=None if name == "eval" else "preds")
        p.set_defaults(func=fn)
        parsers[name] = p

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    parsers["gradcheck"] = p

    p = sub.add_parser("ablate", help="train module/fusion variants")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--train-steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)
    parsers["ablate"] = p

    return parser, parsers


def main(argv=None) -> int:
    parser, parsers = build_parser()
    args = parser.parse_args(argv)
    args = resolve_options(args, parsers[args.command])
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
