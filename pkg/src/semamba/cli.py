"""Command-line entry point: ``semamba <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

LOSS_FLAGS = ("time", "mag", "complex", "phase", "consistency", "gan")


class UsageError(Exception):
    pass


def _parse_sweep(text: str) -> list[int]:
    from .metrics import powers_of_two

    try:
        lo, hi = (int(v) for v in text.split(":"))
        return powers_of_two(lo, hi)
    except ValueError:
        raise UsageError(f"--sweep expects T0:T1 with 0 < T0 <= T1, got {text!r}") from None


def cmd_synth(args) -> int:
    from .pipeline import load_synth_config, specs_from_synth_config, synth_to_dir

    cfg = load_synth_config(args.spec) if args.spec else {}
    specs = specs_from_synth_config(cfg, args.seed)
    out = synth_to_dir(specs, float(cfg.get("duration_s", 2.0)), args.out)
    print(f"wrote {len(specs)} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .models import load_checkpoint
    from .pipeline import TrainConfig, load_dir, train

    cfg = TrainConfig.from_toml(args.config) if args.config else TrainConfig(model=args.model)
    if cfg.model != args.model:
        raise UsageError(f"config trains {cfg.model!r} but --model is {args.model!r}")
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    overrides = {f"w_{t}": getattr(args, f"w_{t}") for t in LOSS_FLAGS if getattr(args, f"w_{t}") is not None}
    if overrides:
        cfg = replace(cfg, loss_weights={**cfg.loss_weights, **overrides})
    dataset = load_dir(args.data)
    resume = load_checkpoint(args.resume, kind=args.model) if args.resume else None
    result = train(cfg, dataset, resume=resume, checkpoint_path=args.out, log_path=args.log,
                   dump_dir=Path(args.out).parent)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": str(args.out), "steps": cfg.steps, "final": last}))
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .pipeline import enhance
    from .spectral import default_pcs_table, load_pcs_table

    table = None
    if args.pcs == "default":
        table = default_pcs_table()
    elif args.pcs:
        table = load_pcs_table(args.pcs)
    enhance(args.inp, args.ckpt, args.out, pcs=table, kind=args.model)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate

    print(json.dumps(evaluate(args.ref, args.est)))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import bench_rows, fit_scaling_exponent, write_sweep_csv

    Ts = _parse_sweep(args.sweep)
    rows = bench_rows(Ts, args.d_model, args.layers, time_it=not args.no_time)
    write_sweep_csv(args.out, rows)
    summary = {"T": Ts, "mamba_exponent": None, "attention_exponent": None}
    if len(Ts) > 1:
        summary["mamba_exponent"] = fit_scaling_exponent(Ts, [r["flops_mamba"] for r in rows])
        summary["attention_exponent"] = fit_scaling_exponent(Ts, [r["flops_attention"] for r in rows])
    print(json.dumps(summary))
    return EXIT_OK


def cmd_flops(args) -> int:
    from .metrics import count_model
    from .models import get_kind

    overrides = {}
    if args.config:
        from .pipeline import TrainConfig

        overrides = TrainConfig.from_toml(args.config).model_config
    cfg = get_kind(args.model).config_cls.from_dict(overrides)
    report = count_model(cfg, args.frames, include_stft=args.include_stft)
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    ok = True
    for name, report in run_suite(args.module, args.seed):
        print(f"{args.module}.{name}: {report}")
        ok &= report.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semamba", description="Selective state-space speech enhancement toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic clean/noisy WAV pairs")
    s.add_argument("--spec", help="TOML file with a [synth] table")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a synthesized directory")
    s.add_argument("--model", choices=["basic", "advanced"], required=True)
    s.add_argument("--config", help="TOML training config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--steps", type=int)
    for term in LOSS_FLAGS:
        s.add_argument(f"--w-{term}", type=float, help=f"override the {term} loss weight")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", help="enhance a 16 kHz mono WAV file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pcs", help="PCS table file, or 'default' for the bundled table")
    s.add_argument("--model", choices=["basic", "advanced"], help="expected model kind")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", help="SI-SDR and STOI of an estimate against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--est", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="FLOPs and scan wall-clock over a sweep of T")
    s.add_argument("--sweep", required=True, help="T0:T1, doubled from T0 up to T1")
    s.add_argument("--out", required=True, help="CSV output")
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--no-time", action="store_true", help="skip wall-clock timing")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("flops", help="per-layer FLOPs/parameter report for a model config")
    s.add_argument("--model", choices=["basic", "advanced"], required=True)
    s.add_argument("--config", help="TOML with a [model] table")
    s.add_argument("--frames", type=int, default=161)
    s.add_argument("--include-stft", action="store_true")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=["autodiff", "ssm", "models", "losses"], required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    from .autodiff import NonFiniteError
    from .models import CheckpointError
    from .pipeline import SynthesisError, TrainingDivergedError, WavFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NonFiniteError, FloatingPointError, SynthesisError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, WavFormatError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, NotImplementedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
