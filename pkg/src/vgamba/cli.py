"""Command line: build | bench-scaling | transport | erf | gradcheck | flops.

Every command validates the whole configuration (file, then flags) before it
creates the output directory, and writes ``config.ini`` with the resolved
values next to its other outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from . import analysis, certify, config as cfgmod
from .artifacts import write_csv, write_pgm, write_text
from .backbone import build_backbone, count_parameters, get_spec, spec_dict, stage_parameters
from .numerics import (
    ConfigurationError,
    NumericalDomainError,
    apply_thread_limit,
    derive_seed,
    load_checkpoint,
    load_into,
    resolve_dtype,
)
from .transport import TrainConfig, evaluate_mse, gen_transport_dataset, split_dataset, stack, train

# reference figures the summaries compare against
TARGET_PARAMS = {"vgamba-b": 19.45e6, "vgamba-l": 38.44e6, "vgamba-x": 54e6, "resnet-50": 25e6}
TARGET_MACS = {"vgamba-b": 3.88e9, "vgamba-l": 7.61e9, "vgamba-x": 11.35e9}


PARTS = ("stem", "stage1", "stage2", "stage3", "stage4")


class CommandError(RuntimeError):
    """A run-time precondition failed (e.g. a missing checkpoint)."""


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #


def model_spec(cfg: cfgmod.RunConfig, variant: str | None = None, **extra):
    m = cfg.model
    overrides = dict(use_rpe=m.use_rpe, use_asc=m.use_asc, num_classes=m.num_classes, **extra)
    if m.mixer and variant is None:
        overrides["mixer"] = m.mixer
    if m.image_size and "image_size" not in extra:
        overrides["image_size"] = m.image_size
    return get_spec(variant or m.variant, **overrides)


def dense_spec(cfg: cfgmod.RunConfig, variant: str):
    """Transport/ERF models: grayscale in, one dense output channel, stage-4 extent from data.size."""
    return get_spec(
        variant,
        use_rpe=cfg.model.use_rpe,
        use_asc=cfg.model.use_asc,
        in_channels=1,
        dense_channels=1,
        num_classes=1,
        image_size=cfg.data.size,
    )


def prepare_out(cfg: cfgmod.RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.ini", cfg.to_ini())
    return out


def emit(out: Path, summary: dict) -> None:
    text = json.dumps(summary, indent=2, sort_keys=True)
    write_text(out / "summary.json", text)
    print(text)


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #


def cmd_build(cfg: cfgmod.RunConfig) -> int:
    spec = model_spec(cfg)
    dtype = resolve_dtype(cfg.run.precision)
    out = prepare_out(cfg)
    model = build_backbone(spec, seed=cfg.run.seed).to(dtype).eval()
    size = spec.image_size
    with torch.no_grad():
        feats = model.forward_features(torch.zeros(1, spec.in_channels, size, size, dtype=dtype))
    macs = analysis.count_macs(model, (1, spec.in_channels, size, size))
    params = count_parameters(model)
    summary = {
        "variant": spec.name,
        "spec": spec_dict(spec),
        "parameters": params,
        "parameters_per_part": dict(zip(PARTS, stage_parameters(model))),
        "stage_shapes": {n: "x".join(map(str, f.shape[1:])) for n, f in zip(PARTS, feats)},
        "macs": macs.macs,
        "flops_2x_mac": macs.flops_2x,
        "stage4_mixer_flops_analytic": analysis.stage4_mixer_flops(spec),
    }
    if spec.name in TARGET_PARAMS and spec.mixer == get_spec(spec.name).mixer:
        summary["parameters_reference"] = TARGET_PARAMS[spec.name]
        summary["parameters_rel_diff"] = params / TARGET_PARAMS[spec.name] - 1
    emit(out, summary)
    return 0


def cmd_flops(cfg: cfgmod.RunConfig) -> int:
    spec = model_spec(cfg)
    out = prepare_out(cfg)
    model = build_backbone(spec, seed=cfg.run.seed).to(resolve_dtype(cfg.run.precision))
    size = spec.image_size
    report = analysis.count_macs(model, (1, spec.in_channels, size, size))
    parts = report.grouped(depth=2)
    write_csv(out / "macs_by_module.csv", ["module", "macs"], sorted(parts.items()))
    examples = {
        "attention(M=2,D=1)": analysis.flops_analytic(analysis.ComplexityQuery("attention", 2, 1)),
        "ssm(M=1,D=1,N=1)": analysis.flops_analytic(analysis.ComplexityQuery("ssm", 1, 1, N=1)),
        "cnn(M=1,K=3,D=2)": analysis.flops_analytic(analysis.ComplexityQuery("cnn", 1, 2, K=3)),
    }
    summary = {
        "variant": spec.name,
        "input": [1, spec.in_channels, size, size],
        "convention": "1 multiply-accumulate = 1 FLOP; flops_2x_mac doubles it",
        "macs": report.macs,
        "flops_2x_mac": report.flops_2x,
        "analytic_examples": examples,
    }
    if spec.name in TARGET_MACS and size == 224:
        summary["macs_reference"] = TARGET_MACS[spec.name]
        summary["macs_rel_diff"] = report.macs / TARGET_MACS[spec.name] - 1
    emit(out, summary)
    return 0


def cmd_bench_scaling(cfg: cfgmod.RunConfig) -> int:
    b = cfg.bench
    out = prepare_out(cfg)
    rows, fits = [], {}
    for mixer in b.mixers:
        repeats = b.repeats
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            timings = analysis.bench_scaling(b.lengths, mixer, b.width, b.state, repeats, derive_seed(cfg.run.seed, mixer))
        if any(issubclass(w.category, RuntimeWarning) for w in caught):
            repeats *= 4
            print(f"warning: {mixer} timings below 1 ms; rerunning with {repeats} repetitions", file=sys.stderr)
            timings = analysis.bench_scaling(b.lengths, mixer, b.width, b.state, repeats, derive_seed(cfg.run.seed, mixer))
        slope, r2 = analysis.scaling_fit(timings)
        fits[mixer] = {"exponent": slope, "r2": r2, "repeats": repeats}
        rows += [(mixer, m, t) for m, t in timings]
    write_csv(out / "scaling.csv", ["mixer", "M", "seconds"], rows, nondeterministic=["seconds"])
    emit(out, {"lengths": b.lengths, "width": b.width, "state": b.state, "fits": fits})
    return 0


def _preview(model, samples, dtype) -> np.ndarray:
    """Rows of [input | target | prediction] with 2-pixel gaps."""
    x, y = stack(samples, dtype)
    model.eval()
    with torch.no_grad():
        pred = model.forward_dense(x).clamp(0, 1)
    s = x.shape[-1]
    canvas = np.full((len(samples) * (s + 2) - 2, 3 * s + 4), 0.5)
    for i in range(len(samples)):
        r = i * (s + 2)
        for j, img in enumerate((x[i, 0], y[i, 0], pred[i, 0])):
            canvas[r : r + s, j * (s + 2) : j * (s + 2) + s] = img.double().numpy()
    return canvas


def cmd_transport(cfg: cfgmod.RunConfig) -> int:
    specs = {v: dense_spec(cfg, v) for v in cfg.transport.models}
    dtype = resolve_dtype(cfg.run.precision)
    out = prepare_out(cfg)
    seed = cfg.run.seed
    d = cfg.data
    samples = gen_transport_dataset(d.size, d.n_samples, d.shape_kinds, seed=seed)
    train_set, val_set = split_dataset(samples, seed, d.val_fraction)
    t = cfg.train
    tc = TrainConfig(t.lr, t.epochs, t.batch_size, t.weight_decay, (t.beta1, t.beta2), t.loss)
    histories, finals = {}, {}
    for variant, spec in specs.items():
        model = build_backbone(spec, seed=seed).to(dtype)
        print(f"training {variant}", file=sys.stderr)
        hist = train(
            model,
            train_set,
            val_set,
            tc,
            seed=seed,
            checkpoint=out / f"{variant}.ckpt",
            log=lambda msg, v=variant: print(f"  {v} {msg}", file=sys.stderr),
        )
        write_csv(
            out / f"history_{variant}.csv",
            ["epoch", "train_mse", "val_mse", "seconds"],
            hist.rows(),
            nondeterministic=["seconds"],
        )
        if cfg.transport.preview:
            write_pgm(out / f"pred_{variant}.pgm", _preview(model, val_set[: cfg.transport.preview], dtype))
        histories[variant] = hist
        finals[variant] = hist.val_mse[-1]
    zero = evaluate_mse(lambda x: torch.zeros_like(x), val_set)
    summary = {"final_val_mse": finals, "zero_predictor_val_mse": zero, "seed": seed}
    if "vgamba-tiny" in histories and "conv-tiny" in histories:
        conv_final = finals["conv-tiny"]
        summary["vgamba_epochs_to_conv_final"] = histories["vgamba-tiny"].epochs_to_reach(conv_final)
        summary["conv_epochs_to_conv_final"] = histories["conv-tiny"].epochs_to_reach(conv_final)
    emit(out, summary)
    return 0


def cmd_erf(cfg: cfgmod.RunConfig) -> int:
    e = cfg.erf
    specs = {v: dense_spec(cfg, v) for v in e.models}
    ckpts = {}
    if e.checkpoint_dir:
        for v in e.models:
            path = Path(e.checkpoint_dir) / f"{v}.ckpt"
            if not path.is_file():
                raise CommandError(f"missing checkpoint for {v}: {path}")
            ckpts[v] = path
    dtype = resolve_dtype(cfg.run.precision)
    out = prepare_out(cfg)
    rows, fractions = [], {}
    for v, spec in specs.items():
        model = build_backbone(spec, seed=cfg.run.seed).to(dtype)
        if v in ckpts:
            load_into(model, load_checkpoint(ckpts[v]))
        fractions[v] = []
        for stage in range(5):
            emap = analysis.erf_map(model, stage, e.extent, e.n_samples, derive_seed(cfg.run.seed, "erf"), in_channels=1)
            write_pgm(out / f"erf_{v}_stage{stage}.pgm", emap.values)
            for thr in e.thresholds:
                rows.append((v, stage, thr, emap.area_fraction(thr)))
            fractions[v].append(emap.area_fraction(0.05))
    write_csv(out / "erf_fractions.csv", ["model", "stage", "threshold", "area_fraction"], rows)
    emit(
        out,
        {
            "extent": e.extent,
            "source": "checkpoints" if ckpts else "fresh initialisation",
            "area_fraction_at_0.05": fractions,
        },
    )
    return 0


def cmd_gradcheck(cfg: cfgmod.RunConfig) -> int:
    g = cfg.gradcheck
    if cfg.run.precision != "f64":
        print("note: gradient certification always runs in f64", file=sys.stderr)
    out = prepare_out(cfg)
    rows = certify.certify_all(g.seeds, tol=g.tol, order=g.order, steps=tuple(g.steps), max_probes=g.max_probes)
    write_csv(
        out / "gradcheck.csv",
        ["op", "seed", "target", "probes", "max_rel_error", "max_abs_error", "passed"],
        [(r.op, r.seed, r.target, r.probes, r.max_rel_error, r.max_abs_error, int(r.passed)) for r in rows],
    )
    per_op: dict[str, dict] = {}
    for r in rows:
        s = per_op.setdefault(r.op, {"checks": 0, "failed": 0, "worst_rel_error": 0.0})
        s["checks"] += 1
        s["failed"] += int(not r.passed)
        s["worst_rel_error"] = max(s["worst_rel_error"], r.max_rel_error)
    emit(out, {"seeds": g.seeds, "tol": g.tol, "precision": "f64", "ops": per_op})
    return 0 if all(s["failed"] == 0 for s in per_op.values()) else 1


COMMANDS = {
    "build": cmd_build,
    "bench-scaling": cmd_bench_scaling,
    "transport": cmd_transport,
    "erf": cmd_erf,
    "gradcheck": cmd_gradcheck,
    "flops": cmd_flops,
}


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI-style run configuration")
    common.add_argument("--seed", type=int, help="root seed (run.seed)")
    common.add_argument("--out", metavar="DIR", help="output directory (run.out)")
    common.add_argument("--variant", metavar="NAME", help="model variant (model.variant)")
    common.add_argument("--no-rpe", action="store_true", help="disable the positional encoding")
    common.add_argument("--no-asc", action="store_true", help="disable ASC")
    common.add_argument("--mixer", choices=["gamba", "conv", "attention"], help="stage-4 mixer (model.mixer)")
    common.add_argument("--precision", choices=["f32", "f64"], help="run.precision")
    parser = argparse.ArgumentParser(prog="vgamba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", "").replace("_", " "))
    return parser


def flag_overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for flag, key in [("seed", "run.seed"), ("out", "run.out"), ("variant", "model.variant"), ("mixer", "model.mixer"), ("precision", "run.precision")]:
        value = getattr(args, flag)
        if value is not None:
            out[key] = str(value)
    if args.no_rpe:
        out["model.use_rpe"] = "false"
    if args.no_asc:
        out["model.use_asc"] = "false"
    return out


def resolve(args: argparse.Namespace) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config)
    cfgmod.apply_overrides(cfg, flag_overrides(args))
    return cfgmod.validate(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_limit()
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalDomainError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
