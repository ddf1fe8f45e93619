"""Command-line interface.

Subcommands:
    inspect   size table (parameters, %, MB) for one config or all 15 studied
    stylize   run a saved model over a frame directory
    bench     throughput study -> CSV report + FPS-vs-parameters figure
    train     stage-1 perceptual training from a config file
    finetune  stage-2 temporal fine-tuning of an existing model
    synth     generate a synthetic sequence with exact flows and masks

Training configs are flat key=value text files; unknown keys are rejected
with their line number so typos in loss weights cannot pass silently.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import pipeline, stylenet, trainer
from .errors import ConfigError, StyleForgeError
from .flow import synth_sequence
from .imageio import read_ppm, resize_bilinear
from .losses import LossWeights, style_target
from .perceptual import load_vgg16, tiny_extractor
from .stylenet import ArchConfig
from .tensor import Tensor
from .trainer import TrainingConfig

# the 15 studied configurations, in size-study order
STUDY_CONFIGS: list[tuple[int, ArchConfig]] = [
    (i + 1, ArchConfig(alpha, beta, "legacy_v1" if beta == 1.0 else "paper"))
    for i, (alpha, beta) in enumerate(
        (a, b) for b in (1.0, 0.75, 0.5) for a in (1.0, 0.75, 0.5, 0.25, 0.125)
    )
]


def _round2(x: float) -> float:
    return float(np.floor(x * 100 + 0.5) / 100)


def inspect_row(config: ArchConfig) -> dict:
    """The four size-study columns for one configuration.

    Percent-of-baseline size is computed from the two-decimal MB figures (the
    convention of the published table); percent of parameters from exact
    counts.
    """
    params = stylenet.param_count(config)
    ref = stylenet.reconet_reference_count()
    size_mb = stylenet.size_estimate(config)[1]
    ref_mb = _round2(ref * 4 / 2**20)
    return {
        "alpha": config.alpha,
        "beta": config.beta,
        "variant": config.variant,
        "parameters": params,
        "parameters_k": int(np.floor(params / 1000 + 0.5)),
        "pct_of_reconet": _round2(100.0 * params / ref),
        "size_mb": _round2(size_mb),
        "pct_size_of_reconet": _round2(100.0 * _round2(size_mb) / ref_mb),
    }


def _parse_wh(value: str) -> tuple[int, int]:
    try:
        w, h = value.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH, got {value!r}") from exc


def _parse_velocity(value: str) -> tuple[int, int]:
    try:
        u, v = value.split(",")
        return int(u), int(v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected U,V integers, got {value!r}") from exc


# ---------------------------------------------------------------------------
# Training config files
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "alpha": float,
    "beta": float,
    "variant": str,
    "init_seed": int,
    "seed": int,
    "steps": int,
    "batch_size": int,
    "resolution": str,
    "lr": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "grad_clip": float,
    "gamma": float,
    "rho": float,
    "tau": float,
    "lambda_f": float,
    "lambda_o": float,
    "style_image": str,
    "style_resize": int,
    "extractor": str,
    "extractor_seed": int,
    "vgg16_weights": str,
    "checkpoint_interval": int,
    "input_model": str,
}


def parse_config_file(path) -> dict:
    """Flat key=value config; '#' comments; unknown keys are errors."""
    values: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            values[key] = _CONFIG_SCHEMA[key](value)
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {value!r}", line=lineno) from None
    return values


def _training_config(values: dict) -> TrainingConfig:
    weights = LossWeights(
        gamma=values.get("gamma", 1.0),
        rho=values.get("rho", 1e5),
        tau=values.get("tau", 1e-6),
        lambda_f=values.get("lambda_f", 1e-1),
        lambda_o=values.get("lambda_o", 1e1),
    )
    if "resolution" in values:
        w, h = _parse_wh(values["resolution"])
    else:
        w, h = 256, 256
    return TrainingConfig(
        weights=weights,
        lr=values.get("lr", 1e-3),
        adam_beta1=values.get("adam_beta1", 0.9),
        adam_beta2=values.get("adam_beta2", 0.999),
        adam_eps=values.get("adam_eps", 1e-8),
        steps=values.get("steps", 0),
        batch_size=values.get("batch_size", 1),
        resolution=(h, w),
        checkpoint_interval=values.get("checkpoint_interval", 0),
        seed=values.get("seed", 0),
        grad_clip=values.get("grad_clip", 10.0),
    )


def _load_extractor(values: dict):
    kind = values.get("extractor", "tiny")
    if kind == "tiny":
        return tiny_extractor(values.get("extractor_seed", 0))
    if kind == "vgg16":
        if "vgg16_weights" not in values:
            raise ConfigError("extractor = vgg16 requires the vgg16_weights field")
        return load_vgg16(values["vgg16_weights"])
    raise ConfigError(f"extractor must be 'tiny' or 'vgg16', got {kind!r}")


def _load_style_image(values: dict, config: TrainingConfig) -> Tensor:
    if "style_image" not in values:
        raise ConfigError("missing required field style_image")
    image = read_ppm(Path(values["style_image"]).read_bytes())
    target_short = values.get("style_resize", 512)
    if target_short > 0:
        c, h, w = image.shape
        scale = target_short / min(h, w)
        image = resize_bilinear(image, max(8, int(round(h * scale))),
                                max(8, int(round(w * scale))))
    # crop to a multiple of 8 so the extractor accepts it
    c, h, w = image.shape
    h8, w8 = h - h % 8, w - w % 8
    top, left = (h - h8) // 2, (w - w8) // 2
    image = image[:, top:top + h8, left:left + w8]
    return Tensor(image[None])


def _crop_multiple(arr: np.ndarray, m: int, axes: tuple[int, int]) -> np.ndarray:
    slices = [slice(None)] * arr.ndim
    for ax in axes:
        size = arr.shape[ax]
        keep = size - size % m
        start = (size - keep) // 2
        slices[ax] = slice(start, start + keep)
    return arr[tuple(slices)]


def _crop_pair(sample: trainer.PairSample, m: int = 8) -> trainer.PairSample:
    from .flow import FlowField, OcclusionMask
    return trainer.PairSample(
        frame_prev=_crop_multiple(sample.frame_prev, m, (1, 2)),
        frame_cur=_crop_multiple(sample.frame_cur, m, (1, 2)),
        flow=FlowField(_crop_multiple(sample.flow.data, m, (0, 1))),
        mask=OcclusionMask(_crop_multiple(sample.mask.data, m, (0, 1))),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    writer = csv.writer(sys.stdout)
    writer.writerow(["id", "alpha", "beta", "variant", "parameters", "parameters_k",
                     "pct_of_reconet", "size_mb", "pct_size_of_reconet"])
    if args.all:
        rows = [(i, inspect_row(cfg)) for i, cfg in STUDY_CONFIGS]
    else:
        if args.alpha is None or args.beta is None:
            raise StyleForgeError("inspect needs --alpha and --beta (or --all)")
        cfg = ArchConfig(args.alpha, args.beta, args.variant)
        rows = [("", inspect_row(cfg))]
    for row_id, row in rows:
        writer.writerow([row_id, f"{row['alpha']:.3f}", f"{row['beta']:.2f}", row["variant"],
                         row["parameters"], row["parameters_k"],
                         f"{row['pct_of_reconet']:.2f}", f"{row['size_mb']:.2f}",
                         f"{row['pct_size_of_reconet']:.2f}"])
    return 0


def cmd_stylize(args) -> int:
    model = stylenet.load(args.model)
    timings = pipeline.stylize_dir(model, args.in_dir, args.out_dir,
                                   resize=args.resize, workers=args.workers,
                                   log=lambda msg: print(msg, file=sys.stderr))
    n = len(timings)
    total = sum(timings)
    print(f"{n} frames in {total:.2f} s ({n / total:.2f} fps)", file=sys.stderr)
    return 0


def _parse_config_list(spec: str) -> list[ArchConfig]:
    if spec == "all":
        return [cfg for _, cfg in STUDY_CONFIGS]
    configs = []
    for part in spec.split(","):
        bits = part.split(":")
        if len(bits) not in (2, 3):
            raise StyleForgeError(f"bad config {part!r}; expected alpha:beta[:variant]")
        variant = bits[2] if len(bits) == 3 else "paper"
        configs.append(ArchConfig(float(bits[0]), float(bits[1]), variant))
    return configs


def cmd_bench(args) -> int:
    configs = _parse_config_list(args.configs)
    frames = pipeline.open_sequence(args.frames).load_all()
    resolutions = [_parse_wh(r) for r in args.resolution.split(",")]
    results = pipeline.bench_configs(configs, frames, resolutions, loop=args.loop,
                                     progress=lambda msg: print(msg, file=sys.stderr))
    plot = pipeline.write_bench_report(results, args.report)
    print(f"report: {args.report}\nfigure: {plot}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    values = parse_config_file(args.config)
    config = _training_config(values)
    extractor = _load_extractor(values)
    target = style_target(extractor, _load_style_image(values, config))

    arch = ArchConfig(values.get("alpha", 1.0), values.get("beta", 1.0),
                      values.get("variant", "paper"))
    model = stylenet.build(arch, values.get("init_seed", 0))

    images = pipeline.load_image_dataset(args.data)
    h, w = config.resolution
    images = [resize_bilinear(img, h, w) for img in images]

    model, trace = trainer.train_stage1(model, images, extractor, target, config,
                                        checkpoint_dir=args.checkpoint_dir)
    stylenet.save(model, args.out)
    trainer.write_trace(trace, str(args.out) + ".trace.csv")
    _write_trace_figure(trace, str(args.out) + ".trace.png")
    print(f"model: {args.out}", file=sys.stderr)
    return 0


def cmd_finetune(args) -> int:
    values = parse_config_file(args.config)
    if "input_model" not in values:
        raise ConfigError("missing required field input_model")
    config = _training_config(values)
    extractor = _load_extractor(values)
    target = style_target(extractor, _load_style_image(values, config))

    model = stylenet.load(values["input_model"])
    pairs = [_crop_pair(p) for p in pipeline.load_pair_dataset(args.data)]

    model, trace = trainer.finetune_stage2(model, pairs, extractor, target, config,
                                           checkpoint_dir=args.checkpoint_dir)
    stylenet.save(model, args.out)
    trainer.write_trace(trace, str(args.out) + ".trace.csv")
    _write_trace_figure(trace, str(args.out) + ".trace.png")
    print(f"model: {args.out}", file=sys.stderr)
    return 0


def _write_trace_figure(trace: list[dict], path) -> None:
    if not trace:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [row["step"] for row in trace]
    ax.plot(steps, [row["total"] for row in trace], label="total")
    for key in ("content", "style", "tv", "temp_f", "temp_o"):
        if any(row[key] for row in trace):
            ax.plot(steps, [row[key] for row in trace], label=key, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_synth(args) -> int:
    seq = synth_sequence(args.seed, args.frames, args.size[1], args.size[0], args.velocity)
    pipeline.write_sequence_dir(seq, args.out)
    print(f"{args.frames} frames -> {args.out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styleforge",
                                     description="Scalable video style transfer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="size table for architecture configs")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--variant", choices=["paper", "legacy_v1"], default="paper")
    p.add_argument("--all", action="store_true", help="emit all 15 studied rows")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("stylize", help="stylize a directory of PPM frames")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--resize", type=_parse_wh, default=None, metavar="WxH")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("bench", help="throughput study over configs")
    p.add_argument("--configs", default="all", help="'all' or alpha:beta[:variant],...")
    p.add_argument("--frames", required=True)
    p.add_argument("--resolution", default="480x320", help="WxH[,WxH...]")
    p.add_argument("--loop", type=int, default=1)
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="stage-1 perceptual training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="stage-2 temporal fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-dir", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("synth", help="generate a synthetic sequence with flows/masks")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=_parse_wh, default=(64, 64), metavar="WxH")
    p.add_argument("--velocity", type=_parse_velocity, default=(1, 0), metavar="U,V")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StyleForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
