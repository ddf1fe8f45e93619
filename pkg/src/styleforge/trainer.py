"""Two-stage training: perceptual stage on single frames, temporal fine-tuning
on frame pairs.

Stage 1 minimizes content+style+tv on single frames.  Stage 2 starts from an
already-trained model and adds the two temporal terms computed on consecutive
frame pairs with ground-truth flow and occlusion masks; both the input model
and the fine-tuned model remain usable products.

Determinism contract: with a fixed seed the sample order, every update and
the loss trace are bit-identical across runs, and a checkpoint-resume run
reproduces an uninterrupted one exactly.  Sample indices are derived
statelessly from (seed, step), so resuming needs no RNG state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kstm, stylenet
from .errors import DataError, DivergenceError, ShapeError, StyleForgeError
from .flow import FlowField, OcclusionMask, downsample_flow, downsample_mask
from .losses import (
    LossWeights,
    PairForward,
    StyleTarget,
    stage1_terms,
    temporal_feature_loss,
    temporal_output_loss,
)
from .perceptual import FeatureExtractor, extract
from .rng import derive_index
from .stylenet import StyleNetModel
from .tensor import Tensor, mul

TRACE_COLUMNS = ("step", "content", "style", "tv", "temp_f", "temp_o", "total")


@dataclass
class TrainingConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 0
    batch_size: int = 1
    resolution: tuple[int, int] = (256, 256)   # (h, w)
    checkpoint_interval: int = 0
    seed: int = 0
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.steps < 0:
            raise StyleForgeError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise StyleForgeError(f"batch_size must be >= 1, got {self.batch_size}")
        h, w = self.resolution
        if h % 8 or w % 8:
            # perceptual taps need /8; the network itself needs /4
            raise StyleForgeError(f"resolution must be divisible by 8, got {h}x{w}")


@dataclass
class PairSample:
    """Consecutive frames with their flow and occlusion mask."""

    frame_prev: np.ndarray   # (3, h, w) float32 in [0, 1]
    frame_cur: np.ndarray
    flow: FlowField
    mask: OcclusionMask

    def __post_init__(self):
        hw = self.frame_prev.shape[1:]
        if self.frame_cur.shape[1:] != hw or self.flow.shape != hw or self.mask.shape != hw:
            raise ShapeError(f"inconsistent pair dims: frames {hw}, flow {self.flow.shape}, "
                             f"mask {self.mask.shape}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_model(cls, model: StyleNetModel) -> "AdamState":
        params = model.named_parameters()
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainingConfig) -> None:
    """Standard Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = float(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values()))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale


def _collect_grads(model: StyleNetModel) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in model.named_parameters().items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: StyleNetModel, state: AdamState, path) -> None:
    """Model KSTM plus an optimizer sidecar (<path>.opt) in the same container."""
    stylenet.save(model, path)
    side: dict[str, np.ndarray] = {"adam_step": np.array([state.step], dtype=np.float32)}
    for name in state.m:
        side[name + ".m"] = state.m[name]
        side[name + ".v"] = state.v[name]
    kstm.write_file(str(path) + ".opt", model.config.alpha, model.config.beta,
                    kstm.VARIANT_CODES[model.config.variant], side)


def load_checkpoint(path) -> tuple[StyleNetModel, AdamState]:
    model = stylenet.load(path)
    _, _, _, side = kstm.read_file(str(path) + ".opt")
    state = AdamState.for_model(model)
    state.step = int(side["adam_step"][0])
    for name in state.m:
        state.m[name] = side[name + ".m"]
        state.v[name] = side[name + ".v"]
    return model, state


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _as_batch(frame: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(frame.astype(dtype)[None])


def _check_resolution(shape_hw: tuple[int, int], config: TrainingConfig, what: str) -> None:
    if tuple(shape_hw) != tuple(config.resolution):
        raise DataError(f"{what} is {shape_hw[0]}x{shape_hw[1]}, "
                        f"config expects {config.resolution[0]}x{config.resolution[1]}")


def _finite_or_raise(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step}")


def _maybe_checkpoint(model, state, step, config, checkpoint_dir, stage: int) -> None:
    if checkpoint_dir is None or config.checkpoint_interval <= 0:
        return
    if step % config.checkpoint_interval == 0:
        out = Path(checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, state, out / f"stage{stage}_step{step:06d}.kstm")


def train_stage1(model: StyleNetModel, images: list[np.ndarray],
                 extractor: FeatureExtractor, target: StyleTarget,
                 config: TrainingConfig, *, opt_state: AdamState | None = None,
                 checkpoint_dir=None) -> tuple[StyleNetModel, list[dict]]:
    """Minimize content+style+tv over single frames; returns (model, trace).

    `images` are (3, h, w) float arrays at the configured resolution.  With
    `opt_state` from a checkpoint the loop continues at opt_state.step and
    reproduces an uninterrupted run exactly.
    """
    if not images:
        raise DataError("image source is empty")
    for i, img in enumerate(images):
        _check_resolution(img.shape[1:], config, f"training image {i}")

    frozen = extractor.weight_bytes()
    state = opt_state if opt_state is not None else AdamState.for_model(model)
    params = model.named_parameters()
    content_cache: dict[int, dict[str, Tensor]] = {}
    trace: list[dict] = []

    for step in range(state.step, config.steps):
        total = None
        sums = {"content": 0.0, "style": 0.0, "tv": 0.0}
        for slot in range(config.batch_size):
            idx = derive_index(config.seed, step, slot, len(images))
            frame = _as_batch(images[idx])
            out = stylenet.forward(model, frame)
            if idx not in content_cache:
                content_cache[idx] = {k: v.detach() for k, v in extract(extractor, frame).items()}
            gen_taps = extract(extractor, out.output)
            terms = stage1_terms(out.output, gen_taps, content_cache[idx], target)
            loss = (mul(terms.content, config.weights.gamma)
                    + mul(terms.style, config.weights.rho)
                    + mul(terms.tv, config.weights.tau))
            total = loss if total is None else total + loss
            sums["content"] += terms.content.item()
            sums["style"] += terms.style.item()
            sums["tv"] += terms.tv.item()
        total = total / config.batch_size
        _finite_or_raise(total.item(), step)
        total.backward()
        grads = _collect_grads(model)
        _clip_global_norm(grads, config.grad_clip)
        adam_step(params, grads, state, config)

        b = config.batch_size
        trace.append({"step": step, "content": sums["content"] / b,
                      "style": sums["style"] / b, "tv": sums["tv"] / b,
                      "temp_f": 0.0, "temp_o": 0.0, "total": total.item()})
        _maybe_checkpoint(model, state, step + 1, config, checkpoint_dir, stage=1)

    if extractor.weight_bytes() != frozen:
        raise StyleForgeError("extractor weights changed during training")
    return model, trace


def _forward_pair(model: StyleNetModel, extractor: FeatureExtractor,
                  sample: PairSample, content_cache: dict, idx: int) -> PairForward:
    frames = (_as_batch(sample.frame_prev), _as_batch(sample.frame_cur))
    outs = [stylenet.forward(model, f) for f in frames]
    if idx not in content_cache:
        content_cache[idx] = tuple({k: v.detach() for k, v in extract(extractor, f).items()}
                                   for f in frames)
    gen_taps = tuple(extract(extractor, o.output) for o in outs)
    return PairForward(
        inputs=frames,
        outputs=(outs[0].output, outs[1].output),
        features=(outs[0].features, outs[1].features),
        gen_taps=gen_taps,
        content_taps=content_cache[idx],
        flow=sample.flow,
        mask=sample.mask,
        flow_down=downsample_flow(sample.flow),
        mask_down=downsample_mask(sample.mask),
    )


def finetune_stage2(model: StyleNetModel, pairs: list[PairSample],
                    extractor: FeatureExtractor, target: StyleTarget,
                    config: TrainingConfig, *, opt_state: AdamState | None = None,
                    checkpoint_dir=None) -> tuple[StyleNetModel, list[dict]]:
    """Fine-tune an existing model with the temporal terms added.

    The input model's weights are the starting point (re-training an already
    trained model for stability); pass any stage-1 product.
    """
    if not pairs:
        raise DataError("pair source is empty")
    for i, pair in enumerate(pairs):
        _check_resolution(pair.frame_prev.shape[1:], config, f"pair {i}")

    frozen = extractor.weight_bytes()
    state = opt_state if opt_state is not None else AdamState.for_model(model)
    params = model.named_parameters()
    content_cache: dict[int, tuple] = {}
    trace: list[dict] = []

    for step in range(state.step, config.steps):
        total = None
        sums = {"content": 0.0, "style": 0.0, "tv": 0.0, "temp_f": 0.0, "temp_o": 0.0}
        for slot in range(config.batch_size):
            idx = derive_index(config.seed, step, slot, len(pairs))
            pf = _forward_pair(model, extractor, pairs[idx], content_cache, idx)
            loss = None
            for i in (0, 1):
                terms = stage1_terms(pf.outputs[i], pf.gen_taps[i], pf.content_taps[i], target)
                part = (mul(terms.content, config.weights.gamma)
                        + mul(terms.style, config.weights.rho)
                        + mul(terms.tv, config.weights.tau))
                loss = part if loss is None else loss + part
                sums["content"] += terms.content.item()
                sums["style"] += terms.style.item()
                sums["tv"] += terms.tv.item()
            temp_f = temporal_feature_loss(pf.features[1], pf.features[0],
                                           pf.flow_down, pf.mask_down)
            temp_o = temporal_output_loss(pf.outputs[1], pf.outputs[0],
                                          pf.inputs[1], pf.inputs[0], pf.flow, pf.mask)
            loss = loss + mul(temp_f, config.weights.lambda_f) + mul(temp_o, config.weights.lambda_o)
            sums["temp_f"] += temp_f.item()
            sums["temp_o"] += temp_o.item()
            total = loss if total is None else total + loss
        total = total / config.batch_size
        _finite_or_raise(total.item(), step)
        total.backward()
        grads = _collect_grads(model)
        _clip_global_norm(grads, config.grad_clip)
        adam_step(params, grads, state, config)

        b = config.batch_size
        trace.append({"step": step, "content": sums["content"] / b,
                      "style": sums["style"] / b, "tv": sums["tv"] / b,
                      "temp_f": sums["temp_f"] / b, "temp_o": sums["temp_o"] / b,
                      "total": total.item()})
        _maybe_checkpoint(model, state, step + 1, config, checkpoint_dir, stage=2)

    if extractor.weight_bytes() != frozen:
        raise StyleForgeError("extractor weights changed during training")
    return model, trace


def write_trace(trace: list[dict], path) -> None:
    """Loss trace as CSV: step, content, style, tv, temp_f, temp_o, total."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in TRACE_COLUMNS})
