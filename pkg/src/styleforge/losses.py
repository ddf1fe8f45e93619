"""Scalar loss terms for both training stages and their weighted composition.

Stage 1 trains on single frames with content + style + total-variation terms;
stage 2 adds feature-level and output-level temporal terms computed between a
consecutive frame pair via ground-truth flow and an occlusion mask.  Gram
matrices are normalized by C*H*W and pixel losses are means, so the loss
weights are resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StyleForgeError
from .flow import FlowField, OcclusionMask, warp
from .perceptual import FeatureExtractor, extract
from .tensor import Tensor, matmul, mul, reshape, slice_hw, square, tsum, transpose2d

CONTENT_TAP = "relu2_2"

# relative-luminance coefficients for the output temporal term
_LUMA = (0.2126, 0.7152, 0.0722)


@dataclass
class LossWeights:
    """Nonnegative weights: content, style, tv, temporal-feature, temporal-output."""

    gamma: float = 1.0
    rho: float = 1e5
    tau: float = 1e-6
    lambda_f: float = 1e-1
    lambda_o: float = 1e1

    def __post_init__(self):
        for name in ("gamma", "rho", "tau", "lambda_f", "lambda_o"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise StyleForgeError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class StyleTarget:
    """Precomputed Gram matrices of the style image at each tap."""

    grams: dict[str, np.ndarray] = field(default_factory=dict)


def gram(feature: Tensor) -> Tensor:
    """G = phi phi^T / (C*H*W) for a single-sample (1, C, H, W) feature map."""
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise ShapeError(f"gram expects (1, C, H, W), got {feature.shape}")
    _, c, h, w = feature.shape
    phi = reshape(feature, (c, h * w))
    return mul(matmul(phi, transpose2d(phi)), 1.0 / (c * h * w))


def style_target(extractor: FeatureExtractor, style_image: Tensor) -> StyleTarget:
    """Gram matrices of a style image, detached from any graph."""
    taps = extract(extractor, style_image.detach())
    return StyleTarget({label: gram(tap).data.copy() for label, tap in taps.items()})


def content_loss(gen_taps: dict[str, Tensor], content_taps: dict[str, Tensor]) -> Tensor:
    """Mean squared difference of the content-tap activations."""
    gen, ref = gen_taps[CONTENT_TAP], content_taps[CONTENT_TAP]
    if gen.shape != ref.shape:
        raise ShapeError(f"content taps differ: {gen.shape} vs {ref.shape}")
    diff = gen - ref.detach()
    return tsum(square(diff)) / diff.size


def style_loss(gen_taps: dict[str, Tensor], target: StyleTarget) -> Tensor:
    """Sum over taps of the squared Frobenius distance between Gram matrices."""
    total = None
    for label, target_gram in target.grams.items():
        if label not in gen_taps:
            raise KeyError(f"missing tap {label!r} in generated features")
        diff = gram(gen_taps[label]) - target_gram
        term = tsum(square(diff))
        total = term if total is None else total + term
    if total is None:
        raise StyleForgeError("style target has no taps")
    return total


def tv_loss(image: Tensor) -> Tensor:
    """Total variation: squared neighbor differences, divided by element count."""
    if image.ndim != 4 or image.shape[2] < 2 or image.shape[3] < 2:
        raise ShapeError(f"tv_loss needs (n, c, h>=2, w>=2), got {image.shape}")
    dh = slice_hw(image, slice(1, None), slice(None)) - slice_hw(image, slice(None, -1), slice(None))
    dw = slice_hw(image, slice(None), slice(1, None)) - slice_hw(image, slice(None), slice(None, -1))
    return (tsum(square(dh)) + tsum(square(dw))) / image.size


def _masked_mean_sq(diff: Tensor, mask: np.ndarray, channels: int) -> Tensor:
    count = float(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=diff.dtype))
    masked = mul(square(diff), mask.astype(diff.dtype)[None, None, :, :])
    return tsum(masked) / (count * channels)


def temporal_feature_loss(f_t: Tensor, f_prev: Tensor, flow_down: FlowField,
                          mask_down: OcclusionMask) -> Tensor:
    """Mean over traceable cells and channels of |F_t - warp(F_prev)|^2."""
    if f_t.shape != f_prev.shape:
        raise ShapeError(f"feature shapes differ: {f_t.shape} vs {f_prev.shape}")
    if f_t.shape[2:] != flow_down.shape or flow_down.shape != mask_down.shape:
        raise ShapeError(f"features {f_t.shape[2:]} vs flow {flow_down.shape} "
                         f"vs mask {mask_down.shape}")
    diff = f_t - warp(f_prev, flow_down)
    return _masked_mean_sq(diff, mask_down.data, channels=f_t.shape[1])


def _luminance(image: Tensor) -> Tensor:
    weights = np.asarray(_LUMA, dtype=image.dtype).reshape(1, 3, 1, 1)
    return tsum(mul(image, weights), axis=1, keepdims=True)


def temporal_output_loss(o_t: Tensor, o_prev: Tensor, i_t: Tensor, i_prev: Tensor,
                         flow: FlowField, mask: OcclusionMask) -> Tensor:
    """Luminance-compensated warped difference between consecutive outputs.

    Mean over traceable pixels and RGB channels of
    ((O_t - warp(O_prev)) - (Y(I_t) - Y(warp(I_prev))))^2.
    """
    for name, t in (("o_t", o_t), ("o_prev", o_prev), ("i_t", i_t), ("i_prev", i_prev)):
        if t.shape[2:] != flow.shape:
            raise ShapeError(f"{name} spatial dims {t.shape[2:]} do not match flow {flow.shape}")
    if flow.shape != mask.shape:
        raise ShapeError(f"flow {flow.shape} vs mask {mask.shape}")
    out_diff = o_t - warp(o_prev, flow)
    luma_diff = _luminance(i_t.detach()) - _luminance(warp(i_prev.detach(), flow))
    return _masked_mean_sq(out_diff - luma_diff, mask.data, channels=o_t.shape[1])


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


@dataclass
class Stage1Terms:
    content: Tensor
    style: Tensor
    tv: Tensor


def stage1_terms(gen_image: Tensor, gen_taps: dict[str, Tensor],
                 content_taps: dict[str, Tensor], target: StyleTarget) -> Stage1Terms:
    return Stage1Terms(content=content_loss(gen_taps, content_taps),
                       style=style_loss(gen_taps, target),
                       tv=tv_loss(gen_image))


def total_stage1(gen_image: Tensor, gen_taps: dict[str, Tensor],
                 content_taps: dict[str, Tensor], target: StyleTarget,
                 weights: LossWeights) -> Tensor:
    """gamma*content + rho*style + tau*tv for a single frame."""
    terms = stage1_terms(gen_image, gen_taps, content_taps, target)
    return (mul(terms.content, weights.gamma)
            + mul(terms.style, weights.rho)
            + mul(terms.tv, weights.tau))


@dataclass
class PairForward:
    """Everything the stage-2 loss needs for one consecutive-frame pair."""

    inputs: tuple[Tensor, Tensor]          # I_{t-1}, I_t
    outputs: tuple[Tensor, Tensor]         # O_{t-1}, O_t (unclamped)
    features: tuple[Tensor, Tensor]        # encoder maps F_{t-1}, F_t
    gen_taps: tuple[dict[str, Tensor], dict[str, Tensor]]
    content_taps: tuple[dict[str, Tensor], dict[str, Tensor]]
    flow: FlowField
    mask: OcclusionMask
    flow_down: FlowField
    mask_down: OcclusionMask


def total_stage2(pair: PairForward, target: StyleTarget, weights: LossWeights) -> Tensor:
    """Per-frame stage-1 terms for both frames plus the two temporal terms."""
    total = None
    for i in (0, 1):
        term = total_stage1(pair.outputs[i], pair.gen_taps[i], pair.content_taps[i],
                            target, weights)
        total = term if total is None else total + term
    temp_f = temporal_feature_loss(pair.features[1], pair.features[0],
                                   pair.flow_down, pair.mask_down)
    temp_o = temporal_output_loss(pair.outputs[1], pair.outputs[0],
                                  pair.inputs[1], pair.inputs[0],
                                  pair.flow, pair.mask)
    return total + mul(temp_f, weights.lambda_f) + mul(temp_o, weights.lambda_o)
