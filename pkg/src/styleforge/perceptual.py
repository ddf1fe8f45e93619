"""Frozen feature extractors feeding the content and style losses.

Two interchangeable backends share one topology family (conv/ReLU stages with
2x max-pooling between them) and one tap contract: four activations at 1x,
1/2x, 1/4x and 1/8x resolution, labelled relu1_2 / relu2_2 / relu3_3 /
relu4_3.

* `tiny_extractor` builds a small deterministic network (widths 8/16/32/64,
  two convs per stage) from a seed.  Losses are well defined for any frozen
  extractor, so tests and desk-scale training use this one.
* `load_vgg16` loads real VGG16 conv weights through conv4_3 from a KSTM
  weight bank for quality parity with large-scale training; see the README
  for the offline conversion step that produces the file.

Extractor weights are frozen: gradients flow through extract() to the image
input but never into the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kstm
from .errors import MissingTensorError, ShapeError
from .rng import SplitMix64
from .tensor import ConvSpec, Tensor, conv2d, maxpool2, relu

TAP_LABELS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")

# standard ImageNet preprocessing constants
MEAN_RGB = (0.485, 0.456, 0.406)
STD_RGB = (0.229, 0.224, 0.225)

_TINY_WIDTHS = (8, 16, 32, 64)
_VGG_WIDTHS = (64, 128, 256, 512)
_VGG_CONVS_PER_STAGE = (2, 2, 3, 3)


@dataclass
class FeatureExtractor:
    """Ordered conv stages with frozen weights and fixed tap labels."""

    stages: list[list[ConvSpec]]
    mean: tuple[float, float, float] = MEAN_RGB
    std: tuple[float, float, float] = STD_RGB

    @property
    def tap_widths(self) -> tuple[int, ...]:
        return tuple(stage[-1].out_channels for stage in self.stages)

    def named_weights(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for s, stage in enumerate(self.stages, start=1):
            for k, spec in enumerate(stage, start=1):
                out[f"conv{s}_{k}.weight"] = spec.weight.data
                out[f"conv{s}_{k}.bias"] = spec.bias.data
        return out

    def weight_bytes(self) -> bytes:
        """Concatenated weight payload; the trainer asserts this never changes."""
        return b"".join(arr.tobytes() for arr in self.named_weights().values())

    def astype(self, dtype) -> "FeatureExtractor":
        stages = [[ConvSpec(s.weight.astype(dtype), s.bias.astype(dtype), 1)
                   for s in stage] for stage in self.stages]
        return FeatureExtractor(stages, self.mean, self.std)


def extract(extractor: FeatureExtractor, image: Tensor) -> dict[str, Tensor]:
    """Tap activations for an (n, 3, h, w) image with values in [0, 1].

    Preprocessing (subtract mean, divide by std per channel) is applied first;
    spatial dims must be divisible by 8 (three poolings above the deepest tap).
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (n, 3, h, w) image, got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h % 8 or w % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {h}x{w}")

    dtype = image.dtype
    mean = np.asarray(extractor.mean, dtype=dtype).reshape(1, 3, 1, 1)
    inv_std = (1.0 / np.asarray(extractor.std, dtype=dtype)).reshape(1, 3, 1, 1)
    x = (image - mean) * inv_std

    taps: dict[str, Tensor] = {}
    for label, stage in zip(TAP_LABELS, extractor.stages):
        if taps:
            x = maxpool2(x)
        for spec in stage:
            x = relu(conv2d(x, spec))
        taps[label] = x
    return taps


def _frozen_conv(weight: np.ndarray, bias: np.ndarray) -> ConvSpec:
    return ConvSpec(Tensor(weight), Tensor(bias), stride=1)


def tiny_extractor(seed: int) -> FeatureExtractor:
    """Small deterministic extractor for tests and desk-scale training."""
    stream = SplitMix64(seed)
    stages: list[list[ConvSpec]] = []
    cin = 3
    for width in _TINY_WIDTHS:
        stage = []
        for _ in range(2):
            bound = float(np.sqrt(6.0 / (cin * 9 + width * 9)))
            weight = stream.uniform(-bound, bound, (width, cin, 3, 3))
            bias = np.zeros(width, dtype=np.float32)
            stage.append(_frozen_conv(weight, bias))
            cin = width
        stages.append(stage)
    return FeatureExtractor(stages)


def save_extractor(extractor: FeatureExtractor, path) -> None:
    """Write the extractor's conv weights as a KSTM weight bank."""
    kstm.write_file(path, 0.0, 0.0, 0, extractor.named_weights())


def _stages_from_bank(tensors: dict[str, np.ndarray],
                      convs_per_stage: tuple[int, ...]) -> list[list[ConvSpec]]:
    stages = []
    for s, n_convs in enumerate(convs_per_stage, start=1):
        stage = []
        for k in range(1, n_convs + 1):
            wname, bname = f"conv{s}_{k}.weight", f"conv{s}_{k}.bias"
            for name in (wname, bname):
                if name not in tensors:
                    raise MissingTensorError(name)
            weight, bias = tensors[wname], tensors[bname]
            if weight.ndim != 4 or weight.shape[0] != bias.shape[0]:
                raise ShapeError(f"inconsistent shapes for {wname}: {weight.shape} / {bias.shape}")
            stage.append(_frozen_conv(weight, bias))
        stages.append(stage)
    return stages


def load_vgg16(path) -> FeatureExtractor:
    """Load VGG16 conv weights (through conv4_3) from a KSTM weight bank."""
    _, _, _, tensors = kstm.read_file(path)
    stages = _stages_from_bank(tensors, _VGG_CONVS_PER_STAGE)
    extractor = FeatureExtractor(stages)
    if extractor.tap_widths != _VGG_WIDTHS:
        raise ShapeError(f"tap widths {extractor.tap_widths} do not match VGG16 {_VGG_WIDTHS}")
    expected_in = 3
    for s, stage in enumerate(extractor.stages, start=1):
        for k, spec in enumerate(stage, start=1):
            if spec.in_channels != expected_in:
                raise ShapeError(f"conv{s}_{k} expects {spec.in_channels} input channels, "
                                 f"topology requires {expected_in}")
            expected_in = spec.out_channels
    return extractor


def load_tiny(path) -> FeatureExtractor:
    """Load a tiny-topology extractor previously written by save_extractor."""
    _, _, _, tensors = kstm.read_file(path)
    stages = _stages_from_bank(tensors, (2, 2, 2, 2))
    extractor = FeatureExtractor(stages)
    if extractor.tap_widths != _TINY_WIDTHS:
        raise ShapeError(f"tap widths {extractor.tap_widths} do not match tiny {_TINY_WIDTHS}")
    return extractor
