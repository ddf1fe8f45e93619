"""The width/depth-scalable encoder-decoder stylization network.

Two knobs parameterize the architecture: `alpha` scales the filter widths
(base 32/48/64) and `beta` scales the residual-block count.  The `paper`
variant uses 3x3 kernels everywhere with round(4*beta) residual blocks; the
`legacy_v1` variant keeps the older 9x9 first/last kernels and a deeper
residual stack (5 blocks at beta=1), and exists to reproduce the published
size study for that configuration family.

The final convolution has a bias but no normalization and no activation; raw
outputs are unbounded and are clamped to [0, 1] only at export time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kstm
from .errors import ShapeError, StyleForgeError
from .rng import SplitMix64
from .tensor import (
    ConvSpec,
    Tensor,
    conv2d,
    grad_enabled,
    instance_norm,
    relu,
    upsample_nearest,
)

_BASE_WIDTHS = (32, 48, 64)
_RECONET_WIDTHS = (48, 96, 192)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class ArchConfig:
    """Architecture knobs: filter-width scale, residual-depth scale, variant."""

    alpha: float
    beta: float
    variant: str = "paper"

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise StyleForgeError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (0.0 < self.beta <= 1.0):
            raise StyleForgeError(f"beta must be in (0, 1], got {self.beta}")
        if self.variant not in kstm.VARIANT_CODES:
            raise StyleForgeError(f"unknown variant {self.variant!r}")
        if min(self.widths) < 1:
            raise StyleForgeError(f"alpha={self.alpha} produces a zero-width layer")

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(_round_half_up(self.alpha * b) for b in _BASE_WIDTHS)

    @property
    def residual_blocks(self) -> int:
        base = 5 if self.variant == "legacy_v1" else 4
        return max(1, _round_half_up(base * self.beta))

    @property
    def end_kernel(self) -> int:
        """Kernel size of the first and last convolutions."""
        return 9 if self.variant == "legacy_v1" else 3


# ---------------------------------------------------------------------------
# Layer plan
# ---------------------------------------------------------------------------

# (name, kind, args) tuples; kind is "conv" (in, out, kernel, stride, norm)
# or "upsample".  Shared by build(), the serializer and the forward pass.


def _layer_plan(config: ArchConfig):
    w1, w2, w3 = config.widths
    ke = config.end_kernel
    plan = [
        ("enc1", "conv", (3, w1, ke, 1, True)),
        ("enc2", "conv", (w1, w2, 3, 2, True)),
        ("enc3", "conv", (w2, w3, 3, 2, True)),
    ]
    for i in range(config.residual_blocks):
        plan.append((f"res{i + 1}.conv1", "conv", (w3, w3, 3, 1, True)))
        plan.append((f"res{i + 1}.conv2", "conv", (w3, w3, 3, 1, True)))
    plan += [
        ("up1", "upsample", ()),
        ("dec1", "conv", (w3, w2, 3, 1, True)),
        ("up2", "upsample", ()),
        ("dec2", "conv", (w2, w1, 3, 1, True)),
        ("out", "conv", (w1, 3, ke, 1, False)),
    ]
    return plan


@dataclass
class _ConvBlock:
    spec: ConvSpec
    gamma: Tensor | None = None
    beta: Tensor | None = None


@dataclass
class StyleNetModel:
    """A built network: config plus named parameter tensors."""

    config: ArchConfig
    blocks: dict[str, _ConvBlock] = field(default_factory=dict)

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, block in self.blocks.items():
            params[f"{name}.weight"] = block.spec.weight
            params[f"{name}.bias"] = block.spec.bias
            if block.gamma is not None:
                params[f"{name}.gamma"] = block.gamma
                params[f"{name}.beta"] = block.beta
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def allocated_scalar_count(self) -> int:
        """Number of learnable scalars actually held by this model."""
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "StyleNetModel":
        """A converted copy (float64 for the numerical-check tests)."""
        out = StyleNetModel(self.config)
        for name, block in self.blocks.items():
            spec = ConvSpec(block.spec.weight.astype(dtype),
                            block.spec.bias.astype(dtype), block.spec.stride)
            gamma = block.gamma.astype(dtype) if block.gamma is not None else None
            beta = block.beta.astype(dtype) if block.beta is not None else None
            out.blocks[name] = _ConvBlock(spec, gamma, beta)
        return out


@dataclass
class StyleNetOutput:
    output: Tensor
    features: Tensor


def build(config: ArchConfig, init_seed: int) -> StyleNetModel:
    """Construct a model with deterministic, seed-reproducible weights.

    Conv weights are uniform on [-s, s] with s = sqrt(6 / (fan_in + fan_out)),
    drawn from a splitmix64 stream in layer order; biases and norm shifts
    start at zero, norm scales at one.
    """
    stream = SplitMix64(init_seed)
    model = StyleNetModel(config)
    for name, kind, args in _layer_plan(config):
        if kind != "conv":
            continue
        cin, cout, k, stride, norm = args
        bound = float(np.sqrt(6.0 / (cin * k * k + cout * k * k)))
        weight = Tensor(stream.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
        bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        block = _ConvBlock(ConvSpec(weight, bias, stride))
        if norm:
            block.gamma = Tensor(np.ones(cout, dtype=np.float32), requires_grad=True)
            block.beta = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        model.blocks[name] = block
    return model


def _run_block(block: _ConvBlock, x: Tensor, activate: bool) -> Tensor:
    if not grad_enabled():
        return _run_block_infer(block, x, activate)
    y = conv2d(x, block.spec)
    if block.gamma is not None:
        y = instance_norm(y, block.gamma, block.beta)
    if activate:
        y = relu(y)
    return y


def _run_block_infer(block: _ConvBlock, x: Tensor, activate: bool) -> Tensor:
    """Fused conv / norm / relu for the no-graph path.

    Operates in place on the conv's freshly allocated output buffer, which
    nothing else references; produces bitwise the same values as the
    composed operations.
    """
    y = conv2d(x, block.spec)
    d = y.data
    if block.gamma is not None:
        m = d.shape[2] * d.shape[3]
        s1 = np.einsum("nchw->nc", d)
        s2 = np.einsum("nchw,nchw->nc", d, d)
        mean = s1 / m
        var = np.maximum(s2 / m - mean * mean, 0.0)
        scale = block.gamma.data / np.sqrt(var + np.asarray(1e-5, dtype=d.dtype))
        shift = block.beta.data - scale * mean
        d *= scale[:, :, None, None]
        d += shift[:, :, None, None]
    if activate:
        np.maximum(d, 0, out=d)
    return y


def forward(model: StyleNetModel, frame: Tensor) -> StyleNetOutput:
    """Stylize a frame; also returns the encoder feature map (n, w3, h/4, w/4).

    The raw output is unbounded (no final activation); clamp at export.
    """
    if frame.ndim != 4 or frame.shape[1] != 3:
        raise ShapeError(f"expected (n, 3, h, w) input, got {frame.shape}")
    h, w = frame.shape[2], frame.shape[3]
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")

    b = model.blocks
    infer = not grad_enabled()
    x = _run_block(b["enc1"], frame, activate=True)
    x = _run_block(b["enc2"], x, activate=True)
    x = _run_block(b["enc3"], x, activate=True)
    for i in range(model.config.residual_blocks):
        branch = _run_block(b[f"res{i + 1}.conv1"], x, activate=True)
        branch = _run_block(b[f"res{i + 1}.conv2"], branch, activate=False)
        if infer:
            # accumulate into the branch's private buffer
            np.add(branch.data, x.data, out=branch.data)
            x = branch
        else:
            x = x + branch
    features = x
    x = upsample_nearest(x, 2)
    x = _run_block(b["dec1"], x, activate=True)
    x = upsample_nearest(x, 2)
    x = _run_block(b["dec2"], x, activate=True)
    x = _run_block(b["out"], x, activate=False)
    return StyleNetOutput(output=x, features=features)


# ---------------------------------------------------------------------------
# Size accounting (independent of build(): pure arithmetic over the plan)
# ---------------------------------------------------------------------------


def _conv_params(cin: int, cout: int, k: int, norm: bool) -> int:
    n = cout * cin * k * k + cout
    if norm:
        n += 2 * cout
    return n


def param_count(config: ArchConfig) -> int:
    """Exact learnable-scalar count for a configuration."""
    w1, w2, w3 = config.widths
    ke = config.end_kernel
    total = (_conv_params(3, w1, ke, True)
             + _conv_params(w1, w2, 3, True)
             + _conv_params(w2, w3, 3, True)
             + config.residual_blocks * 2 * _conv_params(w3, w3, 3, True)
             + _conv_params(w3, w2, 3, True)
             + _conv_params(w2, w1, 3, True)
             + _conv_params(w1, 3, ke, False))
    return total


def reconet_reference_count() -> int:
    """Parameter count of the ReCoNet baseline (48/96/192 filters, 4 blocks,
    9x9 first/last kernels, affine instance norm)."""
    w1, w2, w3 = _RECONET_WIDTHS
    return (_conv_params(3, w1, 9, True)
            + _conv_params(w1, w2, 3, True)
            + _conv_params(w2, w3, 3, True)
            + 4 * 2 * _conv_params(w3, w3, 3, True)
            + _conv_params(w3, w2, 3, True)
            + _conv_params(w2, w1, 3, True)
            + _conv_params(w1, 3, 9, False))


def size_estimate(config: ArchConfig) -> tuple[int, float]:
    """(bytes, binary megabytes) of the stored float32 weights."""
    n_bytes = 4 * param_count(config)
    return n_bytes, n_bytes / 2**20


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save(model: StyleNetModel, path) -> None:
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    kstm.write_file(path, model.config.alpha, model.config.beta,
                    kstm.VARIANT_CODES[model.config.variant], tensors)


def load(path) -> StyleNetModel:
    alpha, beta, variant_code, tensors = kstm.read_file(path)
    if variant_code not in kstm.VARIANT_NAMES:
        raise StyleForgeError(f"unknown variant code {variant_code}")
    config = ArchConfig(alpha, beta, kstm.VARIANT_NAMES[variant_code])
    model = build(config, init_seed=0)
    for name, param in model.named_parameters().items():
        if name not in tensors:
            raise StyleForgeError(f"model file missing tensor {name!r}")
        stored = tensors[name]
        if stored.shape != param.shape:
            raise ShapeError(f"tensor {name!r} has shape {stored.shape}, expected {param.shape}")
        param.data = stored.astype(np.float32)
    return model
