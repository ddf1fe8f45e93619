"""Optical-flow ingestion, warping, occlusion masks, and synthetic sequences.

Flow fields are stored per pixel of the *destination* frame of a pair: warp()
samples the previous frame at p + flow(p), so a field attached to the pair
(t-1, t) aligns frame t-1 quantities with frame t.  Only ground-truth or
synthetic flow is ever consumed; this package does not estimate flow.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    InvalidDimensionsError,
    ShapeError,
    StyleForgeError,
    TruncatedFileError,
)
from .rng import SplitMix64
from .tensor import Tensor, _node

FLO_MAGIC = 202021.25  # packs to b"PIEH" little-endian

# Sundaram-Brox forward/backward consistency constants
_CONSISTENCY_REL = 0.01
_CONSISTENCY_ABS = 0.5


class FlowField:
    """Per-pixel (u, v) displacement in pixels, float32, shape (h, w, 2).

    Displacements are sanity-bounded by the frame size; fields smaller than
    8 pixels on a side are exempt (the bound is meaningless for the minimal
    fixtures the file-format tests use).
    """

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ShapeError(f"flow must have shape (h, w, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise StyleForgeError("flow contains non-finite values")
        h, w = arr.shape[:2]
        if (np.any(np.abs(arr[:, :, 0]) >= max(w, 8))
                or np.any(np.abs(arr[:, :, 1]) >= max(h, 8))):
            raise StyleForgeError("flow displacement exceeds frame size")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.data[:, :, 0]

    @property
    def v(self) -> np.ndarray:
        return self.data[:, :, 1]


class OcclusionMask:
    """Binary traceability mask, shape (h, w); 1 = traceable."""

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise StyleForgeError("mask values must be 0 or 1")
        self.data = arr.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def traceable_count(self) -> int:
        return int(self.data.sum())


# ---------------------------------------------------------------------------
# Middlebury .flo format
# ---------------------------------------------------------------------------


def read_flo(blob: bytes) -> FlowField:
    """Parse Middlebury .flo bytes into a FlowField."""
    if len(blob) < 4 or blob[:4] != struct.pack("<f", FLO_MAGIC):
        raise BadMagicError(f"not a .flo file (magic {blob[:4]!r})")
    if len(blob) < 12:
        raise TruncatedFileError(".flo header incomplete")
    w, h = struct.unpack("<ii", blob[4:12])
    if w <= 0 or h <= 0:
        raise InvalidDimensionsError(f".flo declares {w}x{h}")
    expected = 12 + 8 * w * h
    if len(blob) < expected:
        raise TruncatedFileError(f".flo payload truncated: {len(blob)} < {expected} bytes")
    pairs = np.frombuffer(blob[12:expected], dtype="<f4").reshape(h, w, 2)
    return FlowField(pairs.copy())


def write_flo(flow: FlowField) -> bytes:
    h, w = flow.shape
    header = struct.pack("<f", FLO_MAGIC) + struct.pack("<ii", w, h)
    return header + flow.data.astype("<f4").tobytes()


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def _sample_coords(flow: np.ndarray, dtype):
    h, w = flow.shape[:2]
    yy, xx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    gx = np.clip(xx + flow[:, :, 0].astype(dtype), 0, w - 1)
    gy = np.clip(yy + flow[:, :, 1].astype(dtype), 0, h - 1)
    x0 = np.clip(np.floor(gx).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(gy).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = gx - x0
    wy = gy - y0
    idx = (
        (y0 * w + x0).ravel(),
        (y0 * w + x1).ravel(),
        (y1 * w + x0).ravel(),
        (y1 * w + x1).ravel(),
    )
    wts = (
        ((1 - wy) * (1 - wx)).ravel(),
        ((1 - wy) * wx).ravel(),
        (wy * (1 - wx)).ravel(),
        (wy * wx).ravel(),
    )
    return idx, wts


def _bilinear_gather(flat: np.ndarray, idx, wts) -> np.ndarray:
    out = wts[0] * flat[:, idx[0]]
    for i in (1, 2, 3):
        out += wts[i] * flat[:, idx[i]]
    return out


def warp(x, flow: FlowField):
    """Backward warp: out(p) = x sampled bilinearly at p + flow(p).

    Sampling coordinates are clamped to the frame border.  Accepts a Tensor
    (n, c, h, w); differentiable with respect to x.  Plain numpy arrays of
    shape (c, h, w) or (h, w) are warped without graph recording.
    """
    if isinstance(x, Tensor):
        if x.ndim != 4:
            raise ShapeError(f"warp expects (n, c, h, w), got {x.shape}")
        n, c, h, w = x.shape
        if (h, w) != flow.shape:
            raise ShapeError(f"frame {h}x{w} does not match flow {flow.shape}")
        idx, wts = _sample_coords(flow.data, x.dtype)
        flat = x.data.reshape(n * c, h * w)
        data = _bilinear_gather(flat, idx, wts).reshape(n, c, h, w)

        def backward(g):
            gflat = g.reshape(n * c, h * w)
            acc = np.zeros_like(flat)
            rows = np.arange(n * c)[:, None]
            for i in range(4):
                np.add.at(acc, (rows, idx[i][None, :]), gflat * wts[i])
            return (acc.reshape(n, c, h, w),)

        return _node(data, (x,), backward)

    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    if (h, w) != flow.shape:
        raise ShapeError(f"frame {h}x{w} does not match flow {flow.shape}")
    idx, wts = _sample_coords(flow.data, arr.dtype)
    out = _bilinear_gather(arr.reshape(c, h * w), idx, wts).reshape(c, h, w).astype(arr.dtype)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Occlusion masks
# ---------------------------------------------------------------------------


def occlusion_mask(forward: FlowField, backward: FlowField) -> OcclusionMask:
    """Traceability by forward/backward consistency.

    A pixel is untraceable when its round trip disagrees,
    |wf(p) + wb(p + wf(p))|^2 > 0.01 (|wf(p)|^2 + |wb(p + wf(p))|^2) + 0.5,
    or when p + wf(p) leaves the frame.  wb is sampled bilinearly.
    """
    if forward.shape != backward.shape:
        raise ShapeError(f"flow shapes differ: {forward.shape} vs {backward.shape}")
    h, w = forward.shape
    wf = forward.data.astype(np.float64)
    idx, wts = _sample_coords(forward.data, np.float64)
    wb_flat = backward.data.astype(np.float64).reshape(h * w, 2).T  # (2, hw)
    wb_at = _bilinear_gather(wb_flat, idx, wts).T.reshape(h, w, 2)

    round_trip = wf + wb_at
    lhs = (round_trip ** 2).sum(axis=2)
    rhs = _CONSISTENCY_REL * ((wf ** 2).sum(axis=2) + (wb_at ** 2).sum(axis=2)) + _CONSISTENCY_ABS
    inconsistent = lhs > rhs

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    tx = xx + wf[:, :, 0]
    ty = yy + wf[:, :, 1]
    out_of_frame = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)

    return OcclusionMask(~(inconsistent | out_of_frame))


def downsample_flow(flow: FlowField, factor: int = 4) -> FlowField:
    """Average-pool displacement blocks and rescale them to the coarse grid."""
    h, w = flow.shape
    if h % factor or w % factor:
        raise ShapeError(f"flow dims {h}x{w} not divisible by {factor}")
    blocks = flow.data.reshape(h // factor, factor, w // factor, factor, 2)
    return FlowField(blocks.mean(axis=(1, 3)) / factor)


def downsample_mask(mask: OcclusionMask, factor: int = 4) -> OcclusionMask:
    """A coarse cell is traceable only if every pixel inside it is traceable."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask dims {h}x{w} not divisible by {factor}")
    blocks = mask.data.reshape(h // factor, factor, w // factor, factor)
    return OcclusionMask(blocks.min(axis=(1, 3)))


# ---------------------------------------------------------------------------
# Synthetic ground-truth sequences
# ---------------------------------------------------------------------------


@dataclass
class SynthSequence:
    """Frames plus exact flows/masks for each consecutive pair.

    flows[t] and masks[t] belong to the pair (frames[t], frames[t+1]) and are
    laid out on the later frame's grid, ready for warp() and the temporal
    losses.
    """

    frames: list[np.ndarray]        # each (3, h, w) float32 in [0, 1]
    flows: list[FlowField]
    masks: list[OcclusionMask]
    velocity: tuple[int, int]


def _smooth_noise(stream: SplitMix64, channels: int, h: int, w: int,
                  cell: int = 8) -> np.ndarray:
    """Random texture that is smooth at the pixel scale (bilinear-upsampled grid)."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = stream.uniform(0.0, 1.0, (channels, gh, gw)).astype(np.float64)
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    g00 = grid[:, y0][:, :, x0]
    g01 = grid[:, y0][:, :, x0 + 1]
    g10 = grid[:, y0 + 1][:, :, x0]
    g11 = grid[:, y0 + 1][:, :, x0 + 1]
    out = (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)
    return out.astype(np.float32)


def synth_sequence(seed: int, length: int, h: int, w: int,
                   velocity: tuple[int, int]) -> SynthSequence:
    """A textured patch translating rigidly over a static smooth background.

    `velocity` = (u, v), integers, is the flow value inside the patch: frame
    t+1 at pixel p equals frame t at p + (u, v) wherever the patch covers p.
    Dis-occluded bands (background revealed by the patch leaving) are marked
    untraceable in the masks.
    """
    u, v = int(velocity[0]), int(velocity[1])
    if abs(u) * length >= w or abs(v) * length >= h:
        raise StyleForgeError(f"velocity {velocity} too large for {length} frames of {w}x{h}")

    stream = SplitMix64(seed)
    background = _smooth_noise(stream, 3, h, w)

    travel_x = abs(u) * (length - 1)
    travel_y = abs(v) * (length - 1)
    tw = max(2, min(w // 2, w - travel_x))
    th = max(2, min(h // 2, h - travel_y))
    texture = _smooth_noise(stream, 3, th, tw, cell=4)

    # patch position moves by (-u, -v) per frame so the stored flow is (u, v)
    x_start = w - tw if u >= 0 else 0
    y_start = h - th if v >= 0 else 0

    def region(t: int) -> tuple[int, int]:
        return y_start - t * v, x_start - t * u

    frames = []
    for t in range(length):
        ry, rx = region(t)
        frame = background.copy()
        frame[:, ry:ry + th, rx:rx + tw] = texture
        frames.append(frame)

    flows, masks = [], []
    for t in range(length - 1):
        ry_prev, rx_prev = region(t)
        ry_cur, rx_cur = region(t + 1)
        flow = np.zeros((h, w, 2), dtype=np.float32)
        flow[ry_cur:ry_cur + th, rx_cur:rx_cur + tw, 0] = u
        flow[ry_cur:ry_cur + th, rx_cur:rx_cur + tw, 1] = v

        in_prev = np.zeros((h, w), dtype=bool)
        in_prev[ry_prev:ry_prev + th, rx_prev:rx_prev + tw] = True
        in_cur = np.zeros((h, w), dtype=bool)
        in_cur[ry_cur:ry_cur + th, rx_cur:rx_cur + tw] = True
        disoccluded = in_prev & ~in_cur

        flows.append(FlowField(flow))
        masks.append(OcclusionMask(~disoccluded))
    return SynthSequence(frames, flows, masks, (u, v))
