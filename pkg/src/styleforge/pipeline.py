"""Frame-sequence plumbing: stylization runs, the throughput study, the
flicker metric, and synthetic dataset directories.

A video is a directory of numbered P6 PPM frames; lexicographic name order is
temporal order.  Pair datasets add flows/ (.flo) and masks/ (.pgm)
subdirectories indexed by the later frame of each pair.  Bench reports are
CSV plus a log-scale FPS-versus-parameters figure rendered next to the CSV.
"""

from __future__ import annotations

import csv
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stylenet
from .errors import DataError, ShapeError
from .flow import FlowField, OcclusionMask, SynthSequence, read_flo, warp, write_flo
from .imageio import read_ppm, read_pgm, resize_bilinear, write_pgm, write_ppm
from .stylenet import ArchConfig, StyleNetModel
from .tensor import Tensor, no_grad
from .trainer import PairSample


@dataclass
class FrameSequence:
    """Ordered frame files of one resolution."""

    paths: list[Path]
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, i: int) -> np.ndarray:
        frame = read_ppm(self.paths[i].read_bytes())
        if frame.shape[1:] != (self.height, self.width):
            raise DataError(f"{self.paths[i]}: frame is {frame.shape[2]}x{frame.shape[1]}, "
                            f"sequence is {self.width}x{self.height}")
        return frame

    def load_all(self) -> list[np.ndarray]:
        return [self.load(i) for i in range(len(self))]


def open_sequence(directory) -> FrameSequence:
    directory = Path(directory)
    paths = sorted(directory.glob("*.ppm"))
    if not paths:
        raise DataError(f"no .ppm frames in {directory}")
    first = read_ppm(paths[0].read_bytes())
    return FrameSequence(paths, height=first.shape[1], width=first.shape[2])


# ---------------------------------------------------------------------------
# Stylization
# ---------------------------------------------------------------------------


def stylize_array(model: StyleNetModel, frame: np.ndarray) -> np.ndarray:
    """Forward one (3, h, w) frame without graph recording; clamped to [0, 1]."""
    with no_grad():
        out = stylenet.forward(model, Tensor(frame[None].astype(np.float32)))
    return np.clip(out.output.data[0], 0.0, 1.0)


def stylize_dir(model: StyleNetModel, in_dir, out_dir, *, resize: tuple[int, int] | None = None,
                workers: int = 1, log=None) -> list[float]:
    """Stylize every frame of a directory; returns per-frame seconds.

    `resize` is (w, h); without it each frame must already be divisible by 4.
    """
    seq = open_sequence(in_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resize is None and (seq.height % 4 or seq.width % 4):
        raise ShapeError(f"frames are {seq.width}x{seq.height}, not divisible by 4; "
                         "pass a resize target")

    def process(i: int) -> float:
        t0 = time.perf_counter()
        frame = seq.load(i)
        if resize is not None:
            frame = resize_bilinear(frame, resize[1], resize[0])
        styled = stylize_array(model, frame)
        (out_dir / seq.paths[i].name).write_bytes(write_ppm(styled))
        return time.perf_counter() - t0

    if workers <= 1:
        timings = [process(i) for i in range(len(seq))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            timings = list(pool.map(process, range(len(seq))))
    if log is not None:
        for path, dt in zip(seq.paths, timings):
            log(f"{path.name}: {dt * 1000:.1f} ms")
    return timings


# ---------------------------------------------------------------------------
# Throughput study
# ---------------------------------------------------------------------------


@dataclass
class BenchResult:
    config: ArchConfig
    params: int
    size_mb: float
    resolution: tuple[int, int]          # (w, h)
    frames: int
    fps_end_to_end: float
    fps_forward: float


def bench_model(model: StyleNetModel, frames: list[np.ndarray],
                resolution: tuple[int, int], loop: int = 1) -> BenchResult:
    """Average FPS over the looped frames at the given (w, h) input size.

    One pass, two timers: end-to-end wraps resize + forward (the resize to
    network input size is part of the protocol), forward-only nests inside
    it.  One untimed warmup frame absorbs first-call allocations.
    """
    if not frames:
        raise DataError("no frames to bench")
    total = len(frames) * loop
    if total < 100:
        raise DataError(f"need at least 100 frames (have {len(frames)}, loop {loop}); "
                        "raise --loop")
    w, h = resolution

    stylize_array(model, resize_bilinear(frames[0], h, w))  # warmup

    t_end = 0.0
    t_fwd = 0.0
    for i in range(total):
        src = frames[i % len(frames)]
        t0 = time.perf_counter()
        frame = resize_bilinear(src, h, w)
        t1 = time.perf_counter()
        stylize_array(model, frame)
        t2 = time.perf_counter()
        t_end += t2 - t0
        t_fwd += t2 - t1
    fps_end = total / t_end
    fps_fwd = total / t_fwd

    cfg = model.config
    n_params = stylenet.param_count(cfg)
    return BenchResult(cfg, n_params, stylenet.size_estimate(cfg)[1], resolution,
                       total, fps_end, fps_fwd)


def bench_configs(configs: list[ArchConfig], frames: list[np.ndarray],
                  resolutions: list[tuple[int, int]], loop: int = 1,
                  init_seed: int = 0, progress=None) -> list[BenchResult]:
    results = []
    for cfg in configs:
        model = stylenet.build(cfg, init_seed)
        for res in resolutions:
            out = bench_model(model, frames, res, loop)
            if progress is not None:
                progress(f"alpha={cfg.alpha} beta={cfg.beta} {cfg.variant} "
                         f"{res[0]}x{res[1]}: {out.fps_end_to_end:.2f} fps")
            results.append(out)
    return results


def write_bench_report(results: list[BenchResult], csv_path, plot_path=None) -> Path:
    """CSV rows plus a log-x FPS-versus-parameters figure next to the CSV."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", "variant", "parameters", "size_mb",
                         "resolution", "frames", "fps_end_to_end", "fps_forward", "host"])
        host = platform.machine() or "unknown"
        for r in results:
            writer.writerow([r.config.alpha, r.config.beta, r.config.variant,
                             r.params, f"{r.size_mb:.4f}",
                             f"{r.resolution[0]}x{r.resolution[1]}", r.frames,
                             f"{r.fps_end_to_end:.4f}", f"{r.fps_forward:.4f}", host])

    plot_path = Path(plot_path) if plot_path is not None else csv_path.with_suffix(".png")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    by_res: dict[tuple[int, int], list[BenchResult]] = {}
    for r in results:
        by_res.setdefault(r.resolution, []).append(r)
    for res, rows in sorted(by_res.items()):
        rows = sorted(rows, key=lambda r: r.params)
        ax.plot([r.params for r in rows], [r.fps_end_to_end for r in rows],
                marker="o", label=f"{res[0]}x{res[1]}")
    ax.set_xscale("log")
    ax.set_xlabel("parameters")
    ax.set_ylabel("frames per second")
    ax.set_title("Throughput vs model size")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return plot_path


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""

    def ranks(values):
        values = np.asarray(values, dtype=np.float64)
        order = np.argsort(values, kind="stable")
        r = np.empty(len(values), dtype=np.float64)
        i = 0
        while i < len(values):
            j = i
            while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
                j += 1
            r[order[i:j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom else 0.0


# ---------------------------------------------------------------------------
# Flicker metric
# ---------------------------------------------------------------------------


def flicker_metric(frames: list[np.ndarray], flows: list[FlowField],
                   masks: list[OcclusionMask]) -> float:
    """Mean masked warped MSE between consecutive stylized frames.

    For each pair, mean over traceable pixels and channels of
    (O_t - warp(O_{t-1}))^2; pairs with no traceable pixel contribute 0.
    """
    if len(flows) != len(frames) - 1 or len(masks) != len(flows):
        raise ShapeError(f"{len(frames)} frames need {len(frames) - 1} flows/masks, "
                         f"got {len(flows)}/{len(masks)}")
    values = []
    for t in range(1, len(frames)):
        warped = warp(frames[t - 1], flows[t - 1])
        mask = masks[t - 1].data.astype(np.float64)
        count = mask.sum() * frames[t].shape[0]
        if count == 0:
            values.append(0.0)
            continue
        sq = (frames[t].astype(np.float64) - warped.astype(np.float64)) ** 2
        values.append(float((sq * mask[None]).sum() / count))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------


def write_sequence_dir(seq: SynthSequence, directory) -> None:
    """Write frames/, flows/, masks/ for a synthetic sequence.

    flows/NNNN.flo and masks/NNNN.pgm describe the pair (NNNN-1, NNNN); PGM
    masks store 255 for traceable, 0 for untraceable.
    """
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "flows").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        (directory / "frames" / f"{t:04d}.ppm").write_bytes(write_ppm(frame))
    for t, (flow, mask) in enumerate(zip(seq.flows, seq.masks), start=1):
        (directory / "flows" / f"{t:04d}.flo").write_bytes(write_flo(flow))
        (directory / "masks" / f"{t:04d}.pgm").write_bytes(write_pgm(mask.data * 255))


def load_pair_dataset(directory) -> list[PairSample]:
    """Read a frames/flows/masks directory into consecutive-frame PairSamples."""
    directory = Path(directory)
    seq = open_sequence(directory / "frames")
    frames = seq.load_all()
    pairs = []
    for t in range(1, len(frames)):
        stem = seq.paths[t].stem
        flow_path = directory / "flows" / f"{stem}.flo"
        mask_path = directory / "masks" / f"{stem}.pgm"
        if not flow_path.exists():
            raise DataError(f"missing flow file {flow_path}")
        flow = read_flo(flow_path.read_bytes())
        if mask_path.exists():
            raw = read_pgm(mask_path.read_bytes())
            if not np.isin(raw, (0, 255)).all():
                raise DataError(f"{mask_path}: mask bytes must be 0 or 255")
            mask = OcclusionMask((raw == 255).astype(np.uint8))
        else:
            # no dataset-provided mask: treat everything as traceable
            mask = OcclusionMask(np.ones(flow.shape, dtype=np.uint8))
        pairs.append(PairSample(frames[t - 1], frames[t], flow, mask))
    return pairs


def load_image_dataset(directory) -> list[np.ndarray]:
    """All PPM frames of a directory (for stage-1 training)."""
    sub = Path(directory) / "frames"
    seq = open_sequence(sub if sub.is_dir() else directory)
    return seq.load_all()
