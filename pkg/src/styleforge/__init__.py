"""styleforge: scalable real-time video style transfer.

A width/depth-scalable encoder-decoder stylization network, two-stage
training (perceptual, then temporal fine-tuning on frame pairs with optical
flow and occlusion masks), and a model-size / throughput study harness.
"""

from .errors import StyleForgeError
from .flow import (
    FlowField,
    OcclusionMask,
    downsample_flow,
    downsample_mask,
    occlusion_mask,
    read_flo,
    synth_sequence,
    warp,
    write_flo,
)
from .imageio import read_pgm, read_ppm, resize_bilinear, write_pgm, write_ppm
from .losses import (
    LossWeights,
    StyleTarget,
    content_loss,
    gram,
    style_loss,
    style_target,
    temporal_feature_loss,
    temporal_output_loss,
    total_stage1,
    total_stage2,
    tv_loss,
)
from .perceptual import FeatureExtractor, extract, load_vgg16, tiny_extractor
from .pipeline import bench_configs, flicker_metric, spearman, stylize_array, stylize_dir
from .stylenet import (
    ArchConfig,
    StyleNetModel,
    build,
    forward,
    load,
    param_count,
    reconet_reference_count,
    save,
    size_estimate,
)
from .tensor import ConvSpec, Tensor, conv2d, instance_norm, no_grad, relu, upsample_nearest
from .trainer import AdamState, PairSample, TrainingConfig, adam_step, finetune_stage2, train_stage1

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "AdamState", "ConvSpec", "FeatureExtractor", "FlowField",
    "LossWeights", "OcclusionMask", "PairSample", "StyleForgeError",
    "StyleNetModel", "StyleTarget", "Tensor", "TrainingConfig", "adam_step",
    "bench_configs", "build", "content_loss", "conv2d", "downsample_flow",
    "downsample_mask", "extract", "finetune_stage2", "flicker_metric",
    "forward", "gram", "instance_norm", "load", "load_vgg16", "no_grad",
    "occlusion_mask", "param_count", "read_flo", "read_pgm", "read_ppm",
    "reconet_reference_count", "relu", "resize_bilinear", "save",
    "size_estimate", "spearman", "style_loss", "style_target", "stylize_array",
    "stylize_dir", "synth_sequence", "temporal_feature_loss",
    "temporal_output_loss", "tiny_extractor", "total_stage1", "total_stage2",
    "train_stage1", "tv_loss", "upsample_nearest", "warp", "write_flo",
    "write_pgm", "write_ppm",
]
