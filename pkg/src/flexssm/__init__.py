"""Flexible spatio-temporal training for selective-scan video models, sized for a CPU."""
from .embed import build_resize_1d, build_resize_2d, flex_kernel, flex_pos_embed, flex_temp_embed
from .evaluate import estimate_flops, extract_features, linear_probe, retrieval_top1, sweep
from .flex import STRATEGIES, FlexConfig, FlexSets, patch_for_grid, sample_flex
from .model import ModelDims, ParamStore, forward, init_params, load_checkpoint, save_checkpoint
from .synth import CLASSES, DatasetManifest, MotionClip, generate, rasterize
from .tensor import Tape, Tensor, gradcheck, precision
from .train import TrainConfig

__version__ = "0.1.0"
