"""UNet burn scar segmentation on stacked RGB+NIR rasters, built on a small
numpy autodiff core, with a synthetic noisy-label benchmark."""

from .errors import (BurnSegError, CheckpointFormatError, ConfigError, ContractError, DataError,
                     EmptyTapeError, LoadError, NumericError, ShapeError, TilingError)
from .tensor import Rng, Tape, Tensor, backward, grad_check, shadow64
from .unet import UNetConfig, UNetModel, build, forward
from .training import TrainConfig, TrainHistory, TrainState, bce_loss, fit
from .synth import SynthConfig, corrupt_labels, synth_dataset, synth_scene
from .evaluation import MetricsReport, RecoveryReport, compute_metrics, predict_scene, recovery_experiment, threshold
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
