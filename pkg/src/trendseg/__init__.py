"""Stock-trend semantic segmentation on OHLC price frames.

A small numpy autodiff engine (:mod:`trendseg.tensor`) drives a parallel
multi-frame ASPP encoder-decoder (:mod:`trendseg.models`) trained to predict
the up/down trend of the next days' open, low, high and close prices.
"""

from .data import PriceSeries, SampleSet, assemble, build_frames, build_mask, load_csv, split_chronological
from .evaluation import MetricsReport, auc_roc, build_report, emit_report
from .models import Checkpoint, ModelConfig, build_model, forward, param_count
from .tensor import Tape, Tensor, backward
from .training import TrainConfig, TrainHistory, evaluate_loss, predict, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "MetricsReport", "ModelConfig", "PriceSeries", "SampleSet", "Tape", "Tensor",
    "TrainConfig", "TrainHistory", "assemble", "auc_roc", "backward", "build_frames", "build_mask",
    "build_model", "build_report", "emit_report", "evaluate_loss", "forward", "load_csv",
    "param_count", "predict", "split_chronological", "train",
]
