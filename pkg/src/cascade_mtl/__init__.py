"""Hierarchical multi-task LSTM streamflow modeling with conditional
mini-batch segmentation: model variants, training, and evaluation."""

from .task_graph import (ModelVariant, Network, TaskGraphConfig, build,
                         forward_segment, backward_segment, param_count)
from .segmentation import make_plan, infer_chronological, reconstruct
from .data import (BasinRecord, RegionSchema, SplitSpec, SynthConfig,
                   load_region, synth_generate, synth_write, inject_noise,
                   fit_norm, prepare)
from .training import TrainConfig, Checkpoint, train, ensemble_predict
from .evaluation import (EvalReport, rmse_basin, nse_basin, ecdf, best_count,
                         run_ablation, train_and_evaluate)

__all__ = [
    "ModelVariant", "Network", "TaskGraphConfig", "build", "forward_segment",
    "backward_segment", "param_count", "make_plan", "infer_chronological",
    "reconstruct", "BasinRecord", "RegionSchema", "SplitSpec", "SynthConfig",
    "load_region", "synth_generate", "synth_write", "inject_noise",
    "fit_norm", "prepare", "TrainConfig", "Checkpoint", "train",
    "ensemble_predict", "EvalReport", "rmse_basin", "nse_basin", "ecdf",
    "best_count", "run_ablation", "train_and_evaluate",
]
