"""Loss computation, the epoch loop with validation-based checkpoint
selection, and prediction-space ensembling."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import NormStats, RegionArrays, SplitData, invert_norm
from .errors import ConfigError, ShapeError, TrainingError, UsageError
from .numerics import AdamState, Rng, adam_step, clip_by_global_norm
from .segmentation import (SegmentBatch, covered_mask, extract_training_batches,
                           infer_chronological, make_plan, reconstruct,
                           segment_all)
from .task_graph import (SNOWPACK, SOIL_WATER, STREAMFLOW, TASKS, ModelVariant,
                         Network, SegmentPrediction, TaskGraphConfig,
                         backward_segment, build, config_hash, forward_segment)


@dataclass(frozen=True)
class TrainConfig:
    variant: ModelVariant
    hidden: int = 256
    dropout: float = 0.4
    window: int = 365
    stride: int = 182
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    ensemble_size: int = 6
    base_seed: int = 0
    seeds: Optional[tuple] = None     # explicit member seeds, else derived
    clip_norm: Optional[float] = None
    chained_validation: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        if self.seeds is not None and len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"ensemble seeds must be distinct, got {self.seeds}")

    def member_seeds(self) -> tuple:
        if self.seeds is not None:
            if len(self.seeds) != self.ensemble_size:
                raise ConfigError(f"{len(self.seeds)} seeds for "
                                  f"{self.ensemble_size} members")
            return tuple(self.seeds)
        return tuple(self.base_seed + i for i in range(self.ensemble_size))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("hidden", "dropout", "window", "stride", "lr", "batch_size",
              "epochs", "ensemble_size", "base_seed", "clip_norm",
              "chained_validation")}
        d["variant"] = self.variant.value
        d["seeds"] = list(self.member_seeds())
        return d


@dataclass
class Checkpoint:
    member: int
    epoch: int
    net: Network
    val_mse: float
    config_hash: str

    def __post_init__(self):
        if not np.isfinite(self.val_mse):
            raise TrainingError(f"checkpoint with non-finite validation MSE "
                                f"(member {self.member}, epoch {self.epoch})")


def segment_loss(preds: SegmentPrediction, targets: np.ndarray,
                 variant: ModelVariant) -> float:
    """Squared error summed over timesteps and tasks, averaged over the
    segments in the batch.  Tasks are equally weighted; STL uses streamflow
    only."""
    if targets.ndim != 3 or targets.shape[2] != 3:
        raise ShapeError(f"targets must be (B, t, 3), got {targets.shape}")
    by_task = preds.by_task()
    batch = targets.shape[0]
    total = 0.0
    for idx in variant.task_indices:
        err = by_task[idx] - targets[:, :, idx]
        if err.shape != targets.shape[:2]:
            raise ShapeError(f"prediction for {TASKS[idx]} has shape "
                             f"{by_task[idx].shape}, targets {targets.shape[:2]}")
        total += float(np.sum(err * err))
    return total / batch


def loss_residuals(preds: SegmentPrediction, targets: np.ndarray,
                   variant: ModelVariant) -> dict:
    """dLoss/dPrediction per trained task for segment_loss."""
    by_task = preds.by_task()
    batch = targets.shape[0]
    return {idx: 2.0 * (by_task[idx] - targets[:, :, idx]) / batch
            for idx in variant.task_indices}


def validation_mse(net: Network, view: RegionArrays, cfg: TrainConfig) -> float:
    """Mean segment loss over all validation segments, observed inits."""
    plan = make_plan(view.inputs.shape[1], cfg.window, cfg.stride)
    if cfg.chained_validation:
        seg_preds = infer_chronological(net, view.inputs, view.targets, plan)
        total, count = 0.0, 0
        by_task = seg_preds.by_task()
        starts = np.asarray(plan.starts)
        offs = starts[:, None] + np.arange(plan.window)[None, :]
        for idx in cfg.variant.task_indices:
            err = by_task[idx] - view.targets[:, offs, idx]
            total += float(np.sum(err * err))
        count = view.n_basins * plan.n_segments
        return total / count
    batch = segment_all(view.inputs, view.targets, plan)
    preds, _ = forward_segment(net, batch.x, inits=batch.inits, mode="infer")
    return segment_loss(preds, batch.y, cfg.variant)


def _param_and_grad_pairs(net, grads):
    for name, module in net.modules.items():
        g = grads.modules[name]
        for key, arr in module.lstm.arrays().items():
            yield f"{name}.lstm.{key}", arr, g.lstm_arrays()[key]
        for key, arr in module.head.arrays().items():
            yield f"{name}.head.{key}", arr, g.head_arrays()[key]


def train_member(data: SplitData, cfg: TrainConfig, member: int, seed: int,
                 log_records: Optional[list] = None) -> Checkpoint:
    """Train one ensemble member; returns the lowest-validation-MSE
    checkpoint."""
    input_dim = data.train.input_dim
    net_cfg = TaskGraphConfig(variant=cfg.variant, input_dim=input_dim,
                              hidden=cfg.hidden, dropout=cfg.dropout, seed=seed)
    net = build(net_cfg)
    plan = make_plan(data.train.inputs.shape[1], cfg.window, cfg.stride)
    rng = Rng(seed)
    states = {name: AdamState.for_param(arr, lr=cfg.lr)
              for name, arr in net.arrays().items()}
    chash = config_hash(cfg.to_dict())

    best: Optional[Checkpoint] = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        epoch_rng = rng.child(100, epoch)
        dropout_rng = rng.child(200, epoch)
        batch_losses = []
        for bi, batch in enumerate(extract_training_batches(
                data.train.inputs, data.train.targets, plan,
                cfg.batch_size, epoch_rng)):
            preds, traces = forward_segment(net, batch.x, inits=batch.inits,
                                            mode="train", rng=dropout_rng)
            loss = segment_loss(preds, batch.y, cfg.variant)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at member {member}, epoch {epoch}, "
                    f"batch {bi}; param norm "
                    f"{np.sqrt(sum(float(np.sum(a * a)) for a in net.arrays().values())):.3e}")
            grads = backward_segment(net, traces,
                                     loss_residuals(preds, batch.y, cfg.variant))
            if cfg.clip_norm is not None:
                clip_by_global_norm([g for _, _, g in
                                     _param_and_grad_pairs(net, grads)],
                                    cfg.clip_norm)
            for name, param, grad in _param_and_grad_pairs(net, grads):
                adam_step(param, grad, states[name],
                          context=f" ({name}, member {member}, epoch {epoch})")
            batch_losses.append(loss)
        val = validation_mse(net, data.val, cfg)
        if log_records is not None:
            log_records.append({"member": member, "epoch": epoch,
                                "train_mse": float(np.mean(batch_losses)),
                                "val_mse": float(val),
                                "wall_time_s": time.perf_counter() - t0})
        if best is None or val < best.val_mse:
            best = Checkpoint(member=member, epoch=epoch, net=net.copy(),
                              val_mse=float(val), config_hash=chash)
    return best


def train(data: SplitData, cfg: TrainConfig, log_path=None,
          n_jobs: int = 1) -> list:
    """Train the whole ensemble; one best checkpoint per member.

    Members are independent given their seeds, so results do not depend on
    n_jobs."""
    seeds = cfg.member_seeds()
    log_records: list = []
    if n_jobs != 1 and len(seeds) > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(
            delayed(_train_member_logged)(data, cfg, m, s)
            for m, s in enumerate(seeds))
        checkpoints = [c for c, _ in results]
        for _, recs in results:
            log_records.extend(recs)
    else:
        checkpoints = []
        for m, s in enumerate(seeds):
            checkpoints.append(train_member(data, cfg, m, s, log_records))
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in log_records:
                fh.write(json.dumps(rec) + "\n")
    return checkpoints


def _train_member_logged(data, cfg, member, seed):
    recs: list = []
    ckpt = train_member(data, cfg, member, seed, recs)
    return ckpt, recs


@dataclass
class EnsemblePrediction:
    """Denormalized member-averaged series per task; NaN where uncovered."""

    basin_ids: tuple
    dates: np.ndarray
    streamflow: np.ndarray           # (nb, T)
    soil_water: Optional[np.ndarray]
    snowpack: Optional[np.ndarray]
    covered: np.ndarray              # (T,) bool


def ensemble_predict(checkpoints: Sequence[Checkpoint], view: RegionArrays,
                     window: int, stride: int,
                     stats: NormStats) -> EnsemblePrediction:
    """Each member chains and reconstructs its own predictions; the final
    series is the member mean, denormalized afterwards."""
    if not checkpoints:
        raise UsageError("need at least one checkpoint")
    hashes = {c.config_hash for c in checkpoints}
    if len(hashes) > 1:
        raise UsageError(f"checkpoints from different configs: {sorted(hashes)}")
    plan = make_plan(view.inputs.shape[1], window, stride)
    sums = {}
    for ckpt in checkpoints:
        seg_preds = infer_chronological(ckpt.net, view.inputs, view.targets, plan)
        for idx, seg in seg_preds.by_task().items():
            series = reconstruct(plan, seg)
            sums[idx] = sums.get(idx, 0.0) + series
    n = len(checkpoints)
    mean = {idx: total / n for idx, total in sums.items()}
    denorm = {idx: invert_norm(arr, stats.target_mean[idx], stats.target_std[idx])
              for idx, arr in mean.items()}
    return EnsemblePrediction(
        basin_ids=view.basin_ids, dates=view.dates,
        streamflow=denorm[STREAMFLOW],
        soil_water=denorm.get(SOIL_WATER),
        snowpack=denorm.get(SNOWPACK),
        covered=covered_mask(plan))
