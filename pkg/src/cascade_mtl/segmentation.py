"""Sliding-window segmentation of long daily series, conditional-init
extraction, chronological inference with prediction chaining, and
overlap-aware reconstruction.

Segment starts begin at index 1 so that an observed value at start-1
always exists.  Where segments overlap, the value for a timestep is taken
from the covering segment in which that timestep sits at the largest
offset (the segment that has seen the most context by then); reconstruction
and init chaining both use this rule, so the init consumed by a segment
always equals the reconstructed prediction at its start-1.
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, PlanningError, ReconstructionError
from .numerics import Rng
from .task_graph import (MODULE_TASK, SNOWPACK, SOIL_WATER, STREAMFLOW,
                         Network, SegmentPrediction, forward_segment)


@dataclass(frozen=True)
class SegmentPlan:
    window: int
    stride: int
    length: int           # T of the series being segmented
    starts: tuple         # ascending start indices, first is always 1

    @property
    def n_segments(self) -> int:
        return len(self.starts)

    @property
    def covered_stop(self) -> int:
        """Exclusive end of the covered index range [1, covered_stop)."""
        return self.starts[-1] + self.window

    def covering_segment(self, t: int) -> int:
        """Index of the covering segment where t has maximal offset
        (i.e. the earliest covering segment)."""
        if not 1 <= t < self.covered_stop:
            raise ReconstructionError(f"index {t} outside covered range "
                                      f"[1, {self.covered_stop})")
        # earliest start with start > t - window, clipped to starts <= t
        k = bisect_right(self.starts, t - self.window)
        if self.starts[k] > t:
            raise ReconstructionError(f"coverage gap at index {t}")
        return k


def make_plan(t_total: int, window: int, stride: int) -> SegmentPlan:
    """Full windows only: starts 1, 1+s, ... while start <= T - w."""
    if window < 1 or stride < 1:
        raise ConfigError(f"window and stride must be >= 1, got {window}, {stride}")
    if stride > window:
        raise ConfigError(f"stride {stride} larger than window {window} "
                          "would leave coverage gaps")
    if t_total < window + 1:
        raise PlanningError(f"series length {t_total} too short for window "
                            f"{window} plus one init step")
    starts = tuple(range(1, t_total - window + 1, stride))
    return SegmentPlan(window=window, stride=stride, length=t_total, starts=starts)


@dataclass
class SegmentBatch:
    """One training mini-batch of segment samples."""

    basin_idx: np.ndarray   # (B,)
    starts: np.ndarray      # (B,)
    x: np.ndarray           # (B, w, D) normalized inputs
    y: np.ndarray           # (B, w, 3) normalized targets
    inits: np.ndarray       # (B, 3) observed targets at start-1


def extract_training_batches(inputs: np.ndarray, targets: np.ndarray,
                             plan: SegmentPlan, batch_size: int,
                             rng: Rng) -> Iterator[SegmentBatch]:
    """Shuffle all (basin, start) pairs globally and yield mini-batches.

    inputs (nb, T, D) and targets (nb, T, 3) must be normalized; init
    values are read from the observed target rows at start-1.  The last
    batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    nb = inputs.shape[0]
    if targets.shape[:2] != inputs.shape[:2]:
        raise ConfigError(f"inputs {inputs.shape} and targets {targets.shape} "
                          "disagree on basins/length")
    if inputs.shape[1] != plan.length:
        raise PlanningError(f"plan built for length {plan.length}, "
                            f"data has {inputs.shape[1]}")
    starts = np.asarray(plan.starts)
    pairs_basin = np.repeat(np.arange(nb), len(starts))
    pairs_start = np.tile(starts, nb)
    order = rng.permutation(len(pairs_basin))
    pairs_basin, pairs_start = pairs_basin[order], pairs_start[order]

    w = plan.window
    for lo in range(0, len(pairs_basin), batch_size):
        b = pairs_basin[lo:lo + batch_size]
        s = pairs_start[lo:lo + batch_size]
        offs = s[:, None] + np.arange(w)[None, :]
        yield SegmentBatch(
            basin_idx=b, starts=s,
            x=inputs[b[:, None], offs],
            y=targets[b[:, None], offs],
            inits=targets[b, s - 1],
        )


def segment_all(inputs: np.ndarray, targets: np.ndarray,
                plan: SegmentPlan) -> SegmentBatch:
    """Every (basin, start) pair in deterministic order, as one batch.
    Used for validation passes with observed init values."""
    nb = inputs.shape[0]
    starts = np.asarray(plan.starts)
    b = np.repeat(np.arange(nb), len(starts))
    s = np.tile(starts, nb)
    offs = s[:, None] + np.arange(plan.window)[None, :]
    return SegmentBatch(basin_idx=b, starts=s, x=inputs[b[:, None], offs],
                        y=targets[b[:, None], offs], inits=targets[b, s - 1])


@dataclass
class SegmentPredictions:
    """Per-segment predictions for every basin, normalized space.

    Arrays are (nb, n_segments, w); sw/sno are None for STL."""

    plan: SegmentPlan
    sf: np.ndarray
    sw: Optional[np.ndarray]
    sno: Optional[np.ndarray]

    def by_task(self) -> dict:
        out = {STREAMFLOW: self.sf}
        if self.sw is not None:
            out[SOIL_WATER] = self.sw
        if self.sno is not None:
            out[SNOWPACK] = self.sno
        return out


def infer_chronological(net: Network, inputs: np.ndarray, targets: np.ndarray,
                        plan: SegmentPlan) -> SegmentPredictions:
    """Predict every segment, processing segment starts in ascending order
    with all basins batched together per start.

    For conditional variants, the init for a segment starting at tau is the
    prediction at tau-1 taken from the covering earlier segment where tau-1
    has maximal offset; the very first segment uses the observed value at
    index 0.  Unconditional variants get the same loop (order then does not
    affect their output)."""
    nb, t_total, _ = inputs.shape
    if t_total != plan.length:
        raise PlanningError(f"plan length {plan.length} != series length {t_total}")
    w = plan.window
    conditional = net.config.variant.conditional_init
    sf = np.full((nb, plan.n_segments, w), np.nan)
    has_inter = len(net.config.variant.task_indices) == 3
    sw = np.full((nb, plan.n_segments, w), np.nan) if has_inter else None
    sno = np.full((nb, plan.n_segments, w), np.nan) if has_inter else None
    preds_by_task = {STREAMFLOW: sf, SOIL_WATER: sw, SNOWPACK: sno}

    for k, start in enumerate(plan.starts):
        inits = None
        if conditional:
            if k == 0:
                inits = targets[:, start - 1].copy()
            else:
                j = plan.covering_segment(start - 1)
                off = start - 1 - plan.starts[j]
                inits = np.stack([preds_by_task[SNOWPACK][:, j, off],
                                  preds_by_task[SOIL_WATER][:, j, off],
                                  preds_by_task[STREAMFLOW][:, j, off]], axis=1)
        x = inputs[:, start:start + w]
        pred, _ = forward_segment(net, x, inits=inits, mode="infer")
        sf[:, k] = pred.sf
        if sw is not None and pred.sw is not None:
            sw[:, k] = pred.sw
            sno[:, k] = pred.sno
    return SegmentPredictions(plan=plan, sf=sf, sw=sw, sno=sno)


def reconstruct(plan: SegmentPlan, seg_values: np.ndarray) -> np.ndarray:
    """Stitch per-segment predictions back into full-length series.

    seg_values: (..., n_segments, w).  Output (..., T) with NaN at index 0
    and past the covered range; each covered timestep comes from the
    covering segment where it has maximal offset."""
    seg_values = np.asarray(seg_values)
    if seg_values.shape[-2:] != (plan.n_segments, plan.window):
        raise ReconstructionError(
            f"expected (..., {plan.n_segments}, {plan.window}) predictions, "
            f"got {seg_values.shape}")
    out = np.full(seg_values.shape[:-2] + (plan.length,), np.nan)
    # Later segments first; earlier (maximal-offset) segments overwrite.
    for k in range(plan.n_segments - 1, -1, -1):
        s = plan.starts[k]
        out[..., s:s + plan.window] = seg_values[..., k, :]
    return out


def covered_mask(plan: SegmentPlan) -> np.ndarray:
    """Boolean mask over [0, T): True where reconstruction is defined."""
    mask = np.zeros(plan.length, dtype=bool)
    mask[1:plan.covered_stop] = True
    return mask


def write_predictions_csv(path, dates, sf_obs, sf_pred, sw_pred=None,
                          sno_pred=None) -> None:
    """Per-basin prediction export, denormalized values.  NaNs (uncovered
    indices) are written as empty fields."""

    def fmt(v):
        return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))

    n = len(dates)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "sf_obs", "sf_pred", "sw_pred", "sno_pred"])
        for i in range(n):
            writer.writerow([
                str(dates[i])[:10],
                fmt(float(sf_obs[i])),
                fmt(float(sf_pred[i])),
                fmt(float(sw_pred[i])) if sw_pred is not None else "",
                fmt(float(sno_pred[i])) if sno_pred is not None else "",
            ])
