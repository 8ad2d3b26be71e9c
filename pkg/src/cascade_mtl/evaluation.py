"""Per-basin metrics (RMSE, Nash-Sutcliffe efficiency), ECDF and
best-model counts, report containers, and the four ablation runners."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import SplitData, date_range_mask, inject_noise, prepare
from .errors import ConfigError, DataError, ShapeError
from .task_graph import STREAMFLOW
from .training import TrainConfig, ensemble_predict, train

log = logging.getLogger(__name__)

# Ablation axes and their default values.
ABLATION_AXES = {
    "window": (365, 182, 90, 30, 14),      # stride = window // 2
    "stride": (365, 182, 90),              # at window 365
    "train_years": (7, 6, 5, 4, 3, 2),
    "noise": (0.0, 0.01, 0.1, 0.5, 1.0, 2.0),
}


def rmse_basin(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Root of the mean squared error over one basin's series."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"series shapes differ: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise DataError("cannot score an empty series")
    err = y - y_hat
    return float(np.sqrt(np.mean(err * err)))


def nse_basin(y: np.ndarray, y_hat: np.ndarray, ref_mean: float) -> float:
    """1 - SSE(model) / SSE(reference-mean predictor).  ref_mean is the
    basin's training-period mean streamflow."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"series shapes differ: {y.shape} vs {y_hat.shape}")
    denom = float(np.sum((y - ref_mean) ** 2))
    if denom <= 0.0:
        raise DataError("zero variance around the reference mean")
    num = float(np.sum((y - y_hat) ** 2))
    return 1.0 - num / denom


def ecdf(values: Sequence[float]):
    """Empirical CDF points: sorted values with fractions k/n."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("ecdf of an empty sample")
    xs = np.sort(values)
    fractions = np.arange(1, xs.size + 1) / xs.size
    return xs, fractions


def lower_median(values: np.ndarray) -> float:
    """Median with the lower-of-the-two convention for even counts."""
    xs = np.sort(np.asarray(values, dtype=np.float64))
    if xs.size == 0:
        raise DataError("median of an empty sample")
    return float(xs[(xs.size - 1) // 2])


def best_count(nse_by_model: dict, order: Sequence[str]) -> dict:
    """Per model, the number of basins where it has the highest NSE.
    Ties go to the model appearing earlier in `order`."""
    missing = [m for m in order if m not in nse_by_model]
    if missing:
        raise ConfigError(f"no NSE table for models {missing}")
    table = np.stack([np.asarray(nse_by_model[m], dtype=np.float64)
                      for m in order])
    if len({row.shape for row in table}) > 1 or table.ndim != 2:
        raise ShapeError("models disagree on the basin set")
    winners = np.argmax(table, axis=0)  # first max wins ties
    return {m: int(np.sum(winners == i)) for i, m in enumerate(order)}


@dataclass
class EvalReport:
    basin_ids: tuple
    rmse: np.ndarray          # (nb,)
    nse: np.ndarray           # (nb,), NaN where excluded
    metadata: dict = field(default_factory=dict)

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def nse_mean(self) -> float:
        return float(np.nanmean(self.nse))

    @property
    def nse_median(self) -> float:
        return lower_median(self.nse[~np.isnan(self.nse)])

    def ecdf_points(self):
        return ecdf(self.nse[~np.isnan(self.nse)])

    def to_dict(self) -> dict:
        xs, fr = self.ecdf_points()
        return {
            "metadata": self.metadata,
            "aggregates": {"rmse_mean": self.rmse_mean,
                           "nse_mean": self.nse_mean,
                           "nse_median": self.nse_median},
            "per_basin": {bid: {"rmse": float(r),
                                "nse": (None if np.isnan(n) else float(n))}
                          for bid, r, n in zip(self.basin_ids, self.rmse, self.nse)},
            "ecdf": {"nse": xs.tolist(), "fraction": fr.tolist()},
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        with open(out_dir / "per_basin.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["basin_id", "rmse", "nse"])
            for bid, r, n in zip(self.basin_ids, self.rmse, self.nse):
                writer.writerow([bid, repr(float(r)),
                                 "" if np.isnan(n) else repr(float(n))])
        xs, fr = self.ecdf_points()
        with open(out_dir / "ecdf.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["nse", "fraction"])
            for x, f in zip(xs, fr):
                writer.writerow([repr(float(x)), repr(float(f))])


def evaluate_streamflow(view, prediction, train_view, metadata=None) -> EvalReport:
    """Score denormalized streamflow predictions against observations on the
    covered timesteps.  The NSE reference is each basin's training-period
    mean streamflow."""
    covered = prediction.covered
    obs = view.raw_targets[:, :, STREAMFLOW]
    ref_means = train_view.raw_targets[:, :, STREAMFLOW].mean(axis=1)
    rmse = np.empty(view.n_basins)
    nse = np.full(view.n_basins, np.nan)
    for b in range(view.n_basins):
        y = obs[b, covered]
        y_hat = prediction.streamflow[b, covered]
        rmse[b] = rmse_basin(y, y_hat)
        try:
            nse[b] = nse_basin(y, y_hat, float(ref_means[b]))
        except DataError:
            log.warning("basin %s excluded from NSE (zero variance around "
                        "the training mean)", view.basin_ids[b])
    return EvalReport(basin_ids=view.basin_ids, rmse=rmse, nse=nse,
                      metadata=metadata or {})


def train_and_evaluate(records, split_spec, cfg: TrainConfig,
                       noise_level: float = 0.0, noise_seed: int = 0,
                       noise_span: Optional[str] = "both",
                       n_jobs: int = 1, metadata: Optional[dict] = None):
    """Full pipeline for one configuration: optional noise injection,
    normalization, ensemble training, chronological inference, scoring.
    Returns (EvalReport, checkpoints, SplitData)."""
    if noise_level > 0.0:
        spans = {"both": None,
                 "train": (split_spec.train_start, split_spec.val_end),
                 "test": (split_spec.test_start, split_spec.test_end)}
        if noise_span not in spans:
            raise ConfigError(f"noise span must be one of {sorted(spans)}, "
                              f"got {noise_span!r}")
        records = inject_noise(records, noise_level, noise_seed,
                               train_start=split_spec.train_start,
                               train_end=split_spec.train_end,
                               span=spans[noise_span])
    data = prepare(records, split_spec)
    checkpoints = train(data, cfg, n_jobs=n_jobs)
    prediction = ensemble_predict(checkpoints, data.test, cfg.window,
                                  cfg.stride, data.stats)
    meta = {"variant": cfg.variant.value, "window": cfg.window,
            "stride": cfg.stride, "noise_level": noise_level,
            "train_range": [split_spec.train_start, split_spec.train_end]}
    meta.update(metadata or {})
    report = evaluate_streamflow(data.test, prediction, data.train, meta)
    return report, checkpoints, data


@dataclass
class AblationCell:
    value: float
    status: str                     # "ok" or "failed"
    report: Optional[EvalReport] = None
    error: str = ""


@dataclass
class AblationGrid:
    axis: str
    values: tuple
    cells: list

    def to_rows(self) -> list:
        rows = []
        for cell in self.cells:
            if cell.status == "ok":
                rows.append({"value": cell.value, "status": "ok",
                             "rmse_mean": cell.report.rmse_mean,
                             "nse_mean": cell.report.nse_mean,
                             "nse_median": cell.report.nse_median})
            else:
                rows.append({"value": cell.value, "status": "failed",
                             "error": cell.error})
        return rows

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"ablation_{self.axis}.json", "w") as fh:
            json.dump({"axis": self.axis, "values": list(self.values),
                       "cells": self.to_rows()}, fh, indent=2, sort_keys=True)
        with open(out_dir / f"ablation_{self.axis}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "status", "rmse_mean", "nse_mean",
                             "nse_median"])
            for row in self.to_rows():
                writer.writerow([row["value"], row["status"],
                                 row.get("rmse_mean", ""),
                                 row.get("nse_mean", ""),
                                 row.get("nse_median", "")])


def _years_back(end_date: str, years: int) -> str:
    """Start date so that [start, end] spans the last `years` years."""
    start = np.datetime64(end_date, "D") - int(round(365.25 * years)) + 1
    return str(start)


def run_ablation(axis: str, records, split_spec, base_cfg: TrainConfig,
                 values: Optional[Sequence[float]] = None,
                 noise_seed: int = 0, n_jobs: int = 1) -> AblationGrid:
    """Train and evaluate the full ensemble once per axis value, changing
    only that value.  Failed cells are recorded and the grid completes."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"choose from {sorted(ABLATION_AXES)}")
    values = tuple(values if values is not None else ABLATION_AXES[axis])
    cells = []
    for value in values:
        cfg = base_cfg
        spec = split_spec
        noise = 0.0
        if axis == "window":
            w = int(value)
            cfg = dataclasses.replace(base_cfg, window=w, stride=max(1, w // 2))
        elif axis == "stride":
            cfg = dataclasses.replace(base_cfg, stride=int(value))
        elif axis == "train_years":
            new_start = _years_back(split_spec.train_end, int(value))
            spec = dataclasses.replace(split_spec, train_start=new_start)
        elif axis == "noise":
            noise = float(value)
        try:
            report, _, _ = train_and_evaluate(
                records, spec, cfg, noise_level=noise, noise_seed=noise_seed,
                n_jobs=n_jobs, metadata={"ablation_axis": axis,
                                         "ablation_value": value})
            cells.append(AblationCell(value=value, status="ok", report=report))
        except Exception as exc:  # record the failure, keep the grid going
            log.warning("ablation cell %s=%s failed: %s", axis, value, exc)
            cells.append(AblationCell(value=value, status="failed",
                                      error=str(exc)))
    return AblationGrid(axis=axis, values=values, cells=cells)
