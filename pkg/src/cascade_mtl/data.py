"""Dataset schema, CSV ingestion, regional normalization, date splits,
noise injection, and a synthetic bucket-hydrology generator for
desk-scale verification.

On-disk layout of a region directory:
    static_attributes.csv      basin_id,<attr...>
    <basin_id>.csv             date,<forcing...>,snowpack,soil_water,streamflow
Dates are ISO-8601 daily with no gaps.  Synthetic datasets are written in
the identical format, so every downstream path is format-agnostic.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .numerics import Rng
from .task_graph import SNOWPACK, SOIL_WATER, STREAMFLOW, TASKS

log = logging.getLogger(__name__)

STATIC_FILE = "static_attributes.csv"
TARGET_COLUMNS = ("snowpack", "soil_water", "streamflow")


@dataclass
class BasinRecord:
    basin_id: str
    static_attrs: np.ndarray   # (A,)
    forcings: np.ndarray       # (T, F)
    targets: np.ndarray        # (T, 3) in TASKS order
    dates: np.ndarray          # (T,) datetime64[D]

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def copy(self) -> "BasinRecord":
        return BasinRecord(self.basin_id, self.static_attrs.copy(),
                           self.forcings.copy(), self.targets.copy(),
                           self.dates.copy())


@dataclass(frozen=True)
class RegionSchema:
    """Column names expected in basin CSVs; targets in canonical order."""

    date_column: str = "date"
    forcing_columns: Optional[tuple] = None   # None: every non-date, non-target column
    target_columns: tuple = TARGET_COLUMNS


def load_region(path, schema: RegionSchema = RegionSchema()) -> list:
    """Read one region directory into BasinRecords.

    Basins are enumerated from the static-attributes file; every basin must
    have a complete, gap-free daily CSV.  Unknown columns are ignored with
    a warning."""
    path = Path(path)
    static_path = path / STATIC_FILE
    if not static_path.exists():
        raise DataError(f"missing {static_path}")
    static = pd.read_csv(static_path)
    if "basin_id" not in static.columns:
        raise DataError(f"{static_path} has no basin_id column")
    attr_names = [c for c in static.columns if c != "basin_id"]

    records = []
    for _, row in static.iterrows():
        basin_id = str(row["basin_id"])
        basin_path = path / f"{basin_id}.csv"
        if not basin_path.exists():
            raise DataError(f"missing basin file {basin_path}")
        df = pd.read_csv(basin_path)
        if schema.date_column not in df.columns:
            raise DataError(f"{basin_path}: missing column {schema.date_column!r}")
        for col in schema.target_columns:
            if col not in df.columns:
                raise DataError(f"{basin_path}: missing target column {col!r}")
        if schema.forcing_columns is None:
            forcing_cols = [c for c in df.columns
                            if c != schema.date_column and c not in schema.target_columns]
        else:
            forcing_cols = list(schema.forcing_columns)
            missing = [c for c in forcing_cols if c not in df.columns]
            if missing:
                raise DataError(f"{basin_path}: missing forcing columns {missing}")
            extra = [c for c in df.columns if c != schema.date_column
                     and c not in forcing_cols and c not in schema.target_columns]
            if extra:
                log.warning("%s: ignoring unknown columns %s", basin_path, extra)

        dates = pd.to_datetime(df[schema.date_column]).values.astype("datetime64[D]")
        gaps = np.diff(dates).astype(int)
        bad = np.nonzero(gaps != 1)[0]
        if bad.size:
            i = int(bad[0])
            raise DataError(f"{basin_path}: date gap between {dates[i]} "
                            f"and {dates[i + 1]} (row {i + 2})")
        forcings = df[forcing_cols].to_numpy(dtype=np.float64)
        targets = df[list(schema.target_columns)].to_numpy(dtype=np.float64)
        if np.isnan(forcings).any() or np.isnan(targets).any():
            col = ([c for c in forcing_cols if df[c].isna().any()]
                   + [c for c in schema.target_columns if df[c].isna().any()])
            raise DataError(f"{basin_path}: missing values in columns {col}")
        records.append(BasinRecord(
            basin_id=basin_id,
            static_attrs=row[attr_names].to_numpy(dtype=np.float64),
            forcings=forcings, targets=targets, dates=dates))

    lengths = {r.n_days for r in records}
    if len(lengths) > 1:
        raise DataError(f"basins disagree on series length: {sorted(lengths)}")
    spans = {(str(r.dates[0]), str(r.dates[-1])) for r in records}
    if len(spans) > 1:
        raise DataError(f"basins disagree on date span: {sorted(spans)}")
    return records


def write_region(path, records: Sequence[BasinRecord],
                 forcing_names: Sequence[str], attr_names: Sequence[str]) -> None:
    """Write records in the ingestion format (full float precision)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / STATIC_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["basin_id", *attr_names])
        for rec in records:
            writer.writerow([rec.basin_id, *[repr(float(v)) for v in rec.static_attrs]])
    for rec in records:
        with open(path / f"{rec.basin_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["date", *forcing_names, *TARGET_COLUMNS])
            for i in range(rec.n_days):
                row = [str(rec.dates[i])]
                row += [repr(float(v)) for v in rec.forcings[i]]
                row += [repr(float(v)) for v in rec.targets[i]]
                writer.writerow(row)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Regional z-score statistics, fit on the training span only."""

    forcing_mean: np.ndarray
    forcing_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray
    target_mean: np.ndarray   # (3,)
    target_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: list(map(float, getattr(self, k)))
                for k in ("forcing_mean", "forcing_std", "static_mean",
                          "static_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _check_std(std: np.ndarray, what: str) -> None:
    flat = np.atleast_1d(std)
    bad = np.nonzero(flat <= 0)[0]
    if bad.size:
        raise ConfigError(f"constant {what} channel(s) at index {bad.tolist()}; "
                          "cannot z-score a zero-variance channel")


def date_range_mask(dates: np.ndarray, start, end) -> np.ndarray:
    """Inclusive [start, end] mask over a datetime64[D] axis."""
    lo = np.datetime64(start, "D")
    hi = np.datetime64(end, "D")
    return (dates >= lo) & (dates <= hi)


def fit_norm(records: Sequence[BasinRecord], train_start, train_end) -> NormStats:
    """Region-wide mean/std from the training date range only."""
    mask = date_range_mask(records[0].dates, train_start, train_end)
    if not mask.any():
        raise ConfigError(f"training range {train_start}..{train_end} selects no rows")
    forc = np.concatenate([r.forcings[mask] for r in records], axis=0)
    targ = np.concatenate([r.targets[mask] for r in records], axis=0)
    stat = np.stack([r.static_attrs for r in records], axis=0)
    stats = NormStats(
        forcing_mean=forc.mean(axis=0), forcing_std=forc.std(axis=0),
        static_mean=stat.mean(axis=0), static_std=stat.std(axis=0),
        target_mean=targ.mean(axis=0), target_std=targ.std(axis=0))
    _check_std(stats.forcing_std, "forcing")
    _check_std(stats.static_std, "static attribute")
    _check_std(stats.target_std, "target")
    return stats


def apply_norm(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (values - mean) / std


def invert_norm(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


# ---------------------------------------------------------------------------
# Model-ready arrays and date splits
# ---------------------------------------------------------------------------

@dataclass
class RegionArrays:
    """Normalized model inputs/targets for a whole region.

    inputs stacks normalized static attributes (broadcast per day) with
    normalized forcings: D = A + F."""

    basin_ids: tuple
    inputs: np.ndarray        # (nb, T, D)
    targets: np.ndarray       # (nb, T, 3) normalized
    raw_targets: np.ndarray   # (nb, T, 3) original units
    dates: np.ndarray         # (T,)

    @property
    def n_basins(self) -> int:
        return len(self.basin_ids)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[2]

    def slice_days(self, lo: int, hi: int) -> "RegionArrays":
        return RegionArrays(self.basin_ids, self.inputs[:, lo:hi],
                            self.targets[:, lo:hi], self.raw_targets[:, lo:hi],
                            self.dates[lo:hi])


def build_arrays(records: Sequence[BasinRecord], stats: NormStats) -> RegionArrays:
    nb = len(records)
    t_total = records[0].n_days
    forc = np.stack([apply_norm(r.forcings, stats.forcing_mean, stats.forcing_std)
                     for r in records])
    stat = np.stack([apply_norm(r.static_attrs, stats.static_mean, stats.static_std)
                     for r in records])
    stat_rep = np.repeat(stat[:, None, :], t_total, axis=1)
    inputs = np.concatenate([stat_rep, forc], axis=2)
    targets = np.stack([apply_norm(r.targets, stats.target_mean, stats.target_std)
                        for r in records])
    raw = np.stack([r.targets for r in records])
    return RegionArrays(basin_ids=tuple(r.basin_id for r in records),
                        inputs=inputs, targets=targets, raw_targets=raw,
                        dates=records[0].dates)


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive train/val/test date ranges; must be disjoint and ordered."""

    train_start: str
    train_end: str
    val_start: str
    val_end: str
    test_start: str
    test_end: str

    def __post_init__(self):
        keys = [self.train_start, self.train_end, self.val_start,
                self.val_end, self.test_start, self.test_end]
        days = [np.datetime64(k, "D") for k in keys]
        if not all(days[i] < days[i + 1] for i in range(5)):
            raise ConfigError(f"split ranges must be ordered and disjoint: {keys}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("train_start", "train_end", "val_start", "val_end",
                 "test_start", "test_end")}


@dataclass
class SplitData:
    """Views over a region's arrays.  val/test each keep one preceding
    observed day at index 0, used only as an init source; segments start at
    index 1 in every view."""

    train: RegionArrays
    val: RegionArrays
    test: RegionArrays
    stats: NormStats
    spec: SplitSpec


def split(arrays: RegionArrays, spec: SplitSpec) -> SplitData:
    dates = arrays.dates

    def bounds(start, end, keep_preceding):
        mask = date_range_mask(dates, start, end)
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            raise ConfigError(f"range {start}..{end} outside record span "
                              f"{dates[0]}..{dates[-1]}")
        if str(np.datetime64(start, 'D')) != str(dates[idx[0]]) \
                or str(np.datetime64(end, 'D')) != str(dates[idx[-1]]):
            raise ConfigError(f"range {start}..{end} not fully inside record span")
        lo = idx[0] - 1 if keep_preceding and idx[0] > 0 else idx[0]
        return lo, idx[-1] + 1

    views = {}
    for name, (s, e) in {"train": (spec.train_start, spec.train_end),
                         "val": (spec.val_start, spec.val_end),
                         "test": (spec.test_start, spec.test_end)}.items():
        lo, hi = bounds(s, e, keep_preceding=name in ("val", "test"))
        views[name] = arrays.slice_days(lo, hi)
    return SplitData(train=views["train"], val=views["val"], test=views["test"],
                     stats=None, spec=spec)


def prepare(records: Sequence[BasinRecord], spec: SplitSpec) -> SplitData:
    """fit_norm on the training range, build arrays, split."""
    stats = fit_norm(records, spec.train_start, spec.train_end)
    arrays = build_arrays(records, stats)
    out = split(arrays, spec)
    out.stats = stats
    return out


# ---------------------------------------------------------------------------
# Noise injection (intermediate target corruption)
# ---------------------------------------------------------------------------

NOISE_CHANNELS = ("soil_water", "snowpack")


def inject_noise(records: Sequence[BasinRecord], level: float, seed: int,
                 train_start=None, train_end=None,
                 channels: Sequence[str] = NOISE_CHANNELS,
                 span=None) -> list:
    """Return corrupted copies of the records.

    Per basin and channel, adds level * sigma_b * N(0,1) at every step,
    where sigma_b is that basin's own std of the channel over the training
    range (whole series when no range is given).  Streamflow is never a
    valid channel.  `span`, when given as (start, end), restricts the
    corrupted rows (train-only / test-only injection)."""
    if level < 0:
        raise ConfigError(f"noise level must be >= 0, got {level}")
    for ch in channels:
        if ch == "streamflow":
            raise ConfigError("streamflow is observed and never corrupted")
        if ch not in TASKS:
            raise ConfigError(f"unknown noise channel {ch!r}")
    out = [r.copy() for r in records]
    if level == 0:
        return out
    rng = Rng(seed)
    idxs = [TASKS.index(ch) for ch in channels]
    for bi, rec in enumerate(out):
        if train_start is not None:
            sigma_mask = date_range_mask(rec.dates, train_start, train_end)
        else:
            sigma_mask = np.ones(rec.n_days, dtype=bool)
        rows = (date_range_mask(rec.dates, *span) if span is not None
                else np.ones(rec.n_days, dtype=bool))
        r = rng.child(bi)
        for ci, ch_idx in enumerate(idxs):
            sigma = float(rec.targets[sigma_mask, ch_idx].std())
            noise = r.child(ci).normal(int(rows.sum()))
            rec.targets[rows, ch_idx] += level * sigma * noise
    return out


# ---------------------------------------------------------------------------
# Synthetic conceptual-hydrology generator
# ---------------------------------------------------------------------------

SYNTH_FORCINGS = ("precip", "pet", "temp_mean", "solar_rad", "wind_speed",
                  "pressure")
SYNTH_ATTRS = ("p_mean", "pet_mean", "aridity", "frac_snow", "elevation_m",
               "slope_deg", "basin_area_km2", "clay_frac", "sand_frac",
               "soil_capacity_mm")


@dataclass(frozen=True)
class SynthConfig:
    n_basins: int
    n_days: int
    seed: int = 0
    start_date: str = "1989-01-01"

    def __post_init__(self):
        if self.n_basins < 1:
            raise ConfigError(f"n_basins must be >= 1, got {self.n_basins}")
        if self.n_days < 2:
            raise ConfigError(f"n_days must be >= 2, got {self.n_days}")


@dataclass
class BasinSim:
    """One simulated basin plus the bookkeeping needed for balance checks."""

    forcings: np.ndarray    # (T, 6) in SYNTH_FORCINGS order
    targets: np.ndarray     # (T, 3): snowpack mm, soil fraction, flow mm/day
    et: np.ndarray          # (T,) actual evapotranspiration, mm
    soil_capacity: float
    snow_init: float
    soil_init: float

    def water_balance_residual(self) -> float:
        """cum precip - cum(ET + flow) - delta(snow + soil storage), mm."""
        precip = self.forcings[:, 0].sum()
        outflow = self.et.sum() + self.targets[:, STREAMFLOW].sum()
        snow_end = self.targets[-1, SNOWPACK]
        soil_end = self.targets[-1, SOIL_WATER] * self.soil_capacity
        storage = (snow_end + soil_end) - (self.snow_init + self.soil_init)
        return float(precip - outflow - storage)


def _sample_basin_params(rng: Rng) -> dict:
    elevation = rng.uniform(100.0, 2500.0)
    slope = rng.uniform(2.0, 30.0)
    return {
        "elevation": elevation,
        "slope": slope,
        "t_mean": 13.0 - 0.004 * elevation + rng.uniform(-1.0, 1.0),
        "t_amp": rng.uniform(8.0, 14.0),
        "t_phase": rng.uniform(0.0, 30.0),
        "t_noise": rng.uniform(1.5, 3.0),
        "t_snow": rng.uniform(-1.5, 1.5),
        "k_melt": rng.uniform(1.5, 4.0),
        "s_max": rng.uniform(120.0, 350.0),
        "k_base": 0.015 + 0.002 * slope,
        "et_eff": rng.uniform(0.4, 0.9),
        "pet_rate": rng.uniform(0.10, 0.20),
        "wet_prob": rng.uniform(0.25, 0.45),
        "p_mean": rng.uniform(1.5, 4.0),
        "area": rng.uniform(50.0, 2000.0),
        "clay": rng.uniform(0.05, 0.45),
        "sand": rng.uniform(0.1, 0.6),
        # measurement error on the emitted forcing columns; the buckets are
        # driven by the true series
        "p_obs_sigma": rng.uniform(0.25, 0.45),
        "t_obs_sigma": rng.uniform(0.8, 1.6),
        "pet_obs_sigma": rng.uniform(0.15, 0.25),
    }


def simulate_basin(params: dict, n_days: int, rng: Rng) -> BasinSim:
    """Daily two-bucket simulation: a snow store fed when temperature is
    below the snow threshold and drained by degree-day melt, and a soil
    store drained by evapotranspiration, capacity overflow, and linear
    baseflow.  Streamflow = overflow + baseflow."""
    day = np.arange(n_days)
    season = np.sin(2.0 * np.pi * (day - params["t_phase"] - 91.0) / 365.25)
    temp = params["t_mean"] + params["t_amp"] * season \
        + params["t_noise"] * rng.normal(n_days)
    wet = rng.uniform(0.0, 1.0, n_days) < params["wet_prob"]
    # exponential wet-day amounts with overall mean p_mean
    scale = params["p_mean"] / params["wet_prob"]
    amounts = -scale * np.log(1.0 - rng.uniform(0.0, 1.0, n_days))
    precip = np.where(wet, amounts, 0.0)
    pet = params["pet_rate"] * np.maximum(temp, 0.0)
    solar = 180.0 + 120.0 * season + 15.0 * rng.normal(n_days)
    wind = np.abs(3.0 + rng.normal(n_days))
    pressure = 95.0 + 0.5 * rng.normal(n_days)

    s_max = params["s_max"]
    snow = 0.0
    soil = 0.5 * s_max
    snow_init, soil_init = snow, soil
    snow_out = np.empty(n_days)
    soil_out = np.empty(n_days)
    flow_out = np.empty(n_days)
    et_out = np.empty(n_days)
    for t in range(n_days):
        if temp[t] < params["t_snow"]:
            snowfall, rain = precip[t], 0.0
        else:
            snowfall, rain = 0.0, precip[t]
        snow += snowfall
        melt = min(snow, params["k_melt"] * max(0.0, temp[t] - params["t_snow"]))
        snow -= melt
        soil += rain + melt
        et = min(soil, params["et_eff"] * pet[t])
        soil -= et
        overflow = max(0.0, soil - s_max)
        soil -= overflow
        base = params["k_base"] * soil
        soil -= base
        snow_out[t] = snow
        soil_out[t] = soil / s_max
        flow_out[t] = overflow + base
        et_out[t] = et

    forcings = np.stack([precip, pet, temp, solar, wind, pressure], axis=1)
    targets = np.stack([snow_out, soil_out, flow_out], axis=1)
    return BasinSim(forcings=forcings, targets=targets, et=et_out,
                    soil_capacity=s_max, snow_init=snow_init, soil_init=soil_init)


def synth_generate(cfg: SynthConfig) -> list:
    """Generate a region of synthetic basins (deterministic per seed)."""
    rng = Rng(cfg.seed)
    start = np.datetime64(cfg.start_date, "D")
    dates = start + np.arange(cfg.n_days)
    records = []
    for bi in range(cfg.n_basins):
        r = rng.child(bi)
        params = _sample_basin_params(r.child(0))
        sim = simulate_basin(params, cfg.n_days, r.child(1))
        precip = sim.forcings[:, 0]
        frac_snow = float(precip[sim.forcings[:, 2] < params["t_snow"]].sum()
                          / max(precip.sum(), 1e-12))
        p_mean = float(precip.mean())
        pet_mean = float(sim.forcings[:, 1].mean())
        attrs = np.array([
            p_mean, pet_mean, pet_mean / max(p_mean, 1e-12), frac_snow,
            params["elevation"], params["slope"], params["area"],
            params["clay"], params["sand"], params["s_max"],
        ])
        records.append(BasinRecord(
            basin_id=f"synth{bi:03d}", static_attrs=attrs,
            forcings=sim.forcings, targets=sim.targets, dates=dates.copy()))
    return records


def synth_write(cfg: SynthConfig, out_dir) -> list:
    records = synth_generate(cfg)
    write_region(out_dir, records, SYNTH_FORCINGS, SYNTH_ATTRS)
    return records
