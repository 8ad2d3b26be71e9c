"""Construction and execution of the six model variants.

A variant is a set of LSTM modules wired by the hydrological task graph:
soil-water (sw) and snowpack (sno) modules feed the streamflow (sf)
module, either through their predicted scalar values or through their
full hidden-state embeddings.  Conditional variants additionally receive
the observed target value from the step before each segment as a constant
extra input channel, repeated at every timestep.

The streamflow module never feeds back into the intermediates: the graph
is acyclic by construction.

SF-module input column layout (fixed):
    [ base features (D) | init channel (1, conditional variants only)
      | sw connection | sno connection ]
where each connection is one column (predicted value) or H columns
(hidden embedding).  SW/SNO modules see [ base (D) | init (1, optional) ].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .lstm import (LSTMParams, LSTMState, LinearHead, SequenceGrads,
                   SequenceTrace, head_param_count, init_head, init_lstm,
                   lstm_param_count, sequence_backward, sequence_forward,
                   zero_state)
from .numerics import Rng, dropout_mask

# Canonical target channel order used throughout (matches dataset columns).
TASKS = ("snowpack", "soil_water", "streamflow")
SNOWPACK, SOIL_WATER, STREAMFLOW = 0, 1, 2

# Which target channel each module predicts.
MODULE_TASK = {"sw": SOIL_WATER, "sno": SNOWPACK, "sf": STREAMFLOW}
MODULE_ORDER = ("sw", "sno", "sf")
_MODULE_SEED_KEY = {"sw": 1, "sno": 2, "sf": 3}


class ModelVariant(Enum):
    STL = "STL"
    SMTL = "SMTL"
    HMTL = "HMTL"
    HMTL_CMB = "HMTL_CMB"
    HMTL_PE = "HMTL_PE"
    HCMTL = "HCMTL"

    @classmethod
    def parse(cls, name: str) -> "ModelVariant":
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ConfigError(f"unknown model variant {name!r}; "
                              f"choose from {[v.value for v in cls]}") from None

    @property
    def hierarchical(self) -> bool:
        return self not in (ModelVariant.STL, ModelVariant.SMTL)

    @property
    def embedding_connected(self) -> bool:
        return self in (ModelVariant.HMTL_PE, ModelVariant.HCMTL)

    @property
    def value_connected(self) -> bool:
        return self in (ModelVariant.HMTL, ModelVariant.HMTL_CMB)

    @property
    def conditional_init(self) -> bool:
        return self in (ModelVariant.HMTL_CMB, ModelVariant.HCMTL)

    @property
    def task_indices(self) -> tuple:
        """Target channels this variant is trained on."""
        if self is ModelVariant.STL:
            return (STREAMFLOW,)
        return (SNOWPACK, SOIL_WATER, STREAMFLOW)


@dataclass(frozen=True)
class TaskGraphConfig:
    variant: ModelVariant
    input_dim: int
    hidden: int
    dropout: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden < 1:
            raise ConfigError(f"input_dim and hidden must be >= 1, "
                              f"got {self.input_dim}, {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "input_dim": self.input_dim,
                "hidden": self.hidden, "dropout": self.dropout, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskGraphConfig":
        return cls(variant=ModelVariant.parse(d["variant"]),
                   input_dim=int(d["input_dim"]), hidden=int(d["hidden"]),
                   dropout=float(d["dropout"]), seed=int(d["seed"]))


def module_names(variant: ModelVariant) -> tuple:
    return MODULE_ORDER if variant.hierarchical else ("sf",)


def module_input_dims(config: TaskGraphConfig) -> dict:
    d, h, v = config.input_dim, config.hidden, config.variant
    if not v.hierarchical:
        return {"sf": d}
    extra = 1 if v.conditional_init else 0
    conn = 2 * h if v.embedding_connected else 2
    return {"sw": d + extra, "sno": d + extra, "sf": d + extra + conn}


def module_output_dims(config: TaskGraphConfig) -> dict:
    if config.variant is ModelVariant.SMTL:
        return {"sf": 3}
    return {name: 1 for name in module_names(config.variant)}


def param_count(config: TaskGraphConfig) -> int:
    """Closed-form parameter count over all modules and heads."""
    dims = module_input_dims(config)
    outs = module_output_dims(config)
    h = config.hidden
    return sum(lstm_param_count(dims[n], h) + head_param_count(h, outs[n])
               for n in module_names(config.variant))


@dataclass
class TaskModule:
    lstm: LSTMParams
    head: LinearHead

    def arrays(self) -> dict:
        out = {f"lstm.{k}": v for k, v in self.lstm.arrays().items()}
        out.update({f"head.{k}": v for k, v in self.head.arrays().items()})
        return out


@dataclass
class Network:
    """An instantiated variant: its modules plus the config that built it."""

    config: TaskGraphConfig
    modules: dict  # name -> TaskModule, in module_names order

    def arrays(self) -> dict:
        out = {}
        for name in module_names(self.config.variant):
            for key, arr in self.modules[name].arrays().items():
                out[f"{name}.{key}"] = arr
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "Network":
        mods = {n: TaskModule(
            lstm=LSTMParams(**{k: v.copy() for k, v in m.lstm.arrays().items()}),
            head=LinearHead(**{k: v.copy() for k, v in m.head.arrays().items()}))
            for n, m in self.modules.items()}
        return Network(config=self.config, modules=mods)


def build(config: TaskGraphConfig) -> Network:
    """Instantiate all modules of a variant with deterministic seed-derived
    init.  Modules with the same name and shape are initialized identically
    across variants sharing a seed."""
    rng = Rng(config.seed)
    dims = module_input_dims(config)
    outs = module_output_dims(config)
    modules = {}
    for name in module_names(config.variant):
        r = rng.child(_MODULE_SEED_KEY[name])
        lstm = init_lstm(r, dims[name], config.hidden)
        head = init_head(r, config.hidden, outs[name])
        modules[name] = TaskModule(lstm=lstm, head=head)
    return Network(config=config, modules=modules)


@dataclass
class SegmentPrediction:
    """Per-task predictions for a batch of segments, normalized space."""

    sf: np.ndarray               # (B, t)
    sw: Optional[np.ndarray]     # (B, t) or None for STL
    sno: Optional[np.ndarray]

    def by_task(self) -> dict:
        out = {STREAMFLOW: self.sf}
        if self.sw is not None:
            out[SOIL_WATER] = self.sw
        if self.sno is not None:
            out[SNOWPACK] = self.sno
        return out


@dataclass
class ForwardTraces:
    """Per-module traces plus the assembled module inputs, train mode only."""

    traces: dict        # name -> SequenceTrace
    batch: int
    steps: int


def _broadcast_init(values: np.ndarray, steps: int) -> np.ndarray:
    # (B,) scalar init repeated as a constant channel over the segment
    return np.repeat(values[:, None, None], steps, axis=1)


def _require_inits(config: TaskGraphConfig, inits: Optional[np.ndarray],
                   batch: int) -> Optional[np.ndarray]:
    if not config.variant.conditional_init:
        return None  # silently ignored for unconditional variants
    if inits is None:
        raise UsageError(f"{config.variant.value} requires init values "
                         "(observed targets at segment start - 1)")
    inits = np.asarray(inits, dtype=np.float64)
    if inits.shape != (batch, 3):
        raise ShapeError(f"inits must be ({batch}, 3) in target order "
                         f"{TASKS}, got {inits.shape}")
    return inits


def forward_segment(net: Network, x: np.ndarray,
                    inits: Optional[np.ndarray] = None, mode: str = "infer",
                    rng: Optional[Rng] = None):
    """Run one batch of segments through the task graph.

    x: (B, t, D) normalized inputs.  inits: (B, 3) observed target values at
    start-1 in canonical task order; required for conditional variants and
    ignored otherwise.  mode "train" samples dropout masks from rng and
    returns traces for the backward pass; "infer" returns traces=None.
    """
    if mode not in ("train", "infer"):
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 3:
        raise ShapeError(f"x must be (B, t, D), got shape {x.shape}")
    cfg = net.config
    if x.shape[2] != cfg.input_dim:
        raise ShapeError(f"x has {x.shape[2]} features, config says {cfg.input_dim}")
    batch, steps, _ = x.shape
    inits = _require_inits(cfg, inits, batch)
    train = mode == "train"
    if train and cfg.dropout > 0.0 and rng is None:
        raise UsageError("train mode with dropout needs an rng")

    def make_mask(r):
        if not train or cfg.dropout == 0.0:
            return None
        return dropout_mask(r, batch * cfg.hidden, cfg.dropout).reshape(batch, cfg.hidden)

    traces = {}
    hsz = cfg.hidden

    if not cfg.variant.hierarchical:
        preds, _, trace = sequence_forward(
            net.modules["sf"].lstm, net.modules["sf"].head, x,
            mask=make_mask(rng))
        traces["sf"] = trace
        if cfg.variant is ModelVariant.SMTL:
            pred = SegmentPrediction(sf=preds[:, :, STREAMFLOW],
                                     sw=preds[:, :, SOIL_WATER],
                                     sno=preds[:, :, SNOWPACK])
        else:
            pred = SegmentPrediction(sf=preds[:, :, 0], sw=None, sno=None)
        return pred, (ForwardTraces(traces, batch, steps) if train else None)

    # Intermediate modules first; the streamflow module consumes their
    # same-step outputs.
    inter_preds = {}
    inter_states = {}
    for name in ("sw", "sno"):
        cols = [x]
        if cfg.variant.conditional_init:
            cols.append(_broadcast_init(inits[:, MODULE_TASK[name]], steps))
        xin = np.concatenate(cols, axis=2) if len(cols) > 1 else x
        preds, states, trace = sequence_forward(
            net.modules[name].lstm, net.modules[name].head, xin,
            mask=make_mask(rng))
        inter_preds[name] = preds[:, :, 0]
        inter_states[name] = states
        traces[name] = trace

    cols = [x]
    if cfg.variant.conditional_init:
        cols.append(_broadcast_init(inits[:, STREAMFLOW], steps))
    if cfg.variant.embedding_connected:
        cols.extend([inter_states["sw"], inter_states["sno"]])
    else:
        cols.extend([inter_preds["sw"][:, :, None], inter_preds["sno"][:, :, None]])
    x_sf = np.concatenate(cols, axis=2)
    preds_sf, _, trace_sf = sequence_forward(
        net.modules["sf"].lstm, net.modules["sf"].head, x_sf,
        mask=make_mask(rng))
    traces["sf"] = trace_sf

    pred = SegmentPrediction(sf=preds_sf[:, :, 0], sw=inter_preds["sw"],
                             sno=inter_preds["sno"])
    return pred, (ForwardTraces(traces, batch, steps) if train else None)


@dataclass
class GraphGrads:
    """Full gradient set for one backward pass through the graph."""

    modules: dict          # name -> SequenceGrads
    d_x: np.ndarray        # (B, t, D) gradient w.r.t. the base features
    d_inits: Optional[np.ndarray]  # (B, 3) gradient w.r.t. init values


def backward_segment(net: Network, fw: ForwardTraces,
                     residuals: dict) -> GraphGrads:
    """Reverse pass through the whole graph.

    residuals maps task index -> (B, t) dLoss/dPrediction for every task the
    variant trains.  For embedding-connected variants the gradient arriving
    at the streamflow module flows back into the intermediates' hidden
    states; for value-connected variants it flows through their predictions.
    """
    if fw is None:
        raise UsageError("backward requires traces from a train-mode forward")
    cfg = net.config
    batch, steps = fw.batch, fw.steps
    d = cfg.input_dim
    h = cfg.hidden
    for idx in cfg.variant.task_indices:
        if idx not in residuals:
            raise UsageError(f"missing residual for task {TASKS[idx]}")
        if residuals[idx].shape != (batch, steps):
            raise ShapeError(f"residual for {TASKS[idx]} has shape "
                             f"{residuals[idx].shape}, want {(batch, steps)}")

    if not cfg.variant.hierarchical:
        if cfg.variant is ModelVariant.SMTL:
            d_preds = np.stack([residuals[SNOWPACK], residuals[SOIL_WATER],
                                residuals[STREAMFLOW]], axis=2)
        else:
            d_preds = residuals[STREAMFLOW][:, :, None]
        g = sequence_backward(fw.traces["sf"], net.modules["sf"].lstm,
                              net.modules["sf"].head, d_preds)
        return GraphGrads(modules={"sf": g}, d_x=g.inputs, d_inits=None)

    cond = cfg.variant.conditional_init
    g_sf = sequence_backward(fw.traces["sf"], net.modules["sf"].lstm,
                             net.modules["sf"].head,
                             residuals[STREAMFLOW][:, :, None])
    d_x_total = g_sf.inputs[:, :, :d].copy()
    pos = d
    d_inits = np.zeros((batch, 3)) if cond else None
    if cond:
        d_inits[:, STREAMFLOW] = g_sf.inputs[:, :, pos].sum(axis=1)
        pos += 1

    conn_width = h if cfg.variant.embedding_connected else 1
    conn = {"sw": g_sf.inputs[:, :, pos:pos + conn_width],
            "sno": g_sf.inputs[:, :, pos + conn_width:pos + 2 * conn_width]}

    grads = {"sf": g_sf}
    for name in ("sw", "sno"):
        task = MODULE_TASK[name]
        d_preds = residuals[task][:, :, None]
        d_h_extra = None
        if cfg.variant.embedding_connected:
            d_h_extra = conn[name]
        else:
            d_preds = d_preds + conn[name]
        g = sequence_backward(fw.traces[name], net.modules[name].lstm,
                              net.modules[name].head, d_preds,
                              d_h_extra=d_h_extra)
        grads[name] = g
        d_x_total += g.inputs[:, :, :d]
        if cond:
            d_inits[:, task] = g.inputs[:, :, d].sum(axis=1)
    return GraphGrads(modules=grads, d_x=d_x_total, d_inits=d_inits)


# ---------------------------------------------------------------------------
# Checkpoint container.
#
# Layout (little-endian):
#   bytes 0..4   magic b"CMTL"
#   bytes 4..8   format version, u32
#   bytes 8..16  meta length N, u64
#   N bytes      meta JSON (utf-8): config, array names/shapes in order,
#                norm stats reference, free-form extras
#   rest         the arrays' float64 data, C order, concatenated in the
#                order listed in meta["arrays"]
# ---------------------------------------------------------------------------

_MAGIC = b"CMTL"
CHECKPOINT_VERSION = 1


def config_hash(mapping: dict) -> str:
    """Stable short hash of a JSON-serializable mapping."""
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def save_checkpoint(path, net: Network, norm_ref: str = "",
                    extra: Optional[dict] = None) -> None:
    """Write a network to the versioned binary container (bit-exact)."""
    arrays = net.arrays()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "norm_ref": norm_ref,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (Network, meta dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise UsageError(f"{path} is not a checkpoint file")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise UsageError(f"unsupported checkpoint version {version}")
        meta_len = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        meta = json.loads(fh.read(meta_len).decode())
        data = fh.read()
    cfg = TaskGraphConfig.from_dict(meta["config"])
    arrays = {}
    offset = 0
    for spec in meta["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
        arrays[spec["name"]] = arr.reshape(shape).astype(np.float64)
        offset += n * 8
    modules = {}
    for name in module_names(cfg.variant):
        modules[name] = TaskModule(
            lstm=LSTMParams(w_x=arrays[f"{name}.lstm.w_x"],
                            w_h=arrays[f"{name}.lstm.w_h"],
                            b_ih=arrays[f"{name}.lstm.b_ih"],
                            b_hh=arrays[f"{name}.lstm.b_hh"]),
            head=LinearHead(w_y=arrays[f"{name}.head.w_y"],
                            b_y=arrays[f"{name}.head.b_y"]))
    return Network(config=cfg, modules=modules), meta
