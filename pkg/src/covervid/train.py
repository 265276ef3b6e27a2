"""Spatial-only pretraining and weighted multi-dataset co-training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from covervid import ops
from covervid.data import Dataset, SamplerState, augment, compose_batch, philox
from covervid.model import HEAD, SPATIAL, TEMPORAL, ModelConfig, ModelParams, classify, forward
from covervid.optim import OptimizerState, sgd_momentum_step
from covervid.tensor import Tape, Tensor

log = logging.getLogger(__name__)

Stage = Literal["pretrain", "cotrain"]

REFERENCE_BATCH = 128
REFERENCE_BASE_LR = 5e-3
# desk defaults: the reference 5e-3 barely moves a from-scratch model, and
# batches under 64 leave too few clips per dataset for stable co-training
DESK_BASE_LR = 0.02
DESK_BATCH = 64


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: Stage = "cotrain"
    epochs: int = 20
    batch_size: int = DESK_BATCH
    base_lr: float = DESK_BASE_LR
    lr_drop_epochs: list[int] | None = None
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    loss_weights: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    precision: str = "float32"
    trainable: list[str] | None = None
    sample_from: list[str] | None = None
    run_id: str = "run"

    def __post_init__(self):
        if self.stage not in ("pretrain", "cotrain"):
            raise TrainConfigError(f"stage must be pretrain or cotrain, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0:
            raise TrainConfigError("base_lr must be positive")
        if self.lr_drop_epochs is None:
            self.lr_drop_epochs = default_drop_epochs(self.epochs)
        self.lr_drop_epochs = [int(e) for e in self.lr_drop_epochs]
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise TrainConfigError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and self.epochs and drops[-1] >= self.epochs:
            raise TrainConfigError(f"lr drop at epoch {drops[-1]} is not below epochs={self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainConfigError("momentum must lie in [0, 1)")
        if any(w < 0 for w in self.loss_weights.values()):
            raise TrainConfigError("loss weights must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise TrainConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.trainable is not None:
            bad = [p for p in self.trainable if p not in (SPATIAL, TEMPORAL, HEAD) and not p.startswith("head.")]
            if bad:
                raise TrainConfigError(f"unknown trainable partitions: {bad}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def default_drop_epochs(epochs: int) -> list[int]:
    """Drops at 55% and 75% of the run (epochs 11 and 15 of 20)."""
    if epochs < 4:
        return []
    return sorted({round(0.55 * epochs), round(0.75 * epochs)})


def reference_schedule(**overrides) -> TrainConfig:
    """Reference finetuning recipe: batch 128, 20 epochs, 5e-3 dropping x0.1 at epochs 11 and 15."""
    base = {"epochs": 20, "batch_size": REFERENCE_BATCH, "base_lr": REFERENCE_BASE_LR,
            "lr_drop_epochs": [11, 15], "lr_drop_factor": 0.1, "momentum": 0.9}
    return TrainConfig(**{**base, **overrides})


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise TrainConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    n_drops = sum(1 for e in cfg.lr_drop_epochs if epoch >= e)
    return cfg.base_lr * cfg.lr_drop_factor**n_drops


@dataclass
class RunState:
    step: int
    optimizer: OptimizerState
    sampler: SamplerState
    epoch_losses: list[float] = field(default_factory=list)
    running_loss: float = 0.0
    running_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "momentum": self.optimizer.momentum,
            "lr": self.optimizer.lr,
            "sampler": self.sampler.state_dict(),
            "epoch_losses": list(self.epoch_losses),
            "running_loss": self.running_loss,
            "running_steps": self.running_steps,
        }


class MetricsSink:
    """Line-delimited JSON records; keeps them in memory when no path is given."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None

    def write(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        else:
            self.records.append(record)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def trainable_names(params: ModelParams, parts) -> list[str]:
    out = []
    for k in params:
        part = params.partition(k)
        if part in parts or any(k.startswith(p + ".") for p in parts if p.startswith("head.")):
            out.append(k)
    return out


def _weights(datasets: dict[str, Dataset], cfg: TrainConfig) -> dict[str, float]:
    unknown = set(cfg.loss_weights) - set(datasets)
    if unknown:
        raise TrainConfigError(f"loss weights given for unregistered datasets: {sorted(unknown)}")
    return {k: float(cfg.loss_weights.get(k, d.spec.loss_weight)) for k, d in datasets.items()}


def _sampled(datasets: dict[str, Dataset], cfg: TrainConfig) -> list[str]:
    ids = list(datasets) if cfg.sample_from is None else list(cfg.sample_from)
    unknown = [k for k in ids if k not in datasets]
    if unknown:
        raise TrainConfigError(f"unregistered dataset id(s) in sampling set: {unknown}")
    if not ids:
        raise TrainConfigError("nothing to sample from")
    return ids


def steps_per_epoch(datasets: dict[str, Dataset], cfg: TrainConfig) -> int:
    total = sum(datasets[k].spec.train_size for k in _sampled(datasets, cfg))
    return max(1, math.ceil(total / cfg.batch_size))


def new_run_state(params: ModelParams, datasets: dict[str, Dataset], cfg: TrainConfig) -> RunState:
    ids = _sampled(datasets, cfg)
    sampler = SamplerState({k: datasets[k].spec.train_size for k in ids}, seed=cfg.seed)
    opt = OptimizerState.for_params(params, momentum=cfg.momentum, lr=cfg.base_lr)
    return RunState(step=0, optimizer=opt, sampler=sampler)


def assemble_batch(slots, datasets: dict[str, Dataset], crop: tuple[int, int], seed: int, step: int,
                   dtype=np.float32):
    """Augment the drawn clips and group them by frame count.

    Returns ``[(frames, dataset_ids, labels), ...]`` with groups ordered by
    descending frame count and slots kept in draw order inside a group.
    """
    rng = philox(seed, "augment", step)
    groups: dict[int, tuple[list, list, list]] = {}
    for ds, idx in slots:
        d = datasets[ds]
        clip = augment(d.train_x[idx], d.spec, rng, crop)
        xs, ids, ys = groups.setdefault(clip.shape[0], ([], [], []))
        xs.append(clip)
        ids.append(ds)
        ys.append(int(d.train_y[idx]))
    return [
        (np.stack(groups[n][0]).astype(dtype, copy=False), groups[n][1], np.array(groups[n][2]))
        for n in sorted(groups, reverse=True)
    ]


def batch_loss(params: ModelParams, model_cfg: ModelConfig, groups, weights: dict[str, float],
               order: list[str], temporal="attend") -> tuple[Tensor, dict[str, float]]:
    """``sum_i w_i * mean CE_i`` over datasets present in the batch.

    Must run inside a :class:`Tape` for gradients. Datasets absent from the
    batch contribute nothing.
    """
    per_ds: dict[str, Tensor] = {}
    for x, ids, ys in groups:
        rep = forward(x, params, model_cfg, temporal)
        ids_arr = np.array(ids)
        for ds in order:
            rows = np.flatnonzero(ids_arr == ds)
            if rows.size == 0:
                continue
            logits = classify(ds, ops.take_rows(rep, rows), params)
            per_ds[ds] = ops.cross_entropy(logits, ys[rows])
    if not per_ds:
        raise TrainConfigError("empty batch")
    total = None
    for ds in order:
        if ds not in per_ds:
            continue
        term = ops.scale(per_ds[ds], weights[ds])
        total = term if total is None else ops.add(total, term)
    return total, {k: v.values.item() for k, v in per_ds.items()}


def run_training(params: ModelParams, model_cfg: ModelConfig, datasets: dict[str, Dataset],
                 cfg: TrainConfig, state: RunState | None = None, sink: MetricsSink | None = None,
                 stop_at_step: int | None = None, temporal="attend") -> RunState:
    """Shared SGD loop; updates ``params`` in place and returns the run state."""
    if cfg.precision != model_cfg.dtype:
        raise TrainConfigError(f"train precision {cfg.precision} differs from model dtype {model_cfg.dtype}")
    weights = _weights(datasets, cfg)
    sampled = _sampled(datasets, cfg)
    if not any(weights[k] > 0 for k in sampled):
        raise TrainConfigError("all effective loss weights are zero")
    for k in datasets:
        if f"head.{k}.w" not in params:
            raise KeyError(f"no classification head registered for dataset {k!r}")
    parts = cfg.trainable if cfg.trainable is not None else [SPATIAL, TEMPORAL, HEAD]
    names = trainable_names(params, parts)
    params.set_trainable(names)
    state = state or new_run_state(params, datasets, cfg)
    spe = steps_per_epoch(datasets, cfg)
    total_steps = spe * cfg.epochs
    end = total_steps if stop_at_step is None else min(stop_at_step, total_steps)
    crop = (model_cfg.height, model_cfg.width)
    dtype = model_cfg.np_dtype
    order = list(datasets)
    try:
        while state.step < end:
            t0 = time.perf_counter()
            epoch = state.step // spe
            state.optimizer.lr = lr_at(epoch, cfg)
            slots = compose_batch(state.sampler, cfg.batch_size)
            groups = assemble_batch(slots, datasets, crop, cfg.seed, state.step, dtype)
            with Tape() as tape:
                loss, parts_loss = batch_loss(params, model_cfg, groups, weights, order, temporal)
                tape.backward(loss)
            for k in names:
                if params[k].grad is None:
                    params[k].grad = np.zeros_like(params[k].values)
            sgd_momentum_step(params, state.optimizer, names)
            value = loss.values.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {state.step}")
            state.running_loss += value
            state.running_steps += 1
            if sink is not None:
                wall = round((time.perf_counter() - t0) * 1000.0, 3)
                for ds, v in parts_loss.items():
                    sink.write({"run_id": cfg.run_id, "step": state.step, "epoch": epoch,
                                "dataset_id": ds, "loss": v, "lr": state.optimizer.lr, "wall_ms": wall})
            state.step += 1
            if state.step % spe == 0:
                state.epoch_losses.append(state.running_loss / state.running_steps)
                log.info("%s epoch %d loss %.4f", cfg.run_id, epoch, state.epoch_losses[-1])
                state.running_loss, state.running_steps = 0.0, 0
    finally:
        params.set_trainable([])
    return state


def pretrain_spatial(params: ModelParams, model_cfg: ModelConfig, datasets: dict[str, Dataset],
                     cfg: TrainConfig, state: RunState | None = None, sink: MetricsSink | None = None,
                     stop_at_step: int | None = None) -> RunState:
    """Image-only training of the spatial parameters and the image heads.

    Temporal sublayers run in their single-element form and stay frozen.
    """
    if cfg.stage != "pretrain":
        raise TrainConfigError(f"pretrain_spatial needs stage=pretrain, got {cfg.stage!r}")
    videos = [k for k, d in datasets.items() if d.spec.modality != "image"]
    if videos:
        raise TrainConfigError(f"video dataset(s) supplied to pretraining: {videos}")
    if cfg.trainable is None:
        cfg = TrainConfig(**{**cfg.to_dict(), "trainable": [SPATIAL] + [f"head.{k}" for k in datasets]})
    elif TEMPORAL in cfg.trainable:
        raise TrainConfigError("temporal parameters cannot be trained during pretraining")
    return run_training(params, model_cfg, datasets, cfg, state, sink, stop_at_step, temporal="bypass")


def cotrain(params: ModelParams, model_cfg: ModelConfig, datasets: dict[str, Dataset],
            cfg: TrainConfig, state: RunState | None = None, sink: MetricsSink | None = None,
            stop_at_step: int | None = None) -> RunState:
    """Joint training on every registered dataset with one head each."""
    if cfg.stage != "cotrain":
        raise TrainConfigError(f"cotrain needs stage=cotrain, got {cfg.stage!r}")
    if not any(d.spec.modality == "video" for d in datasets.values()):
        raise TrainConfigError("co-training needs at least one video dataset")
    return run_training(params, model_cfg, datasets, cfg, state, sink, stop_at_step)
