"""Multi-view evaluation and probe experiments."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from covervid.data import Dataset, DatasetError, eval_crop_offsets, reversal_partner, reverse_frames
from covervid.model import HEAD, SPATIAL, TEMPORAL, ModelConfig, ModelParams, classify, forward, init_head
from covervid.ops import log_softmax_np
from covervid.train import MetricsSink, TrainConfig, cotrain, run_training

log = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class EvalReport:
    dataset_id: str
    accuracy: float
    per_class: list[float]
    clips: int
    views: int
    params_hash: str
    config_hash: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeReport:
    kind: str
    table: dict[str, dict[str, float]]
    deltas: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "table": self.table, "deltas": self.deltas, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def view_probabilities(params: ModelParams, cfg: ModelConfig, dataset_id: str, x: np.ndarray,
                       views: int = 3, batch: int = 250) -> np.ndarray:
    """Per-view class probabilities, shape ``(views, N, C)``."""
    n, f, h, w, c = x.shape
    crop = (cfg.height, cfg.width)
    out = []
    for oy, ox in eval_crop_offsets(h, w, crop, views):
        xs = x[:, :, oy:oy + crop[0], ox:ox + crop[1]]
        probs = []
        for i in range(0, n, batch):
            rep = forward(xs[i:i + batch].astype(cfg.np_dtype), params, cfg)
            probs.append(np.exp(log_softmax_np(classify(dataset_id, rep, params).values)))
        out.append(np.concatenate(probs))
    return np.stack(out)


def predict_views(probs: np.ndarray) -> np.ndarray:
    """Average view probabilities then argmax; ties go to the lowest class index."""
    return probs.mean(axis=0).argmax(axis=1)


def evaluate(params: ModelParams, cfg: ModelConfig, dataset: Dataset, views: int = 3,
             x: np.ndarray | None = None, y: np.ndarray | None = None) -> EvalReport:
    """Top-1 accuracy on the eval split (or on ``x, y`` when given)."""
    ds = dataset.spec.id
    if f"head.{ds}.w" not in params:
        raise ProbeError(f"unknown dataset {ds!r}: no head in the model")
    if views not in (1, 3):
        raise ProbeError(f"views must be 1 or 3, got {views}")
    if x is None:
        x, y = dataset.eval_x, dataset.eval_y
    pred = predict_views(view_probabilities(params, cfg, ds, x, views))
    correct = pred == y
    per_class = [
        float(correct[y == k].mean()) if np.any(y == k) else 0.0
        for k in range(dataset.spec.num_classes)
    ]
    return EvalReport(
        dataset_id=ds,
        accuracy=float(correct.mean()),
        per_class=per_class,
        clips=int(len(y)),
        views=views,
        params_hash=params.digest(),
        config_hash=config_digest(cfg.to_dict()),
    )


def _pct(acc: float) -> float:
    return round(100.0 * acc, 4)


def reversal_probe(params: ModelParams, cfg: ModelConfig, dataset: Dataset, views: int = 3) -> ProbeReport:
    """Accuracy with normal vs test-time reversed frame order.

    The table has exactly two rows, ``normal`` and ``reversed``. For motion
    datasets the reversed clips are also scored against the reversal-partner
    labels (what the reversed content depicts); that score goes in ``meta``.
    """
    spec = dataset.spec
    if spec.modality != "video":
        raise ProbeError(f"reversal probe needs a video dataset; {spec.id} is {spec.modality}")
    x, y = dataset.eval_x, dataset.eval_y
    xr = reverse_frames(x)
    normal = evaluate(params, cfg, dataset, views)
    rev = evaluate(params, cfg, dataset, views, x=xr, y=y)
    table = {"normal": {spec.id: _pct(normal.accuracy)}, "reversed": {spec.id: _pct(rev.accuracy)}}
    deltas = {f"reversed:{spec.id}": table["reversed"][spec.id] - table["normal"][spec.id]}
    meta = {"dataset": spec.id, "views": views, "params_hash": normal.params_hash}
    if spec.kind == "motion":
        mapped = evaluate(params, cfg, dataset, views, x=xr, y=np.array([reversal_partner(int(v)) for v in y]))
        meta["reversed_partner_labels"] = _pct(mapped.accuracy)
    return ProbeReport("reversal", table, deltas, meta)


def transfer_probe(params: ModelParams, cfg: ModelConfig, source_tag: str, target: Dataset,
                   train_cfg: TrainConfig, views: int = 3, head_seed: int | None = None):
    """Freeze the backbone, train a freshly initialized target head, evaluate.

    Returns ``(report, tuned_params)``; the input ``params`` are not modified.
    """
    spec = target.spec
    ds = spec.id
    want = cfg.head_classes.get(ds)
    if want is not None and want != spec.num_classes:
        raise ProbeError(f"target head for {ds} has {want} classes, dataset has {spec.num_classes}")
    tuned = params.copy()
    probe_cfg = ModelConfig.from_dict({**cfg.to_dict(), "head_classes": {**cfg.head_classes, ds: spec.num_classes}})
    seed = (cfg.seed + 7919) if head_seed is None else head_seed
    for k in tuned.head_names(ds):
        del tuned[k]
    tuned.update(init_head(probe_cfg, ds, spec.num_classes, seed=seed))
    tcfg = TrainConfig.from_dict({**train_cfg.to_dict(), "stage": "cotrain", "trainable": [f"head.{ds}"],
                                  "loss_weights": {}, "sample_from": None,
                                  "run_id": f"{train_cfg.run_id}:transfer:{source_tag}->{ds}"})
    run_training(tuned, probe_cfg, {ds: target}, tcfg)
    rep = evaluate(tuned, probe_cfg, target, views)
    report = ProbeReport("transfer", {source_tag: {ds: _pct(rep.accuracy)}}, {},
                         {"source": source_tag, "target": ds, "head_epochs": tcfg.epochs,
                          "backbone_hash": params.digest(params.names(SPATIAL, TEMPORAL))})
    return report, tuned


def default_ablation_grid(datasets: dict[str, Dataset], image_weights=(0.0, 0.5, 0.75)) -> list[dict]:
    """Independent runs, all-video co-training, then all-video + images per image weight."""
    videos = [k for k, d in datasets.items() if d.spec.modality == "video"]
    images = [k for k, d in datasets.items() if d.spec.modality == "image"]
    grid = [{"name": f"independent:{v}", "datasets": [v], "weights": {}} for v in videos]
    if len(videos) > 1:
        grid.append({"name": "+".join(videos), "datasets": videos, "weights": {}})
    for w in image_weights:
        grid.append({"name": f"{'+'.join(videos + images)} w_image={w:g}", "datasets": videos + images,
                     "weights": {k: float(w) for k in images}})
    return grid


def run_condition(base: ModelParams, cfg: ModelConfig, datasets: dict[str, Dataset], condition: dict,
                  train_cfg: TrainConfig, sink: MetricsSink | None = None) -> ModelParams:
    reg = {k: datasets[k] for k in condition["datasets"]}
    tcfg = TrainConfig.from_dict({**train_cfg.to_dict(), "stage": "cotrain",
                                  "loss_weights": dict(condition.get("weights", {})),
                                  "run_id": f"{train_cfg.run_id}:{condition['name']}"})
    params = base.copy()
    cotrain(params, cfg, reg, tcfg, sink=sink)
    return params


def ablation_matrix(base: ModelParams, cfg: ModelConfig, datasets: dict[str, Dataset], grid: list[dict],
                    train_cfg: TrainConfig, views: int = 3, sink: MetricsSink | None = None) -> ProbeReport:
    """One co-training run per grid condition from the same starting parameters and seed.

    Rows named ``independent:<id>`` are merged into a single ``independent``
    row. A dataset trained with zero weight is still evaluated, through the
    head it had in ``base``.
    """
    if not grid:
        raise ProbeError("ablation grid is empty")
    table: dict[str, dict[str, float]] = {}
    for cond in grid:
        params = run_condition(base, cfg, datasets, cond, train_cfg, sink)
        row_name = "independent" if cond["name"].startswith("independent:") else cond["name"]
        row = table.setdefault(row_name, {})
        for k in cond["datasets"]:
            row[k] = _pct(evaluate(params, cfg, datasets[k], views).accuracy)
        log.info("ablation %s: %s", cond["name"], row)
    return ProbeReport("ablation", table, {}, {"conditions": [c["name"] for c in grid], "seed": train_cfg.seed})
