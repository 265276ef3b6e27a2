"""Experiment config: one YAML document with ``model``, ``datasets``, ``train``,
``eval`` and ``io`` sections. Unknown keys are errors everywhere.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from covervid.data import DatasetSpec
from covervid.model import ModelConfig
from covervid.train import TrainConfig

SECTIONS = ("model", "datasets", "train", "eval", "io")
DATASET_REQUIRED = ("id", "kind", "num_classes", "train_size", "eval_size")
PROBES = ("reversal", "transfer", "ablation")

EVAL_DEFAULTS = {
    "views": 3,
    "probes": ["reversal", "transfer", "ablation"],
    "transfer": {"target": "motion", "head_epochs": 10},
    "ablation": {"image_weights": [0.0, 0.5, 0.75]},
    "thresholds": [],
}
IO_DEFAULTS = {"run_dir": None, "seed": 0}
TRAIN_STAGE_DEFAULTS = {"epochs": 20}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    model: ModelConfig
    datasets: list[DatasetSpec]
    pretrain: TrainConfig
    cotrain: TrainConfig
    eval: dict = field(default_factory=dict)
    io: dict = field(default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return Path(self.io["run_dir"])

    @property
    def seed(self) -> int:
        return int(self.io["seed"])

    def dataset(self, ds_id: str) -> DatasetSpec:
        for s in self.datasets:
            if s.id == ds_id:
                return s
        raise ConfigError(f"[datasets] no dataset with id {ds_id!r}")

    def resolved(self) -> dict:
        """Every default expanded; loading this dict yields an identical config."""
        model = self.model.to_dict()
        model.pop("head_classes")
        return {
            "model": model,
            "datasets": [s.to_dict() for s in self.datasets],
            "train": {k: {f: v for f, v in t.to_dict().items() if f != "stage"}
                      for k, t in (("pretrain", self.pretrain), ("cotrain", self.cotrain))},
            "eval": copy.deepcopy(self.eval),
            "io": dict(self.io),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True, default_flow_style=False)


def parse_config(doc: dict, seed: int | None = None, run_dir: str | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with sections " + ", ".join(SECTIONS))
    _reject_unknown("top level", doc, SECTIONS)

    io = {**IO_DEFAULTS, **(doc.get("io") or {})}
    _reject_unknown("io", io, IO_DEFAULTS)
    if seed is not None:
        io["seed"] = int(seed)
    if run_dir is not None:
        io["run_dir"] = str(run_dir)
    if not io["run_dir"]:
        raise ConfigError("[io] missing required key 'run_dir'")
    io["run_dir"] = str(io["run_dir"])
    s = int(io["seed"])

    raw_ds = doc.get("datasets")
    if not raw_ds:
        raise ConfigError("[datasets] missing required section (list of dataset specs)")
    specs = []
    for i, d in enumerate(raw_ds):
        for key in DATASET_REQUIRED:
            if key not in d:
                raise ConfigError(f"[datasets] entry {i}: missing required key '{key}'")
        _reject_unknown(f"datasets[{i}]", d, DatasetSpec.__dataclass_fields__)
        specs.append(DatasetSpec.from_dict({"seed": s, **d}))
    ids = [sp.id for sp in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"[datasets] duplicate ids in {ids}")

    model_doc = dict(doc.get("model") or {})
    _reject_unknown("model", model_doc, set(ModelConfig.__dataclass_fields__) - {"head_classes"})
    model_doc.setdefault("seed", s)
    model = ModelConfig(**model_doc, head_classes={sp.id: sp.num_classes for sp in specs})

    train_doc = doc.get("train") or {}
    _reject_unknown("train", train_doc, ("pretrain", "cotrain"))
    stages = {}
    for stage in ("pretrain", "cotrain"):
        sd = dict(train_doc.get(stage) or {})
        _reject_unknown(f"train.{stage}", sd, set(TrainConfig.__dataclass_fields__) - {"stage"})
        merged = {**TRAIN_STAGE_DEFAULTS, "seed": s, "run_id": stage, **sd, "stage": stage}
        stages[stage] = TrainConfig.from_dict(merged)

    ev_doc = dict(doc.get("eval") or {})
    _reject_unknown("eval", ev_doc, EVAL_DEFAULTS)
    ev = copy.deepcopy(EVAL_DEFAULTS)
    for k, v in ev_doc.items():
        if isinstance(ev[k], dict):
            _reject_unknown(f"eval.{k}", v or {}, ev[k])
            ev[k].update(v or {})
        else:
            ev[k] = v
    if ev["views"] not in (1, 3):
        raise ConfigError("[eval] views must be 1 or 3")
    bad = [p for p in ev["probes"] if p not in PROBES]
    if bad:
        raise ConfigError(f"[eval] unknown probe(s): {bad}")
    for i, t in enumerate(ev["thresholds"]):
        _reject_unknown(f"eval.thresholds[{i}]", t, ("name", "metric", "min", "max"))
        for key in ("name", "metric"):
            if key not in t:
                raise ConfigError(f"[eval] thresholds[{i}]: missing required key '{key}'")
    ev["transfer"]["head_epochs"] = int(ev["transfer"]["head_epochs"])
    ev["ablation"]["image_weights"] = [float(w) for w in ev["ablation"]["image_weights"]]

    return ExperimentConfig(model, specs, stages["pretrain"], stages["cotrain"], ev, io)


def load_config(path, seed: int | None = None, run_dir: str | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return parse_config(doc, seed=seed, run_dir=run_dir)


def desk_config(run_dir: str = "runs/desk", seed: int = 0) -> dict:
    """The default desk-scale experiment as a config document."""
    return {
        "model": {},
        "datasets": [
            {"id": "motion", "kind": "motion", "num_classes": 4, "train_size": 2000, "eval_size": 500,
             "flip_allowed": False},
            {"id": "appearance", "kind": "appearance", "num_classes": 4, "train_size": 2000, "eval_size": 500},
            {"id": "image", "kind": "texture", "modality": "image", "frames": 1, "num_classes": 8,
             "train_size": 4000, "eval_size": 500, "loss_weight": 0.5},
        ],
        "train": {"pretrain": {}, "cotrain": {}},
        "eval": {},
        "io": {"run_dir": run_dir, "seed": seed},
    }
