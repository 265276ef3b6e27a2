"""Tiny datasets and models shared by the trainer, eval and CLI tests."""

from covervid.data import DatasetSpec, generate
from covervid.model import ModelConfig, init_params


def tiny_specs(seed=0):
    return [
        DatasetSpec("motion", "motion", 4, 48, 16, flip_allowed=False, seed=seed),
        DatasetSpec("appearance", "appearance", 4, 48, 16, seed=seed),
        DatasetSpec("image", "texture", 4, 64, 16, modality="image", frames=1, loss_weight=0.5, seed=seed),
    ]


def tiny_data(seed=0):
    return {s.id: generate(s) for s in tiny_specs(seed)}


def tiny_cfg(datasets, **kw):
    base = dict(depth=1, d_model=16, heads=2, patch_size=4, frames=4,
                head_classes={k: d.spec.num_classes for k, d in datasets.items()})
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(datasets, **kw):
    cfg = tiny_cfg(datasets, **kw)
    return init_params(cfg), cfg
