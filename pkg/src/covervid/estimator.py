"""scikit-learn style wrapper around the co-training loop.

>>> clf = CoVeRClassifier(epochs=5).fit(X, y, dataset=ids)   # doctest: +SKIP
>>> clf.predict(X_new, dataset="motion")                       # doctest: +SKIP
>>> clf.transform(X_new).shape                                 # doctest: +SKIP
(n_samples, d_model)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from covervid.data import Dataset, DatasetSpec
from covervid.model import ModelConfig, init_params
from covervid.model import forward as model_forward
from covervid.evaluation import predict_views, view_probabilities
from covervid.train import TrainConfig, cotrain, pretrain_spatial

DEFAULT_DATASET = "default"


def check_clips(X, allow_mixed: bool = True) -> list[np.ndarray]:
    """Validate clip input and return it as a list of ``(n, h, w, c)`` float arrays.

    Accepts a 5-d array ``(N, n, h, w, c)``, a 4-d array of single-channel
    clips ``(N, n, h, w)``, or a sequence of per-clip arrays (frame counts
    may differ, e.g. images mixed with videos).
    """
    if isinstance(X, np.ndarray) and X.ndim in (4, 5):
        arr = X[..., None] if X.ndim == 4 else X
        clips = list(arr)
    elif isinstance(X, (list, tuple)):
        clips = [np.asarray(c) for c in X]
        clips = [c[..., None] if c.ndim == 3 else c for c in clips]
    else:
        raise ValueError("expected clips shaped (N, frames, h, w[, c]) or a list of per-clip arrays")
    if not clips:
        raise ValueError("no clips given")
    for i, c in enumerate(clips):
        if c.ndim != 4:
            raise ValueError(f"clip {i} has shape {c.shape}; expected (frames, h, w, c)")
        if not np.all(np.isfinite(c)):
            raise ValueError(f"clip {i} contains non-finite values")
    if len({c.shape[1:] for c in clips}) != 1:
        raise ValueError("all clips must share height, width and channels")
    if not allow_mixed and len({c.shape[0] for c in clips}) != 1:
        raise ValueError("all clips must have the same frame count")
    return [c.astype(np.float32, copy=False) for c in clips]


def _dataset_ids(dataset, n: int) -> np.ndarray:
    if dataset is None:
        return np.full(n, DEFAULT_DATASET, dtype=object)
    if isinstance(dataset, str):
        return np.full(n, dataset, dtype=object)
    ids = np.asarray(dataset, dtype=object)
    if ids.shape != (n,):
        raise ValueError(f"dataset ids: expected {n} entries, got shape {ids.shape}")
    return ids


class CoVeRClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Divided space-time transformer co-trained over one or more labelled datasets.

    Each distinct value of ``dataset`` passed to :meth:`fit` gets its own
    classification head and label space; clips with one frame are treated as
    images. ``transform`` returns the shared representation.

    Parameters
    ----------
    depth, d_model, heads, patch_size : transformer shape.
    epochs, batch_size, learning_rate, momentum : SGD schedule (step decay at
        55% and 75% of training).
    loss_weights : dict, optional
        Per-dataset loss weight (default 1.0 each).
    pretrain_epochs : int
        Epochs of spatial-only pretraining on the single-frame datasets before
        co-training; 0 disables it.
    random_state : int
    """

    def __init__(self, depth=2, d_model=32, heads=4, patch_size=4, epochs=20, batch_size=64,
                 learning_rate=0.02, momentum=0.9, loss_weights=None, pretrain_epochs=0,
                 random_state=0):
        self.depth = depth
        self.d_model = d_model
        self.heads = heads
        self.patch_size = patch_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.loss_weights = loss_weights
        self.pretrain_epochs = pretrain_epochs
        self.random_state = random_state

    def _registry(self, clips, y, ids):
        reg, self.classes_ = {}, {}
        max_frames = max(c.shape[0] for c in clips)
        h, w, ch = clips[0].shape[1:]
        for ds in dict.fromkeys(ids):
            rows = np.flatnonzero(ids == ds)
            frames = {clips[i].shape[0] for i in rows}
            if len(frames) != 1:
                raise ValueError(f"dataset {ds!r} mixes frame counts {sorted(frames)}")
            n = frames.pop()
            classes, enc = np.unique(np.asarray(y)[rows], return_inverse=True)
            if len(classes) < 2:
                raise ValueError(f"dataset {ds!r} needs at least two classes")
            self.classes_[ds] = classes
            x = np.stack([clips[i] for i in rows])
            spec = DatasetSpec(str(ds), "external", len(classes), len(rows), len(classes),
                               modality="image" if n == 1 else "video", frames=n, height=h, width=w,
                               channels=ch, seed=self.random_state)
            reg[str(ds)] = Dataset(spec, x, enc.astype(np.int64), x[:0], enc[:0])
        return reg, max_frames, (h, w, ch)

    def fit(self, X, y, dataset=None):
        clips = check_clips(X)
        y = np.asarray(y)
        if y.shape != (len(clips),):
            raise ValueError(f"y: expected {len(clips)} labels, got shape {y.shape}")
        ids = _dataset_ids(dataset, len(clips))
        reg, frames, (h, w, ch) = self._registry(clips, y, ids)
        self.model_config_ = ModelConfig(
            depth=self.depth, d_model=self.d_model, heads=self.heads, patch_size=self.patch_size,
            frames=frames, height=h, width=w, channels=ch, seed=self.random_state,
            head_classes={k: d.spec.num_classes for k, d in reg.items()},
        )
        self.params_ = init_params(self.model_config_)
        common = dict(batch_size=self.batch_size, base_lr=self.learning_rate, momentum=self.momentum,
                      seed=self.random_state)
        images = {k: d for k, d in reg.items() if d.spec.modality == "image"}
        if self.pretrain_epochs and images:
            pretrain_spatial(self.params_, self.model_config_, images,
                             TrainConfig(stage="pretrain", epochs=self.pretrain_epochs, **common))
        weights = {k: float(v) for k, v in (self.loss_weights or {}).items() if k in reg}
        if not any(d.spec.modality == "video" for d in reg.values()):
            # image-only data: plain training through the same loop
            state = pretrain_spatial(self.params_, self.model_config_, reg,
                                     TrainConfig(stage="pretrain", epochs=self.epochs, **common))
        else:
            state = cotrain(self.params_, self.model_config_, reg,
                            TrainConfig(stage="cotrain", epochs=self.epochs, loss_weights=weights, **common))
        self.loss_curve_ = list(state.epoch_losses)
        self.datasets_ = list(reg)
        self.n_features_out_ = self.d_model
        return self

    def _resolve(self, dataset) -> str:
        check_is_fitted(self, "params_")
        if dataset is None:
            if len(self.datasets_) != 1:
                raise ValueError(f"model has heads {self.datasets_}; pass dataset=")
            return self.datasets_[0]
        if dataset not in self.classes_:
            raise KeyError(f"unknown dataset {dataset!r}; fitted heads are {self.datasets_}")
        return dataset

    def _grouped(self, X):
        clips = check_clips(X)
        cfg = self.model_config_
        if clips[0].shape[1:] != (cfg.height, cfg.width, cfg.channels):
            raise ValueError(f"clip frames {clips[0].shape[1:]} differ from fitted "
                             f"{(cfg.height, cfg.width, cfg.channels)}")
        by_n: dict[int, list[int]] = {}
        for i, c in enumerate(clips):
            by_n.setdefault(c.shape[0], []).append(i)
        return clips, by_n

    def predict_proba(self, X, dataset=None):
        ds = self._resolve(dataset)
        clips, by_n = self._grouped(X)
        out = np.zeros((len(clips), len(self.classes_[ds])))
        for n, rows in by_n.items():
            x = np.stack([clips[i] for i in rows])
            out[rows] = view_probabilities(self.params_, self.model_config_, ds, x, views=1)[0]
        return out

    def predict(self, X, dataset=None):
        ds = self._resolve(dataset)
        proba = self.predict_proba(X, ds)
        return self.classes_[ds][predict_views(proba[None])]

    def score(self, X, y, sample_weight=None, dataset=None):
        from sklearn.metrics import accuracy_score

        return accuracy_score(y, self.predict(X, dataset), sample_weight=sample_weight)

    def transform(self, X):
        check_is_fitted(self, "params_")
        clips, by_n = self._grouped(X)
        out = np.zeros((len(clips), self.d_model), dtype=np.float32)
        for n, rows in by_n.items():
            x = np.stack([clips[i] for i in rows])
            out[rows] = model_forward(x, self.params_, self.model_config_).values
        return out
