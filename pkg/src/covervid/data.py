"""Synthetic video/image datasets, proportional batch sampling, augmentation.

Every random draw comes from a Philox4x64-10 counter-based generator keyed by
``(seed, crc32(stream name))`` with the item index in the top counter word, so
clip ``i`` of a dataset depends only on ``(spec, i)``: generation can be
sharded freely and is reproducible anywhere Philox and CRC-32 are.

Three generator families:

``appearance``
    static stripes, class = (horizontal|vertical, period), random phase;
    frames differ only by pixel noise.
``motion``
    a Gaussian blob translating on a torus in a class-specific direction.
    Classes come in reversal pairs ``(2k, 2k + 1)`` with opposite velocity.
``texture``
    single-frame oblique stripes whose (orientation, period) grid is disjoint
    from the appearance family.

All stripe classes are invariant under a horizontal flip (oblique classes
draw the sign of their angle per clip), so flip augmentation is label-safe
for them. Motion classes are not, hence ``flip_allowed=False`` there.
"""

from __future__ import annotations

import math
import zlib
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

Modality = Literal["video", "image"]
Kind = Literal["appearance", "motion", "texture", "external"]

NOISE_SIGMA = 0.05
MOTION_SPEED = 2.0
BLOB_SIGMA = 1.2

_SPLIT_CODE = {"train": 0, "eval": 1}


class DatasetError(ValueError):
    pass


def philox(seed: int, stream: str, index: int = 0, sub: int = 0) -> np.random.Generator:
    """Generator for item ``index`` of a named stream; independent per (seed, stream, sub, index)."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode())]
    counter = [0, 0, int(sub) & 0xFFFFFFFFFFFFFFFF, int(index) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass
class DatasetSpec:
    id: str
    kind: Kind
    num_classes: int
    train_size: int
    eval_size: int
    modality: Modality = "video"
    name: str = ""
    flip_allowed: bool = True
    loss_weight: float = 1.0
    seed: int = 0
    frames: int = 4
    height: int = 16
    width: int = 20
    channels: int = 1

    def __post_init__(self):
        if self.kind not in ("appearance", "motion", "texture", "external"):
            raise DatasetError(f"{self.id}: unknown generator kind {self.kind!r}")
        if self.modality not in ("video", "image"):
            raise DatasetError(f"{self.id}: unknown modality {self.modality!r}")
        if self.num_classes < 2:
            raise DatasetError(f"{self.id}: need at least 2 classes, got {self.num_classes}")
        if self.train_size < self.num_classes or self.eval_size < self.num_classes:
            raise DatasetError(f"{self.id}: split sizes must be >= class count {self.num_classes}")
        if self.kind == "motion" and self.num_classes % 2:
            raise DatasetError(f"{self.id}: motion classes come in reversal pairs; C must be even")
        if self.kind == "motion" and self.num_classes > 8:
            raise DatasetError(f"{self.id}: motion supports at most 8 directions")
        if self.modality == "image" and self.frames != 1:
            raise DatasetError(f"{self.id}: image datasets have exactly one frame")
        if self.kind == "texture" and self.modality != "image":
            raise DatasetError(f"{self.id}: texture family is image-only")
        if self.kind == "texture" and self.num_classes > 8:
            raise DatasetError(f"{self.id}: texture family has at most 8 classes")
        if self.kind == "appearance" and self.num_classes > 4:
            raise DatasetError(f"{self.id}: appearance family has at most 4 classes")
        if self.loss_weight < 0:
            raise DatasetError(f"{self.id}: loss weight must be >= 0")
        if not self.name:
            self.name = self.id

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VideoClip:
    frames: np.ndarray  # (n, h, w, c) in [0, 1]
    label: int
    source: str

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Dataset:
    spec: DatasetSpec
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray

    def clip(self, index: int, split: str = "train") -> VideoClip:
        x, y = (self.train_x, self.train_y) if split == "train" else (self.eval_x, self.eval_y)
        return VideoClip(x[index], int(y[index]), self.spec.id)

    def split(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        if split == "train":
            return self.train_x, self.train_y
        if split == "eval":
            return self.eval_x, self.eval_y
        raise DatasetError(f"unknown split {split!r}")


# -- rendering ---------------------------------------------------------------

def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return yy, xx


def render_stripes(h: int, w: int, angle: float, period: float, phase: float) -> np.ndarray:
    yy, xx = _grid(h, w)
    proj = xx * math.cos(angle) + yy * math.sin(angle)
    return 0.5 + 0.4 * np.sin(2 * math.pi * proj / period + phase)


def render_blob(h: int, w: int, cy: float, cx: float, amp: float = 0.9) -> np.ndarray:
    """Gaussian blob on a torus (periodic in both axes)."""
    yy, xx = _grid(h, w)
    dy = np.abs(yy - cy % h)
    dx = np.abs(xx - cx % w)
    dy = np.minimum(dy, h - dy)
    dx = np.minimum(dx, w - dx)
    return 0.05 + amp * np.exp(-(dy**2 + dx**2) / (2 * BLOB_SIGMA**2))


_DIRECTIONS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)]


def motion_velocity(label: int) -> tuple[float, float]:
    """(dy, dx) pixels per frame for a motion class."""
    dy, dx = _DIRECTIONS[label]
    norm = math.hypot(dy, dx)
    return MOTION_SPEED * dy / norm, MOTION_SPEED * dx / norm


def reversal_partner(label: int) -> int:
    """Motion class whose clips are the time-reversal of ``label``'s clips."""
    return label ^ 1


def mirror_partner(label: int) -> int:
    """Motion class obtained by mirroring a clip left-to-right."""
    dy, dx = _DIRECTIONS[label]
    return _DIRECTIONS.index((dy, -dx))


def render_motion(frames: int, h: int, w: int, y0: float, x0: float, label: int,
                  noise: np.ndarray | None = None) -> np.ndarray:
    vy, vx = motion_velocity(label)
    out = np.stack([render_blob(h, w, y0 + t * vy, x0 + t * vx) for t in range(frames)])
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0)


def appearance_params(label: int) -> tuple[float, float]:
    """(angle, period) for the appearance family: {horizontal, vertical} x {4, 6.5} px."""
    return (0.0, math.pi / 2)[label % 2], (4.0, 6.5)[(label // 2) % 2]


def texture_params(label: int, num_classes: int) -> tuple[float, float]:
    """(|angle|, period) for the single-frame texture family.

    Oblique orientations (the sign is drawn per clip) and periods that never
    occur in the appearance family.
    """
    angle = (math.pi / 6, math.pi / 3)[label % 2]
    period = (3.0, 5.0, 7.5, 11.0)[(label // 2) % 4]
    return angle, period


def _gen_clip(spec: DatasetSpec, split: str, index: int) -> tuple[np.ndarray, int]:
    rng = philox(spec.seed, f"data:{spec.id}", index, _SPLIT_CODE[split])
    label = index % spec.num_classes
    n, h, w = spec.frames, spec.height, spec.width
    if spec.kind == "appearance":
        angle, period = appearance_params(label)
        img = render_stripes(h, w, angle, period, rng.uniform(0, 2 * math.pi))
        frames = np.broadcast_to(img, (n, h, w)) + rng.normal(0, NOISE_SIGMA, size=(n, h, w))
    elif spec.kind == "motion":
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        frames = render_motion(n, h, w, y0, x0, label, rng.normal(0, NOISE_SIGMA, size=(n, h, w)))
    else:
        angle, period = texture_params(label, spec.num_classes)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        img = render_stripes(h, w, sign * angle, period, rng.uniform(0, 2 * math.pi))
        frames = img[None] + rng.normal(0, NOISE_SIGMA, size=(1, h, w))
    frames = np.clip(frames, 0.0, 1.0)
    frames = np.repeat(frames[..., None], spec.channels, axis=-1)
    return frames.astype(np.float32), label


def _gen_split(spec: DatasetSpec, split: str, size: int):
    x = np.empty((size, spec.frames, spec.height, spec.width, spec.channels), np.float32)
    y = np.empty(size, np.int64)
    for i in range(size):
        x[i], y[i] = _gen_clip(spec, split, i)
    return x, y


def generate(spec: DatasetSpec) -> Dataset:
    if spec.kind == "external":
        raise DatasetError(f"{spec.id}: external datasets are supplied, not generated")
    tx, ty = _gen_split(spec, "train", spec.train_size)
    ex, ey = _gen_split(spec, "eval", spec.eval_size)
    return Dataset(spec, tx, ty, ex, ey)


def gen_appearance_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind != "appearance":
        raise DatasetError(f"{spec.id} is a {spec.kind} spec")
    return generate(spec)


def gen_motion_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind != "motion":
        raise DatasetError(f"{spec.id} is a {spec.kind} spec")
    return generate(spec)


def gen_image_dataset(spec: DatasetSpec) -> Dataset:
    if spec.modality != "image":
        raise DatasetError(f"{spec.id}: image generator needs image modality")
    return generate(spec)


def default_specs(seed: int = 0) -> list[DatasetSpec]:
    return [
        DatasetSpec("motion", "motion", 4, 2000, 500, flip_allowed=False, seed=seed),
        DatasetSpec("appearance", "appearance", 4, 2000, 500, seed=seed),
        DatasetSpec("image", "texture", 8, 4000, 500, modality="image", frames=1, loss_weight=0.5,
                    seed=seed),
    ]


# -- per-clip transforms -----------------------------------------------------

def reverse_frames(clip):
    """Invert frame order. Accepts a :class:`VideoClip` or a raw ``(..., n, h, w, c)`` array."""
    if isinstance(clip, VideoClip):
        return VideoClip(np.ascontiguousarray(clip.frames[::-1]), clip.label, clip.source)
    arr = np.asarray(clip)
    return np.ascontiguousarray(np.flip(arr, axis=-4))


def augment(frames: np.ndarray, spec: DatasetSpec, rng: np.random.Generator,
            crop: tuple[int, int]) -> np.ndarray:
    """Random crop (one offset for all frames) plus policy-gated horizontal flip."""
    n, h, w, c = frames.shape
    ch, cw = crop
    if ch > h or cw > w:
        raise DatasetError(f"crop {crop} larger than frame {h}x{w}")
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < 0.5)
    out = frames[:, oy:oy + ch, ox:ox + cw]
    if flip and spec.flip_allowed:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def eval_crop_offsets(h: int, w: int, crop: tuple[int, int], views: int) -> list[tuple[int, int]]:
    """Deterministic crop corners: center for one view; start/center/end along the long side for three."""
    ch, cw = crop
    if ch > h or cw > w:
        raise DatasetError(f"crop {crop} larger than frame {h}x{w}")
    cy, cx = (h - ch) // 2, (w - cw) // 2
    if views == 1:
        return [(cy, cx)]
    if views != 3:
        raise DatasetError(f"views must be 1 or 3, got {views}")
    if w >= h:
        return [(cy, 0), (cy, cx), (cy, w - cw)]
    return [(0, cx), (cy, cx), (h - ch, cx)]


# -- sampling ----------------------------------------------------------------

@dataclass
class SamplerState:
    """Size-proportional, with-replacement per-slot sampler.

    Within each dataset, items are consumed along seed-determined
    permutations (one per pass), so the whole state is the step counter plus
    one draw count per dataset.
    """

    sizes: dict[str, int]
    seed: int = 0
    step: int = 0
    counts: dict[str, int] = field(default_factory=dict)
    log: list[tuple[int, list[str]]] | None = None

    def __post_init__(self):
        if not self.sizes:
            raise DatasetError("sampler needs at least one registered dataset")
        for k in self.sizes:
            self.counts.setdefault(k, 0)

    @classmethod
    def from_specs(cls, specs, seed: int = 0, audit: bool = False) -> "SamplerState":
        return cls({s.id: s.train_size for s in specs}, seed=seed, log=[] if audit else None)

    @property
    def ids(self) -> list[str]:
        return list(self.sizes)

    @property
    def probabilities(self) -> np.ndarray:
        sz = np.array([self.sizes[k] for k in self.ids], dtype=np.float64)
        return sz / sz.sum()

    def _item(self, ds: str, count: int) -> int:
        size = self.sizes[ds]
        lap, pos = divmod(count, size)
        return int(_permutation(self.seed, ds, lap, size)[pos])

    def state_dict(self) -> dict:
        # slot draws index into the registry order, so it is stored explicitly
        return {"order": self.ids, "sizes": dict(self.sizes), "seed": self.seed, "step": self.step,
                "counts": dict(self.counts)}

    @classmethod
    def from_state(cls, d: dict) -> "SamplerState":
        order = d.get("order", list(d["sizes"]))
        return cls({k: int(d["sizes"][k]) for k in order}, seed=int(d["seed"]), step=int(d["step"]),
                   counts={k: int(d["counts"][k]) for k in order})


@lru_cache(maxsize=64)
def _permutation(seed: int, ds: str, lap: int, size: int) -> np.ndarray:
    return philox(seed, f"perm:{ds}", lap).permutation(size)


def compose_batch(sampler: SamplerState, batch_size: int) -> list[tuple[str, int]]:
    """Draw ``batch_size`` (dataset id, train index) slots and advance the sampler."""
    if not sampler.sizes:
        raise DatasetError("empty dataset registry")
    ids = sampler.ids
    rng = philox(sampler.seed, "slots", sampler.step)
    picks = rng.choice(len(ids), size=batch_size, p=sampler.probabilities)
    out = []
    for j in picks:
        ds = ids[int(j)]
        out.append((ds, sampler._item(ds, sampler.counts[ds])))
        sampler.counts[ds] += 1
    if sampler.log is not None:
        sampler.log.append((sampler.step, [ds for ds, _ in out]))
    sampler.step += 1
    return out
