"""Factorized space-time video transformer with per-dataset heads.

Tokens live on a grid of shape ``(batch, frames, 1 + patches, d_model)``;
slot 0 of every frame holds a class token. Each block applies temporal
attention (patch tokens at one spatial index attend across frames), then
spatial attention (all tokens of one frame attend to each other), then a
position-wise MLP, all as pre-norm residual sublayers.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from covervid import ops
from covervid.tensor import Tensor

SPATIAL, TEMPORAL, HEAD = "spatial", "temporal", "head"
PARTITIONS = (SPATIAL, TEMPORAL, HEAD)

TemporalMode = Literal["attend", "bypass", "skip"]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 2
    d_model: int = 32
    heads: int = 4
    patch_size: int = 4
    frames: int = 4
    height: int = 16
    width: int = 16
    channels: int = 1
    mlp_ratio: int = 4
    eps: float = 1e-5
    dtype: str = "float32"
    seed: int = 0
    zero_temporal_out: bool = True
    temporal_pos: bool = True
    head_classes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"frame {self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )
        if self.frames < 1 or self.depth < 0:
            raise ConfigError("frames must be >= 1 and depth >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for k, c in self.head_classes.items():
            if int(c) < 1:
                raise ConfigError(f"head {k!r} needs at least one class")
        self.head_classes = {str(k): int(v) for k, v in self.head_classes.items()}

    @property
    def patches_per_frame(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_classes"] = dict(sorted(self.head_classes.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def partition_of(name: str) -> str:
    """Partition tag from a parameter name.

    The temporal sublayer's pre-norm belongs with the temporal attention it
    feeds; every other backbone parameter is spatial.
    """
    if name.startswith("head."):
        return HEAD
    if ".temporal." in name or ".norm_t." in name:
        return TEMPORAL
    return SPATIAL


class ModelParams(dict):
    """Mapping from parameter name to :class:`Tensor`, grouped into partitions."""

    def partition(self, name: str) -> str:
        return partition_of(name)

    def names(self, *parts: str) -> list[str]:
        return [k for k in self if partition_of(k) in parts]

    def head_names(self, dataset_id: str) -> list[str]:
        prefix = f"head.{dataset_id}."
        return [k for k in self if k.startswith(prefix)]

    def count(self, *parts: str) -> int:
        parts = parts or PARTITIONS
        return int(sum(self[k].values.size for k in self.names(*parts)))

    def digest(self, names=None) -> str:
        h = hashlib.sha256()
        for k in sorted(self if names is None else names):
            v = self[k].values
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, p in self.items():
            out[k] = Tensor(p.values.copy(), requires_grad=p.requires_grad, name=k)
        return out

    def set_trainable(self, names) -> None:
        names = set(names)
        for k, p in self.items():
            p.requires_grad = k in names
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())]))


def _uniform(name: str, shape, fan_in: int, seed: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return _rng_for(seed, name).uniform(-bound, bound, size=shape).astype(dtype)


def _normal(name: str, shape, std: float, seed: int, dtype) -> np.ndarray:
    return (_rng_for(seed, name).standard_normal(size=shape) * std).astype(dtype)


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple]:
    return {
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


def init_head(cfg: ModelConfig, dataset_id: str, n_classes: int, seed: int | None = None) -> dict[str, Tensor]:
    seed = cfg.seed if seed is None else seed
    dt = cfg.np_dtype
    w = f"head.{dataset_id}.w"
    return {
        w: Tensor(_uniform(w, (cfg.d_model, n_classes), cfg.d_model, seed, dt), name=w),
        f"head.{dataset_id}.b": Tensor(np.zeros(n_classes, dt), name=f"head.{dataset_id}.b"),
    }


def init_params(cfg: ModelConfig) -> ModelParams:
    """Seed-deterministic initialization; each tensor draws from its own stream."""
    d, dt, seed = cfg.d_model, cfg.np_dtype, cfg.seed
    hidden = cfg.mlp_ratio * d
    shapes: dict[str, tuple] = {
        "embed.w": (cfg.patch_dim, d), "embed.b": (d,),
        "pos.spatial": (cfg.patches_per_frame, d), "pos.temporal": (cfg.frames, d),
        "cls": (d,),
        "norm_f.g": (d,), "norm_f.b": (d,),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        for sub in ("norm_t", "norm_s", "norm_m"):
            shapes[f"{b}.{sub}.g"] = (d,)
            shapes[f"{b}.{sub}.b"] = (d,)
        shapes.update(_attn_shapes(f"{b}.temporal", d))
        shapes.update(_attn_shapes(f"{b}.spatial", d))
        shapes.update({f"{b}.mlp.w1": (d, hidden), f"{b}.mlp.b1": (hidden,),
                       f"{b}.mlp.w2": (hidden, d), f"{b}.mlp.b2": (d,)})

    params = ModelParams()
    for name in sorted(shapes):
        shape = shapes[name]
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("pos.") or name == "cls":
            v = _normal(name, shape, 0.02, seed, dt)
        elif name.endswith(".g"):
            v = np.ones(shape, dt)
        elif leaf.startswith("w"):
            if cfg.zero_temporal_out and ".temporal.wo" in name:
                v = np.zeros(shape, dt)
            else:
                v = _uniform(name, shape, shape[0], seed, dt)
        else:
            v = np.zeros(shape, dt)
        params[name] = Tensor(v, name=name)
    for ds in sorted(cfg.head_classes):
        params.update(init_head(cfg, ds, cfg.head_classes[ds]))
    return params


def clip_patches(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """``(B, n, h, w, c)`` pixels to ``(B, n, s, p*p*c)`` flattened patches."""
    if x.ndim != 5:
        raise ConfigError(f"expected clips shaped (batch, frames, h, w, c), got {x.shape}")
    b, n, h, w, c = x.shape
    if (h, w, c) != (cfg.height, cfg.width, cfg.channels) or not 1 <= n <= cfg.frames:
        raise ConfigError(
            f"clip frames {n}x{h}x{w}x{c} do not match model "
            f"(1..{cfg.frames})x{cfg.height}x{cfg.width}x{cfg.channels}"
        )
    p = cfg.patch_size
    g = x.reshape(b, n, h // p, p, w // p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
    return np.ascontiguousarray(g.reshape(b, n, (h // p) * (w // p), p * p * c), dtype=cfg.np_dtype)


def patchify(x: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Embed a batch of clips into a token grid ``(B, n, s + 1, d)``."""
    patches = Tensor(clip_patches(x, cfg))
    b, n, s, _ = patches.shape
    tok = ops.linear(patches, params["embed.w"], params["embed.b"])
    tok = ops.add(tok, ops.broadcast_to(params["pos.spatial"], (b, n)))
    if cfg.temporal_pos:
        pt = ops.slice_axis(params["pos.temporal"], 0, 0, n)
        pt = ops.transpose(ops.broadcast_to(pt, (s,)), (1, 0, 2))
        tok = ops.add(tok, ops.broadcast_to(pt, (b,)))
    cls = ops.broadcast_to(ops.reshape(params["cls"], (1, cfg.d_model)), (b, n))
    return ops.concat([cls, tok], axis=2)


def mha(keys: Tensor, queries: Tensor, values: Tensor, params: ModelParams, prefix: str,
        heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention over the second-to-last axis.

    ``keys``/``values`` are ``lead + (Tk, d)`` and ``queries`` ``lead + (Tq, d)``.
    Per-head outputs are concatenated and passed through the output affine map.
    """
    d = queries.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if keys.shape != values.shape:
        raise ConfigError(f"key set {keys.shape} and value set {values.shape} differ")
    dh = d // heads
    lead = queries.shape[:-2]
    nl = len(lead)
    tq, tk = queries.shape[-2], keys.shape[-2]

    def split(t: Tensor, n_tok: int, axes) -> Tensor:
        t = ops.reshape(t, lead + (n_tok, heads, dh))
        return ops.transpose(t, tuple(range(nl)) + axes)

    q = split(ops.linear(queries, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), tq, (nl + 1, nl, nl + 2))
    k = split(ops.linear(keys, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), tk, (nl + 1, nl + 2, nl))
    v = split(ops.linear(values, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), tk, (nl + 1, nl, nl + 2))
    att = ops.softmax_lastdim(ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh)))
    out = ops.matmul(att, v)
    out = ops.reshape(ops.transpose(out, tuple(range(nl)) + (nl + 1, nl, nl + 2)), lead + (tq, d))
    out = ops.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return (out, att) if return_weights else out


def attention_bypass(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Attention over a one-element set: the value path followed by the output map."""
    v = ops.linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    return ops.linear(v, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _norm(x: Tensor, params: ModelParams, prefix: str, eps: float) -> Tensor:
    return ops.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def block_forward(grid: Tensor, params: ModelParams, cfg: ModelConfig, index: int,
                  temporal: TemporalMode = "attend") -> Tensor:
    b = f"blocks.{index}"
    nb, n, S, d = grid.shape
    cls = ops.slice_axis(grid, 2, 0, 1)
    tok = ops.slice_axis(grid, 2, 1, S)
    if temporal == "attend":
        xt = ops.transpose(tok, (0, 2, 1, 3))
        h = _norm(xt, params, f"{b}.norm_t", cfg.eps)
        a = mha(h, h, h, params, f"{b}.temporal", cfg.heads)
        tok = ops.add(tok, ops.transpose(a, (0, 2, 1, 3)))
    elif temporal == "bypass":
        h = _norm(tok, params, f"{b}.norm_t", cfg.eps)
        tok = ops.add(tok, attention_bypass(h, params, f"{b}.temporal"))
    elif temporal != "skip":
        raise ValueError(f"unknown temporal mode {temporal!r}")
    grid = ops.concat([cls, tok], axis=2)

    h = _norm(grid, params, f"{b}.norm_s", cfg.eps)
    grid = ops.add(grid, mha(h, h, h, params, f"{b}.spatial", cfg.heads))

    h = _norm(grid, params, f"{b}.norm_m", cfg.eps)
    h = ops.gelu(ops.linear(h, params[f"{b}.mlp.w1"], params[f"{b}.mlp.b1"]))
    return ops.add(grid, ops.linear(h, params[f"{b}.mlp.w2"], params[f"{b}.mlp.b2"]))


def forward(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
            temporal: TemporalMode = "attend") -> Tensor:
    """Batch of clips ``(B, n, h, w, c)`` to representations ``(B, d_model)``.

    ``temporal="bypass"`` evaluates the temporal sublayers in their
    single-element form (what attention reduces to when ``n == 1``);
    ``"skip"`` drops them altogether.
    """
    grid = patchify(np.asarray(x), params, cfg)
    for i in range(cfg.depth):
        grid = block_forward(grid, params, cfg, i, temporal)
    nb, n, _, d = grid.shape
    cls = ops.reshape(ops.slice_axis(grid, 2, 0, 1), (nb, n, d))
    cls = _norm(cls, params, "norm_f", cfg.eps)
    return ops.mean_axis(cls, 1)


def classify(dataset_id: str, rep: Tensor, params: ModelParams) -> Tensor:
    w, bias = f"head.{dataset_id}.w", f"head.{dataset_id}.b"
    if w not in params:
        raise KeyError(f"no classification head registered for dataset {dataset_id!r}")
    return ops.linear(rep, params[w], params[bias])
