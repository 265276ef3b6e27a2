import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covervid import ops
from covervid.gradcheck import check_gradients
from covervid.model import (HEAD, SPATIAL, TEMPORAL, ConfigError, ModelConfig, classify, clip_patches,
                            forward, init_head, init_params, mha, partition_of)
from covervid.tensor import Tape, Tensor


def small_cfg(**kw):
    base = dict(depth=2, d_model=16, heads=2, patch_size=4, frames=3, height=8, width=8,
                head_classes={"a": 3, "b": 2})
    base.update(kw)
    return ModelConfig(**base)


def clips(rng, b, n, cfg):
    return rng.normal(size=(b, n, cfg.height, cfg.width, cfg.channels)).astype(cfg.np_dtype)


# -- patch embedding --

@pytest.mark.parametrize("h,w,p,expected", [(224, 224, 16, 196), (16, 16, 4, 16), (16, 20, 4, 20)])
def test_patch_count(h, w, p, expected):
    assert ModelConfig(height=h, width=w, patch_size=p).patches_per_frame == expected


def test_patch_size_must_divide_frame():
    with pytest.raises(ConfigError, match="not divisible"):
        ModelConfig(height=10, width=16, patch_size=4)


def test_clip_patches_round_trip():
    cfg = ModelConfig(height=8, width=8, patch_size=4)
    x = np.arange(2 * 1 * 8 * 8, dtype=np.float32).reshape(2, 1, 8, 8, 1)
    p = clip_patches(x, cfg)
    assert p.shape == (2, 1, 4, 16)
    np.testing.assert_array_equal(p[0, 0, 1].reshape(4, 4), x[0, 0, :4, 4:, 0])


def test_zero_clip_embeds_to_bias_plus_position():
    cfg = small_cfg()
    params = init_params(cfg)
    from covervid.model import patchify

    tok = patchify(np.zeros((1, 2, 8, 8, 1), np.float32), params, cfg).values
    expected = params["embed.b"].values + params["pos.spatial"].values + params["pos.temporal"].values[1]
    np.testing.assert_allclose(tok[0, 1, 1:], expected, atol=1e-6)


def test_embedding_is_affine_in_pixels(rng):
    cfg = small_cfg(dtype="float64", temporal_pos=False)
    params = init_params(cfg)
    from covervid.model import patchify

    a, b = clips(rng, 1, 2, cfg), clips(rng, 1, 2, cfg)
    z = patchify(np.zeros_like(a), params, cfg).values
    pa, pb = patchify(a, params, cfg).values, patchify(b, params, cfg).values
    pab = patchify(a + b, params, cfg).values
    np.testing.assert_allclose(pab - z, (pa - z) + (pb - z), atol=1e-10)


# -- attention --

def _attn_params(rng, d, prefix="att"):
    p = {}
    for m in "qkvo":
        p[f"{prefix}.w{m}"] = Tensor(rng.normal(size=(d, d)) / np.sqrt(d))
        p[f"{prefix}.b{m}"] = Tensor(rng.normal(size=d) * 0.1)
    return p


def test_single_key_gets_full_weight(rng):
    p = _attn_params(rng, 8)
    kv = Tensor(rng.normal(size=(1, 8)))
    q = Tensor(rng.normal(size=(3, 8)))
    _, att = mha(kv, q, kv, p, "att", heads=2, return_weights=True)
    np.testing.assert_allclose(att.values, 1.0)


def test_identical_keys_split_weight(rng):
    p = _attn_params(rng, 8)
    row = rng.normal(size=(1, 8))
    kv = Tensor(np.concatenate([row, row]))
    _, att = mha(kv, Tensor(rng.normal(size=(1, 8))), kv, p, "att", heads=2, return_weights=True)
    np.testing.assert_allclose(att.values, 0.5, atol=1e-12)


def test_key_value_permutation_invariance(rng):
    p = _attn_params(rng, 8)
    kv = rng.normal(size=(5, 8))
    q = Tensor(rng.normal(size=(2, 8)))
    perm = rng.permutation(5)
    a = mha(Tensor(kv), q, Tensor(kv), p, "att", 2).values
    b = mha(Tensor(kv[perm]), q, Tensor(kv[perm]), p, "att", 2).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_heads_must_divide_width(rng):
    p = _attn_params(rng, 6)
    x = Tensor(rng.normal(size=(2, 6)))
    with pytest.raises(ConfigError):
        mha(x, x, x, p, "att", heads=4)


def test_kv_shape_mismatch(rng):
    p = _attn_params(rng, 8)
    with pytest.raises(ConfigError):
        mha(Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 8))),
            Tensor(rng.normal(size=(3, 8))), p, "att", 2)


# -- single-frame degeneracy --

@pytest.mark.parametrize("zero_out", [True, False])
def test_single_frame_attend_equals_bypass(rng, zero_out):
    cfg = small_cfg(zero_temporal_out=zero_out)
    params = init_params(cfg)
    x = clips(rng, 4, 1, cfg)
    a = forward(x, params, cfg, "attend").values
    b = forward(x, params, cfg, "bypass").values
    assert np.max(np.abs(a - b)) <= 1e-6


def test_multi_frame_attend_differs_from_bypass(rng):
    cfg = small_cfg(zero_temporal_out=False)
    params = init_params(cfg)
    x = clips(rng, 2, 3, cfg)
    assert np.max(np.abs(forward(x, params, cfg, "attend").values - forward(x, params, cfg, "bypass").values)) > 1e-4


def test_zero_init_output_makes_bypass_a_no_op(rng):
    cfg = small_cfg()
    params = init_params(cfg)
    x = clips(rng, 2, 1, cfg)
    np.testing.assert_array_equal(forward(x, params, cfg, "bypass").values, forward(x, params, cfg, "skip").values)


# -- structural properties --

@settings(max_examples=10, deadline=None)
@given(st.permutations(range(3)), st.integers(0, 2**16))
def test_frame_permutation_equivariance(perm, seed):
    cfg = small_cfg(dtype="float64", temporal_pos=False, zero_temporal_out=False)
    params = init_params(cfg)
    x = clips(np.random.default_rng(seed), 2, 3, cfg)
    a = forward(x, params, cfg).values
    b = forward(x[:, list(perm)], params, cfg).values
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_zero_block_weights_give_identity_blocks(rng):
    cfg = small_cfg(dtype="float64")
    params = init_params(cfg)
    for k in params:
        if k.startswith("blocks.") and (k.endswith(".wo") or k.endswith(".bo") or ".mlp.w2" in k or ".mlp.b2" in k):
            params[k].values[...] = 0.0
    x = clips(rng, 2, 2, cfg)
    from covervid.model import block_forward, patchify

    grid = patchify(x, params, cfg)
    np.testing.assert_array_equal(block_forward(grid, params, cfg, 0).values, grid.values)


def test_spatial_attention_never_mixes_frames(rng):
    cfg = small_cfg(dtype="float64", temporal_pos=False)
    params = init_params(cfg)
    x = clips(rng, 1, 3, cfg)
    y = x.copy()
    y[:, 2] += 1.0
    from covervid.model import block_forward, patchify

    a = block_forward(patchify(x, params, cfg), params, cfg, 0, "skip").values
    b = block_forward(patchify(y, params, cfg), params, cfg, 0, "skip").values
    np.testing.assert_array_equal(a[:, :2], b[:, :2])
    assert np.abs(a[:, 2] - b[:, 2]).max() > 0


def test_output_shape_and_logits(rng):
    cfg = small_cfg()
    params = init_params(cfg)
    rep = forward(clips(rng, 5, 3, cfg), params, cfg)
    assert rep.shape == (5, 16)
    assert classify("a", rep, params).shape == (5, 3)
    assert classify("b", rep, params).shape == (5, 2)


def test_unknown_head(rng):
    cfg = small_cfg()
    params = init_params(cfg)
    with pytest.raises(KeyError, match="zzz"):
        classify("zzz", forward(clips(rng, 1, 1, cfg), params, cfg), params)


def test_too_many_frames_rejected(rng):
    cfg = small_cfg()
    with pytest.raises(ConfigError):
        forward(clips(rng, 1, 4, cfg), init_params(cfg), cfg)


def test_head_isolation(rng):
    cfg = small_cfg(dtype="float64")
    params = init_params(cfg)
    params.set_trainable(list(params))
    with Tape() as tape:
        rep = forward(clips(rng, 2, 2, cfg), params, cfg)
        tape.backward(ops.cross_entropy(classify("a", rep, params), [0, 2]))
    assert params["head.b.w"].grad is None and params["head.b.b"].grad is None
    assert np.abs(params["head.a.w"].grad).sum() > 0


# -- partitions and init --

def test_partitions_cover_every_parameter_once():
    params = init_params(small_cfg())
    parts = [params.names(p) for p in (SPATIAL, TEMPORAL, HEAD)]
    flat = [k for p in parts for k in p]
    assert sorted(flat) == sorted(params) and len(set(flat)) == len(flat)
    assert all(".temporal." in k or ".norm_t." in k for k in parts[1])
    assert parts[2] == ["head.a.w", "head.a.b", "head.b.w", "head.b.b"] or sorted(parts[2]) == sorted(
        ["head.a.w", "head.a.b", "head.b.w", "head.b.b"])


def test_partition_of():
    assert partition_of("blocks.0.temporal.wq") == TEMPORAL
    assert partition_of("blocks.1.norm_t.g") == TEMPORAL
    assert partition_of("blocks.1.spatial.wq") == SPATIAL
    assert partition_of("embed.w") == SPATIAL
    assert partition_of("head.motion.w") == HEAD


def test_init_is_deterministic_and_seeded():
    a, b = init_params(small_cfg()), init_params(small_cfg())
    assert a.digest() == b.digest()
    assert init_params(small_cfg(seed=1)).digest() != a.digest()


def test_adding_a_head_leaves_other_params_unchanged():
    a = init_params(small_cfg())
    b = init_params(small_cfg(head_classes={"a": 3, "b": 2, "c": 5}))
    assert a.digest(list(a)) == b.digest(list(a))
    assert init_head(small_cfg(), "c", 5)["head.c.w"].shape == (16, 5)


# -- gradient fidelity of the whole model --

def test_full_model_gradcheck():
    cfg = small_cfg(dtype="float64", zero_temporal_out=False)
    params = init_params(cfg)
    rng = np.random.default_rng(7)
    x = clips(rng, 2, 2, cfg)

    def loss():
        rep = forward(x, params, cfg)
        return ops.cross_entropy(classify("a", rep, params), [1, 2])

    results = check_gradients(loss, dict(params), samples=40, seed=3)
    worst = max(r[-1] for r in results)
    assert len(results) >= 20 and worst < 1e-4, worst
