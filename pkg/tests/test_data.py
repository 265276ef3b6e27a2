import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covervid.data import (DatasetError, DatasetSpec, SamplerState, augment, compose_batch, default_specs,
                           eval_crop_offsets, gen_appearance_dataset, gen_image_dataset, gen_motion_dataset,
                           generate, mirror_partner, motion_velocity, philox, render_motion,
                           reversal_partner, reverse_frames)

SPECS = {s.id: s for s in default_specs()}


@pytest.fixture(scope="module")
def desk():
    return {k: generate(s) for k, s in SPECS.items()}


def one_nn(train_x, train_y, query):
    a = train_x.reshape(len(train_x), -1).astype(np.float64)
    b = query.reshape(len(query), -1).astype(np.float64)
    d = (b ** 2).sum(1)[:, None] - 2 * b @ a.T + (a ** 2).sum(1)[None]
    return train_y[d.argmin(1)]


# -- specs --

def test_motion_needs_even_classes():
    with pytest.raises(DatasetError, match="even"):
        DatasetSpec("m", "motion", 3, 100, 10)


def test_image_spec_needs_one_frame():
    with pytest.raises(DatasetError):
        DatasetSpec("i", "texture", 4, 100, 10, modality="image", frames=4)


def test_external_spec_cannot_be_generated():
    with pytest.raises(DatasetError):
        generate(DatasetSpec("x", "external", 2, 10, 10))


def test_spec_round_trip():
    s = SPECS["image"]
    assert DatasetSpec.from_dict(s.to_dict()) == s
    with pytest.raises(DatasetError):
        DatasetSpec.from_dict({**s.to_dict(), "colour": 1})


def test_generator_kind_checks():
    with pytest.raises(DatasetError):
        gen_motion_dataset(SPECS["appearance"])
    with pytest.raises(DatasetError):
        gen_appearance_dataset(SPECS["motion"])
    with pytest.raises(DatasetError):
        gen_image_dataset(SPECS["motion"])


# -- determinism --

def test_philox_streams_are_reproducible_and_distinct():
    a = philox(3, "s", 5).random(4)
    np.testing.assert_array_equal(a, philox(3, "s", 5).random(4))
    assert not np.array_equal(a, philox(3, "s", 6).random(4))
    assert not np.array_equal(a, philox(3, "t", 5).random(4))
    assert not np.array_equal(a, philox(4, "s", 5).random(4))


@pytest.mark.parametrize("ds_id", ["motion", "appearance", "image"])
def test_regeneration_is_bit_identical(ds_id):
    spec = DatasetSpec(**{**SPECS[ds_id].to_dict(), "train_size": 40, "eval_size": 16})
    a, b = generate(spec), generate(spec)
    for f in ("train_x", "train_y", "eval_x", "eval_y"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_same_class_clips_differ(desk):
    d = desk["appearance"]
    same = np.flatnonzero(d.train_y == 0)[:2]
    assert not np.array_equal(d.train_x[same[0]], d.train_x[same[1]])


def test_prefix_stability():
    small = generate(DatasetSpec("motion", "motion", 4, 8, 4))
    big = generate(DatasetSpec("motion", "motion", 4, 16, 4))
    np.testing.assert_array_equal(small.train_x, big.train_x[:8])


def test_shapes_and_ranges(desk):
    assert desk["motion"].train_x.shape == (2000, 4, 16, 20, 1)
    assert desk["image"].train_x.shape == (4000, 1, 16, 20, 1)
    assert desk["image"].eval_x.shape[1] == 1
    for d in desk.values():
        assert d.train_x.min() >= 0 and d.train_x.max() <= 1
        assert np.bincount(d.train_y).min() == np.bincount(d.train_y).max()


# -- oracles --

def test_appearance_mean_frame_1nn(desk):
    d = desk["appearance"]
    acc = (one_nn(d.train_x.mean(1), d.train_y, d.eval_x.mean(1)) == d.eval_y).mean()
    assert acc > 0.9


def test_image_1nn(desk):
    d = desk["image"]
    assert (one_nn(d.train_x, d.train_y, d.eval_x) == d.eval_y).mean() > 0.9


def test_motion_single_frame_1nn_near_chance(desk):
    d = desk["motion"]
    mid = d.spec.frames // 2
    acc = (one_nn(d.train_x[:, mid], d.train_y, d.eval_x[:, mid]) == d.eval_y).mean()
    assert acc <= 1 / d.spec.num_classes + 0.10


def test_motion_reversal_bijection(desk):
    d = desk["motion"]
    tx, ty = d.train_x[:400], d.train_y[:400]
    fresh = (one_nn(tx, ty, d.eval_x) == d.eval_y).mean()
    partner = np.array([reversal_partner(c) for c in d.eval_y])
    reversed_ = (one_nn(tx, ty, reverse_frames(d.eval_x)) == partner).mean()
    assert fresh > 0.5
    assert abs(fresh - reversed_) <= 0.05


# -- label algebra --

@pytest.mark.parametrize("c", range(8))
def test_reversal_is_an_involution(c):
    assert reversal_partner(reversal_partner(c)) == c
    assert reversal_partner(c) != c
    vy, vx = motion_velocity(c)
    ry, rx = motion_velocity(reversal_partner(c))
    assert (ry, rx) == (-vy, -vx)


def test_reversed_clip_is_partner_class_exactly():
    n, h, w = 4, 16, 20
    for c in range(4):
        vy, vx = motion_velocity(c)
        fwd = render_motion(n, h, w, 5.0, 7.0, c)
        back = render_motion(n, h, w, 5.0 + (n - 1) * vy, 7.0 + (n - 1) * vx, reversal_partner(c))
        np.testing.assert_allclose(reverse_frames(fwd[..., None])[..., 0], back, atol=1e-12)


def test_flip_mirror_oracle():
    n, h, w = 4, 16, 20
    noise = np.random.default_rng(0).normal(0, 0.05, size=(n, h, w))
    for c in range(8):
        flipped = render_motion(n, h, w, 6.3, 4.7, c, noise)[:, :, ::-1]
        mirrored = render_motion(n, h, w, 6.3, w - 1 - 4.7, mirror_partner(c), noise[:, :, ::-1])
        np.testing.assert_allclose(flipped, mirrored, atol=1e-12)
        if motion_velocity(c)[1] != 0:
            assert mirror_partner(c) != c


# -- frame reversal --

def test_reverse_frames_contract(rng):
    x = rng.normal(size=(3, 4, 2, 2, 1))
    r = reverse_frames(x)
    np.testing.assert_array_equal(r[:, 0], x[:, -1])
    assert reverse_frames(r).tobytes() == np.ascontiguousarray(x).tobytes()
    single = rng.normal(size=(1, 2, 2, 1))
    np.testing.assert_array_equal(reverse_frames(single), single)


def test_reverse_keeps_label(desk):
    clip = desk["appearance"].clip(3)
    assert reverse_frames(clip).label == clip.label


# -- augmentation --

def test_flip_gate_never_flips_motion():
    spec = SPECS["motion"]
    x = np.random.default_rng(0).random((4, 16, 16, 1))
    rng = philox(0, "t")
    for _ in range(1000):
        np.testing.assert_array_equal(augment(x, spec, rng, (16, 16)), x)


def test_flip_happens_when_allowed():
    x = np.random.default_rng(0).random((1, 16, 16, 1))
    rng = philox(0, "t")
    outs = [augment(x, SPECS["appearance"], rng, (16, 16)) for _ in range(64)]
    assert any(np.array_equal(o, x[:, :, ::-1]) for o in outs)
    assert any(np.array_equal(o, x) for o in outs)


def test_crop_offset_shared_by_frames():
    x = np.arange(4 * 16 * 20, dtype=np.float32).reshape(4, 16, 20, 1)
    x = x - x[0:1]  # every frame is a shifted copy of the first
    out = augment(x, SPECS["motion"], philox(1, "t"), (16, 16))
    np.testing.assert_array_equal(out - out[0:1], (x - x[0:1])[:, :, :16])


def test_oversized_crop_rejected():
    with pytest.raises(DatasetError):
        augment(np.zeros((1, 8, 8, 1)), SPECS["motion"], philox(0, "t"), (9, 8))


def test_eval_crops():
    assert eval_crop_offsets(16, 20, (16, 16), 1) == [(0, 2)]
    assert eval_crop_offsets(16, 20, (16, 16), 3) == [(0, 0), (0, 2), (0, 4)]
    assert eval_crop_offsets(16, 16, (16, 16), 3) == [(0, 0)] * 3


# -- sampling --

def test_sampling_proportions():
    s = SamplerState({"a": 100, "b": 300}, seed=0)
    drawn = [ds for _ in range(10000 // 40) for ds, _ in compose_batch(s, 40)]
    assert len(drawn) == 10000
    frac = drawn.count("a") / len(drawn)
    assert abs(frac - 0.25) <= 0.02


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(20, 500), min_size=1, max_size=4), st.integers(0, 1000))
def test_sampling_proportions_property(sizes, seed):
    reg = {f"d{i}": n for i, n in enumerate(sizes)}
    s = SamplerState(reg, seed=seed)
    drawn = [ds for _ in range(100) for ds, _ in compose_batch(s, 100)]
    for k, n in reg.items():
        assert abs(drawn.count(k) / len(drawn) - n / sum(sizes)) <= 0.02


def test_single_dataset_fills_all_slots():
    s = SamplerState({"only": 10})
    assert {ds for ds, _ in compose_batch(s, 64)} == {"only"}


def test_sampling_is_deterministic_and_resumable():
    a = SamplerState({"b": 70, "a": 50}, seed=5)
    first = [compose_batch(a, 16) for _ in range(3)]
    # through sorted-key JSON, as checkpoints store it
    b = SamplerState.from_state(json.loads(json.dumps(a.state_dict(), sort_keys=True)))
    cont_a = [compose_batch(a, 16) for _ in range(3)]
    cont_b = [compose_batch(b, 16) for _ in range(3)]
    assert cont_a == cont_b
    fresh = SamplerState({"b": 70, "a": 50}, seed=5)
    assert [compose_batch(fresh, 16) for _ in range(3)] == first


def test_each_pass_visits_every_item():
    s = SamplerState({"a": 30}, seed=2)
    items = [i for _ in range(3) for _, i in compose_batch(s, 10)]
    assert sorted(items) == list(range(30))


def test_audit_log():
    s = SamplerState.from_specs(default_specs(), audit=True)
    compose_batch(s, 8)
    assert s.log[0][0] == 0 and len(s.log[0][1]) == 8


def test_empty_registry():
    with pytest.raises(DatasetError):
        SamplerState({})
