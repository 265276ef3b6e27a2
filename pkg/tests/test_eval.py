import json

import numpy as np
import pytest

from covervid.data import DatasetSpec, generate
from covervid.evaluation import (ProbeError, ablation_matrix, default_ablation_grid, evaluate, predict_views,
                                 reversal_probe, transfer_probe, view_probabilities)
from covervid.model import SPATIAL, TEMPORAL
from covervid.train import TrainConfig

from helpers import tiny_data, tiny_model


@pytest.fixture(scope="module")
def data():
    return tiny_data()


def test_views_collapse_on_crop_sized_frames(data):
    params, cfg = tiny_model(data)
    spec = DatasetSpec("appearance", "appearance", 4, 8, 8, width=16)
    d = generate(spec)
    one = evaluate(params, cfg, d, views=1)
    three = evaluate(params, cfg, d, views=3)
    assert one.accuracy == three.accuracy and one.per_class == three.per_class


def test_view_averaging(data):
    params, cfg = tiny_model(data)
    x = data["appearance"].eval_x
    probs = view_probabilities(params, cfg, "appearance", x, views=3)
    assert probs.shape == (3, len(x), 4)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)
    acc = evaluate(params, cfg, data["appearance"], views=3).accuracy
    assert acc == (probs.mean(0).argmax(1) == data["appearance"].eval_y).mean()


def test_tie_goes_to_lowest_class():
    probs = np.array([[[0.25, 0.25, 0.25, 0.25], [0.1, 0.45, 0.45, 0.0]]])
    assert predict_views(probs).tolist() == [0, 1]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_model_is_at_chance(seed):
    d = generate(DatasetSpec("motion", "motion", 4, 8, 500, flip_allowed=False))
    params, cfg = tiny_model({"motion": d}, d_model=32, heads=4, depth=2, seed=seed)
    assert abs(evaluate(params, cfg, d, views=3).accuracy - 0.25) <= 0.05


def test_double_reversal_equals_normal_eval(data):
    from covervid.data import reverse_frames

    params, cfg = tiny_model(data)
    d = data["motion"]
    a = view_probabilities(params, cfg, "motion", d.eval_x)
    b = view_probabilities(params, cfg, "motion", reverse_frames(reverse_frames(d.eval_x)))
    assert a.tobytes() == b.tobytes()


def test_eval_report_fields(data):
    params, cfg = tiny_model(data)
    rep = evaluate(params, cfg, data["motion"], views=1)
    assert rep.clips == 16 and rep.views == 1 and len(rep.per_class) == 4
    assert rep.params_hash == params.digest()


def test_eval_rejects_unknown_head_and_views(data):
    params, cfg = tiny_model({"motion": data["motion"]})
    with pytest.raises(ProbeError):
        evaluate(params, cfg, data["appearance"])
    with pytest.raises(ProbeError):
        evaluate(params, cfg, data["motion"], views=2)


def test_reversal_report_format(data):
    params, cfg = tiny_model(data)
    rep = reversal_probe(params, cfg, data["motion"], views=1)
    assert list(rep.table) == ["normal", "reversed"]
    assert list(rep.deltas) == ["reversed:motion"]
    assert rep.deltas["reversed:motion"] == rep.table["reversed"]["motion"] - rep.table["normal"]["motion"]
    assert "reversed_partner_labels" in rep.meta
    assert json.loads(rep.to_json())["kind"] == "reversal"


def test_reversal_on_images_rejected(data):
    params, cfg = tiny_model(data)
    with pytest.raises(ProbeError):
        reversal_probe(params, cfg, data["image"])


def test_transfer_freezes_backbone(data):
    params, cfg = tiny_model(data)
    backbone = params.names(SPATIAL, TEMPORAL)
    before = params.digest()
    rep, tuned = transfer_probe(params, cfg, "src", data["motion"], TrainConfig(epochs=2, batch_size=16), views=1)
    assert params.digest() == before
    assert tuned.digest(backbone) == params.digest(backbone)
    assert tuned.digest(tuned.head_names("motion")) != params.digest(params.head_names("motion"))
    assert list(rep.table) == ["src"] and rep.meta["target"] == "motion"


def test_transfer_class_count_mismatch(data):
    params, cfg = tiny_model(data)
    other = generate(DatasetSpec("motion", "motion", 2, 8, 4))
    with pytest.raises(ProbeError):
        transfer_probe(params, cfg, "src", other, TrainConfig(epochs=1))


def test_default_grid(data):
    grid = default_ablation_grid(data, (0.0, 0.5))
    names = [g["name"] for g in grid]
    assert names == ["independent:motion", "independent:appearance", "motion+appearance",
                     "motion+appearance+image w_image=0", "motion+appearance+image w_image=0.5"]
    assert grid[-1]["weights"] == {"image": 0.5}


def test_ablation_matrix_shares_start(data):
    params, cfg = tiny_model(data)
    grid = default_ablation_grid(data, (0.0,))
    rep = ablation_matrix(params, cfg, data, grid, TrainConfig(epochs=1, batch_size=32), views=1)
    assert list(rep.table) == ["independent", "motion+appearance", "motion+appearance+image w_image=0"]
    assert set(rep.table["independent"]) == {"motion", "appearance"}
    with pytest.raises(ProbeError):
        ablation_matrix(params, cfg, data, [], TrainConfig(epochs=1))
