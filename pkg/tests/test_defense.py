import dataclasses

import numpy as np
import pytest

from moebd import defense, harness, pmoe
from moebd.dataset import CapacityError
from moebd.pmoe import ModelConfig
from moebd.triggers import TriggerSpec

from conftest import TINY_MODEL, TINY_TRAIN


@pytest.fixture
def trained(tiny_data):
    model, _ = harness.train_model(TINY_MODEL, tiny_data[0], TINY_TRAIN, 2)
    return model


def brute_mean_activation(model, images):
    c = model.config
    total = np.zeros((c.n, c.hidden))
    count = 0
    for img in images:
        _, trace = pmoe.forward(model, img)
        x = model.patches(img[None])[0].astype(np.float64)
        for e in range(c.n):
            for p in trace.indices[e]:
                total[e] += np.maximum(x[p] @ model["w1"].data[e] + model["b1"].data[e], 0) * model.mask[e]
        count += c.k
    return total / count


def test_rank_matches_brute_force(trained, tiny_data):
    imgs = tiny_data[0].images
    brute = brute_mean_activation(trained, imgs)
    np.testing.assert_allclose(defense.mean_activations(trained, imgs), brute, rtol=1e-5, atol=1e-7)
    order = defense.rank_units(trained, tiny_data[0])
    for e in range(trained.config.n):
        assert order[e].tolist() == sorted(range(trained.config.hidden), key=lambda j: (brute[e, j], j))


def test_dead_unit_ranks_first(trained, tiny_data):
    trained["w1"].data[:, :, 2] = 0
    trained["b1"].data[:, 2] = 0
    assert (defense.rank_units(trained, tiny_data[0])[:, 0] == 2).all()


def test_duplicate_units_tie_to_lower(trained, tiny_data):
    for name, ax in (("w1", 2), ("b1", 1)):
        d = trained[name].data
        src = np.take(d, [3], axis=ax)
        d[(slice(None),) * ax + (slice(0, 1),)] = src
        d[(slice(None),) * ax + (slice(1, 2),)] = src
    trained["w1"].data[:, :, [2, 3]] = -50  # make two strictly smaller so 0/1 are compared between themselves
    trained["b1"].data[:, [2, 3]] = -50
    order = defense.rank_units(trained, tiny_data[0])
    for row in order.tolist():
        assert row.index(0) < row.index(1)


def test_rank_empty(trained):
    with pytest.raises(CapacityError):
        defense.rank_units(trained, np.zeros((0, 8, 8, 3), np.float32))


def test_prune_counts():
    model = pmoe.build_model(ModelConfig(hidden=64), (32, 32, 3), 0)
    ranking = np.tile(np.arange(64), (4, 1))
    defense.prune(model, 0.3, ranking)
    assert (model.mask.sum(axis=1) == 64 - 19).all()
    fresh = pmoe.build_model(ModelConfig(hidden=64), (32, 32, 3), 0)
    before = pmoe.to_bytes(fresh)
    defense.prune(fresh, 0.0, ranking)
    assert pmoe.to_bytes(fresh) == before


def test_mask_monotone(trained, tiny_data):
    ranking = defense.rank_units(trained, tiny_data[0])
    masks = []
    for r in (0.25, 0.5, 0.75):
        m = trained.copy()
        defense.prune(m, r, ranking)
        masks.append(m.mask == 0)
    assert all((a <= b).all() for a, b in zip(masks, masks[1:]))


def test_fine_tune_zero_epochs(trained, tiny_data):
    before = pmoe.to_bytes(trained)
    defense.fine_tune(trained, tiny_data[0], 0)
    assert pmoe.to_bytes(trained) == before


def test_masked_units_stay_zero(trained, tiny_data):
    defense.prune(trained, 0.5, defense.rank_units(trained, tiny_data[0]))
    mask = trained.mask.copy()
    w2_before = trained["w2"].data[mask == 0].copy()
    defense.fine_tune(trained, tiny_data[0], 2, batch=8)
    np.testing.assert_array_equal(trained.mask, mask)
    # pruned rows of w2 receive zero gradient, so they do not move
    np.testing.assert_array_equal(trained["w2"].data[mask == 0], w2_before)


def test_fine_prune_report(trained, tiny_data):
    cfg = defense.DefenseConfig(0.5, 1, batch=8)
    spec = TriggerSpec("square", size_px=2)
    out, report = defense.fine_prune(trained, cfg, tiny_data[0], tiny_data[1], spec, 0)
    assert [r.stage for r in report] == list(defense.STAGES)
    assert report[0].ba == harness.evaluate_ba(trained, tiny_data[1])
    assert (trained.mask == 1).all() and (out.mask == 0).any()
    rows = defense.report_rows(0.5, report)
    assert len(rows) == 3 and rows[0][:2] == ["0.5", "before"]


def test_config_validation():
    with pytest.raises(ValueError):
        defense.DefenseConfig(1.0)
