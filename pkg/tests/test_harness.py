import csv
import dataclasses

import numpy as np
import pytest

from moebd import harness, pmoe
from moebd.dataset import CapacityError, Dataset
from moebd.triggers import TriggerSpec

from conftest import TINY_DATA, TINY_MODEL, TINY_TRAIN


def const_predictor(monkeypatch, label):
    monkeypatch.setattr(pmoe, "predict_batch", lambda model, images: np.full(len(images), label))


def balanced_test():
    labels = np.repeat(np.arange(10), 10)
    return Dataset(np.full((100, 8, 8, 3), 0.5, np.float32), labels, np.arange(100), 10)


def test_ba_constant_model(monkeypatch):
    const_predictor(monkeypatch, 0)
    assert harness.evaluate_ba(None, balanced_test()) == 10.0


def test_ba_perfect(monkeypatch):
    test = balanced_test()
    monkeypatch.setattr(pmoe, "predict_batch", lambda model, images: test.labels.copy())
    assert harness.evaluate_ba(None, test) == 100.0


def test_ba_matches_hand_count(tiny_data):
    model = pmoe.build_model(TINY_MODEL, (8, 8, 3), 3)
    test = tiny_data[1]
    hits = sum(pmoe.predict(model, test.images[i]) == test.labels[i] for i in range(len(test)))
    assert harness.evaluate_ba(model, test) == pytest.approx(100 * hits / len(test))


def test_ba_empty():
    empty = Dataset(np.zeros((0, 8, 8, 3), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64), 3)
    with pytest.raises(CapacityError):
        harness.evaluate_ba(None, empty)


def test_asr_definitions(monkeypatch):
    spec = TriggerSpec("square", size_px=2)
    const_predictor(monkeypatch, 0)
    assert harness.evaluate_asr(None, balanced_test(), spec, 0, 4) == 100.0
    const_predictor(monkeypatch, 3)
    assert harness.evaluate_asr(None, balanced_test(), spec, 0, 4) == 0.0


def test_asr_denominator_excludes_target():
    spec = TriggerSpec("square", size_px=2)
    trig = harness.triggered_test(balanced_test(), spec, 4, 4)
    assert len(trig) == 90 and (trig[:, :2, :2] == 0).all()


def test_asr_no_non_target():
    ds = Dataset(np.zeros((3, 8, 8, 3), np.float32), np.zeros(3, np.int64), np.arange(3), 2)
    with pytest.raises(CapacityError):
        harness.triggered_test(ds, TriggerSpec("square", size_px=1), 0, 4)


def test_cad():
    assert harness.compute_cad(88.5, 88.5) == 0
    assert harness.compute_cad(89.0, 89.2) == pytest.approx(-0.2)
    for a, b in [(80.0, 75.5), (10.0, 90.0)]:
        assert harness.compute_cad(a, b) == -harness.compute_cad(b, a)


def test_train_zero_epochs(tiny_data):
    model = pmoe.build_model(TINY_MODEL, (8, 8, 3), 1)
    before = pmoe.to_bytes(model)
    _, losses = harness.train(model, tiny_data[0], dataclasses.replace(TINY_TRAIN, epochs=0), 0)
    assert losses == [] and pmoe.to_bytes(model) == before


def test_train_deterministic(tiny_data):
    a, la = harness.train_model(TINY_MODEL, tiny_data[0], TINY_TRAIN, 9)
    b, lb = harness.train_model(TINY_MODEL, tiny_data[0], TINY_TRAIN, 9)
    assert pmoe.to_bytes(a) == pmoe.to_bytes(b) and la == lb


def test_train_empty():
    empty = Dataset(np.zeros((0, 8, 8, 3), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64), 3)
    with pytest.raises(CapacityError):
        harness.train(pmoe.build_model(TINY_MODEL, (8, 8, 3), 0), empty, TINY_TRAIN)


def test_run_experiment_single_repeat(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, repeats=1)
    res = harness.run_experiment(cfg)
    m, _, _, _ = harness.run_single(cfg, harness.repeat_seed(cfg.seed, 0))
    assert (res.asr_mean, res.ba_mean, res.cad_mean) == (m.asr, m.ba, m.cad)
    assert res.asr_std == 0
    assert m.cad == pytest.approx(res.clean_ba_mean - m.ba)


def test_run_experiment_forced_equal_seeds(tiny_cfg):
    res = harness.run_experiment(tiny_cfg, seeds=[7, 7, 7])
    assert res.asr_std == 0 and len(res.runs) == 3


def test_metrics_csv_reproducible(tiny_cfg, tmp_path):
    paths = []
    for i in range(2):
        harness.clear_caches()
        res = harness.run_experiment(tiny_cfg)
        p = tmp_path / f"m{i}.csv"
        harness.write_csv(p, harness.METRICS_HEADER, harness.metrics_rows(tiny_cfg, res))
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    rows = list(csv.reader(open(paths[0])))
    assert rows[0] == "experiment,trigger,mode,rate,l,k,n,seed,asr,ba,cad".split(",")
    assert len(rows) == 1 + 2 + 1 and rows[-1][7] == "mean"


def test_metrics_in_range(tiny_cfg):
    for m in harness.run_experiment(tiny_cfg).runs:
        assert 0 <= m.asr <= 100 and 0 <= m.ba <= 100


def test_sweep_tables(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, repeats=1, model=dataclasses.replace(TINY_MODEL, l=16, k=4))
    cfg = dataclasses.replace(cfg, poison=dataclasses.replace(cfg.poison, spec=TriggerSpec("square", size_px=1)))
    cells = harness.sweep_l(cfg, [1, 4, 16], [1, 4, 16])
    rows = harness.sweep_rows(cells)
    matched = [r for r in rows if r[0] == "matched"]
    assert len(matched) == 3 and len(rows) == 9
    assert all(c.result.runs[0].config["k"] == min(4, c.l) for c in cells)
    # matched cell equals a standalone run of the same configuration
    c16 = next(c for c in cells if c.l == 16 and c.badpatch_count == 16)
    spec = TriggerSpec("square", mode="badpatches", size_px=1, badpatch_count=16)
    sub = dataclasses.replace(cfg, poison=dataclasses.replace(cfg.poison, spec=spec), routing_l_override=16)
    assert harness.run_experiment(sub).asr_mean == c16.result.asr_mean


def test_loss_rows():
    assert harness.loss_rows([0.5, 0.25]) == [[0, "0.5"], [1, "0.25"]]


def test_repeats_validation(tiny_cfg):
    with pytest.raises(ValueError):
        dataclasses.replace(tiny_cfg, repeats=0)
