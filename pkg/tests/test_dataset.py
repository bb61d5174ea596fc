import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moebd.dataset import (
    CapacityError,
    Dataset,
    PoisonConfig,
    generate_synthetic,
    poison_count,
    poison_dataset,
    read_dataset,
    select_poison_indices,
    write_dataset,
)
from moebd.patching import GeometryError
from moebd.triggers import TriggerSpec

SQUARE = TriggerSpec("square", size_px=4)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(10, 20, seed=3)


@pytest.mark.parametrize(
    "n,rate,count",
    [(12000, 0.001, 12), (50000, 0.001, 50), (39209, 0.001, 39), (12000, 0.0001, 1), (50000, 0.0001, 5), (39209, 0.0001, 3)],
)
def test_reference_poison_counts(n, rate, count):
    assert poison_count(rate, n) == count


def test_poison_count_examples():
    assert poison_count(0.02, 5000) == 100
    assert poison_count(0.0, 5000) == 0
    # floor on the decimal rate: 0.07 * 100 is 7.000000000000001 in binary
    assert poison_count(0.07, 100) == 7
    assert poison_count(0.29, 100) == 29


def test_generate_deterministic(small):
    again = generate_synthetic(10, 20, seed=3)
    assert small[0].images.tobytes() == again[0].images.tobytes()
    assert small[1].images.tobytes() == again[1].images.tobytes()


def test_generate_shapes_and_range(small):
    train, test = small
    assert train.images.shape == (200, 32, 32, 3) and len(test) == 40
    assert train.images.min() >= 0 and train.images.max() <= 1
    np.testing.assert_array_equal(np.bincount(train.labels), [20] * 10)
    assert not set(train.ids.tolist()) & set(test.ids.tolist())


def test_train_test_disjoint_draws(small):
    train, test = small
    assert not any((test.images[0] == im).all() for im in train.images)


def test_empty_split():
    train, test = generate_synthetic(3, 0)
    assert len(train) == 0 and len(test) == 0


def test_bad_dims():
    with pytest.raises(GeometryError):
        generate_synthetic(2, 1, h=30)


def test_rate_zero_untouched(small):
    train = small[0]
    out, man = poison_dataset(train, PoisonConfig(0.0, SQUARE), 64)
    assert man.count == 0 and out.images.tobytes() == train.images.tobytes()


def test_poison_semantics(small):
    train = small[0]
    cfg = PoisonConfig(0.1, SQUARE, target_label=0, seed=4)
    out, man = poison_dataset(train, cfg, 64)
    assert man.count == 20
    poisoned = np.isin(out.ids, [i for i, _ in man.entries])
    assert (out.labels[poisoned] == 0).all()
    assert all(orig != 0 for _, orig in man.entries)
    assert (out.images[poisoned][:, :4, :4] == 0).all()
    # clean samples bit-identical
    assert out.images[~poisoned].tobytes() == train.images[~poisoned].tobytes()
    np.testing.assert_array_equal(out.labels[~poisoned], train.labels[~poisoned])


def test_poison_capacity():
    ds = Dataset(np.zeros((4, 8, 8, 1), np.float32), np.array([0, 0, 0, 1]), np.arange(4), 2)
    with pytest.raises(CapacityError):
        select_poison_indices(ds, PoisonConfig(0.5, SQUARE))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63))
def test_poison_source_agnostic_composition(seed):
    labels = np.repeat(np.arange(10), 500)
    ds = Dataset(np.zeros((5000, 1, 1, 1), np.float32), labels, np.arange(5000), 10)
    idx = select_poison_indices(ds, PoisonConfig(0.02, SQUARE, seed=seed))
    counts = np.bincount(labels[idx], minlength=10)
    assert counts[0] == 0
    # each non-target class expects 100/9 with binomial sd ~3.2: 4 sigma band
    assert all(abs(c - 100 / 9) <= 4 * np.sqrt(100 * (1 / 9) * (8 / 9)) for c in counts[1:])
    assert len(set(labels[idx].tolist())) >= 2


def test_rate_validation():
    with pytest.raises(ValueError):
        PoisonConfig(1.5, SQUARE)


def test_manifest_csv(tmp_path, small):
    _, man = poison_dataset(small[0], PoisonConfig(0.05, SQUARE, seed=1), 64)
    man.write_csv(tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["id", "original_label"] and len(rows) == 1 + man.count


def test_write_read_dataset(tmp_path, small):
    train, test = small
    manifest = write_dataset(tmp_path / "d", {"train": train, "test": test})
    rows = list(csv.DictReader(open(manifest)))
    assert len(rows) == len(train) + len(test)
    assert list(rows[0]) == ["id", "split", "label", "path"]
    back = read_dataset(manifest, "test", 10)
    np.testing.assert_array_equal(back.labels, test.labels)
    np.testing.assert_array_equal(back.ids, test.ids)
    assert np.abs(back.images - test.images).max() <= 0.5 / 255 + 1e-7
