import gzip
import re
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pucnigan import datasets as ds


def write_idx(path, arr, gz=False):
    arr = np.asarray(arr, dtype=np.uint8)
    buf = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    buf += arr.tobytes()
    if gz:
        with gzip.open(str(path) + ".gz", "wb") as fh:
            fh.write(buf)
    else:
        Path(path).write_bytes(buf)


def fake_mnist(root, n_train=60000, n_test=10000, side=28, gz=False, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    write_idx(root / "train-images-idx3-ubyte", np.zeros((n_train, side, side)), gz)
    write_idx(root / "train-labels-idx1-ubyte", rng.integers(0, 10, n_train), gz)
    write_idx(root / "t10k-images-idx3-ubyte", np.zeros((n_test, side, side)), gz)
    write_idx(root / "t10k-labels-idx1-ubyte", rng.integers(0, 10, n_test), gz)
    return root


def labeled_base(n_per_class=1000, n_classes=10, shape=(1, 2, 2)):
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = np.zeros((len(y), *shape), dtype=np.float32)
    part = ds.LabeledData(x, y)
    return ds.BaseDataset("fake", part, part, n_classes)


# --- splits -----------------------------------------------------------------


def test_rate_fraction_of_train_split_gives_exact_positive_count():
    # 0.2% of a 60,000-example train split is 120 positives, 24 per class
    base = labeled_base(6000)
    data = ds.make_pu_split(base, [0, 1, 2, 3, 4], 0.002, "type1", seed=0)
    assert len(data.positives) == 120
    assert np.bincount(data.positives.y).tolist() == [24] * 5
    assert data.K == 5
    assert np.all(data.positives.y < 5)


def test_type1_and_type2_compositions():
    base = labeled_base(1000, n_classes=6)
    t1 = ds.make_pu_split(base, [0, 1, 2, 3, 4], 0.01, "type1", seed=1, n_unlabeled=600)
    assert np.allclose(t1.priors, 1 / 6)
    t2 = ds.make_pu_split(base, [0, 1, 2, 3, 4], 0.01, "type2", seed=1, n_unlabeled=1000)
    # half negative, the other half split evenly over positives
    assert t2.priors[-1] == pytest.approx(0.5)
    assert np.allclose(t2.priors[:5], 0.1)


def test_type2_counts_within_multinomial_bounds():
    base, _ = ds.make_synthetic_gaussian(5, 5, 10.0, 2000, seed=3)
    data = ds.make_pu_split(base, list(range(5)), 0.01, "type2", seed=3, n_unlabeled=3000)
    counts = np.bincount(ds.hidden_unlabeled_labels(data), minlength=6)
    p = ds.unlabeled_distribution("type2", 5)
    sigma = np.sqrt(3000 * p * (1 - p))
    assert np.all(np.abs(counts - 3000 * p) <= 3 * sigma)


def test_grouped_positive_classes_and_label_mapping():
    y = np.array([0, 1, 8, 9, 2, 3, 5])
    assert ds.map_labels(y, [list(ds.CIFAR_TRANSPORT)]).tolist() == [0, 0, 0, 0, 1, 1, 1]
    assert ds.map_labels(y, [5, 2]).tolist() == [2, 2, 2, 2, 1, 2, 0]


def test_capacity_error_names_class():
    base = labeled_base(10, n_classes=3)
    with pytest.raises(ds.CapacityError, match="class 0"):
        ds.make_pu_split(base, [0, 1], 0.9, seed=0)


def test_invalid_rate_rejected():
    base = labeled_base(10, n_classes=3)
    for rate in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            ds.make_pu_split(base, [0, 1], rate)


def test_exhausted_class_duplicates_with_warning(caplog):
    base = labeled_base(100, n_classes=3)
    data = ds.make_pu_split(base, [0, 1], 0.02, "type2", seed=0, n_unlabeled=400)
    assert "exhausted" in caplog.text
    assert np.bincount(ds.hidden_unlabeled_labels(data))[-1] == 200


def test_split_is_deterministic_in_seed(world):
    base, _ = world
    a = ds.make_pu_split(base, [0, 1], 0.05, seed=7)
    b = ds.make_pu_split(base, [0, 1], 0.05, seed=7)
    c = ds.make_pu_split(base, [0, 1], 0.05, seed=8)
    assert np.array_equal(a.positives.x, b.positives.x)
    assert np.array_equal(a.unlabeled, b.unlabeled)
    assert not np.array_equal(a.unlabeled, c.unlabeled)


def test_arrays_are_read_only(small_pu):
    with pytest.raises(ValueError):
        small_pu.positives.x[0, 0] = 1.0


def test_pu_dataset_validates_positive_labels(small_pu):
    bad = ds.LabeledData(small_pu.positives.x, np.full(len(small_pu.positives), 2))
    with pytest.raises(ValueError):
        ds.PUDataset(bad, small_pu.unlabeled, small_pu.test, small_pu.priors, 0.02, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.lists(st.floats(0.01, 10), min_size=1, max_size=8))
def test_allocate_sums_and_is_proportional(total, weights):
    counts = ds.allocate(total, np.array(weights))
    assert counts.sum() == total
    exact = total * np.array(weights) / np.sum(weights)
    assert np.all(np.abs(counts - exact) < 1)


def test_hidden_labels_are_only_read_by_metrics():
    src = Path(ds.__file__).parent
    readers = []
    for path in src.glob("*.py"):
        if path.name in ("datasets.py", "metrics.py"):
            continue
        if re.search(r"_hidden_labels|hidden_unlabeled_labels", path.read_text()):
            readers.append(path.name)
    assert readers == []


# --- synthetic world ----------------------------------------------------------


def test_simplex_means_are_equidistant():
    m = ds.simplex_means(4, 5, 10.0)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    assert np.allclose(d[~np.eye(4, dtype=bool)], 10.0)
    with pytest.raises(ValueError):
        ds.simplex_means(4, 2, 10.0)


def test_nearest_mean_oracle_accuracy_on_separated_world():
    base, oracle = ds.make_synthetic_gaussian(2, 2, 10.0, 5000, seed=0)
    assert np.mean(oracle(base.test.x) == base.test.y) >= 0.9999


def test_oracle_tie_goes_to_smallest_index():
    oracle = ds.NearestMeanOracle(np.array([[-1.0, 0.0], [1.0, 0.0]]))
    assert oracle(np.zeros((1, 2))).tolist() == [0]
    p = oracle.predict_proba(np.zeros((1, 2)))
    assert np.allclose(p, 0.5)


@pytest.mark.parametrize("kw", [dict(separation=0.0), dict(separation=-1.0), dict(n_per_class=0),
                                dict(K=0), dict(dim=1)])
def test_synthetic_rejects_degenerate_arguments(kw):
    args = dict(K=2, dim=2, separation=10.0, n_per_class=10, seed=0)
    args.update(kw)
    with pytest.raises(ValueError):
        ds.make_synthetic_gaussian(**args)


def test_synthetic_csv_round_trip(tmp_path):
    base, _ = ds.make_synthetic_gaussian(2, 3, 10.0, 20, seed=4)
    path = tmp_path / "world.csv"
    ds.save_synthetic(path, base, 2, 3, 10.0, 4)
    loaded, meta = ds.load_synthetic(path)
    assert meta == {"K": 2, "dim": 3, "separation": 10.0, "seed": 4}
    assert np.array_equal(loaded.train.x, base.train.x)
    assert np.array_equal(loaded.test.y, base.test.y)


# --- image containers -----------------------------------------------------------


@pytest.mark.parametrize("gz", [False, True])
def test_mnist_layout_shapes(tmp_path, gz):
    root = fake_mnist(tmp_path / "mnist", gz=gz)
    base = ds.load_image_dataset("mnist", tmp_path)
    assert base.train.x.shape == (60000, 1, 28, 28)
    assert base.test.x.shape == (10000, 1, 28, 28)
    assert base.train.x.dtype == np.float32
    assert root.exists()


def test_truncated_idx_names_file(tmp_path):
    root = fake_mnist(tmp_path, n_train=10, n_test=5)
    path = root / "train-images-idx3-ubyte"
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(ds.DataError, match="train-images-idx3-ubyte"):
        ds.load_image_dataset("mnist", tmp_path)


def test_bad_idx_magic(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"\x01\x02\x03\x04" + b"\0" * 8)
    with pytest.raises(ds.DataError, match="magic"):
        ds.read_idx(path)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(ds.DataError, match="not found"):
        ds.load_image_dataset("mnist", tmp_path)


def test_cifar_batches(tmp_path):
    rng = np.random.default_rng(0)
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        recs = np.concatenate([rng.integers(0, 10, (4, 1)), rng.integers(0, 256, (4, 3072))], axis=1)
        (root / name).write_bytes(recs.astype(np.uint8).tobytes())
    base = ds.load_image_dataset("cifar10", tmp_path)
    assert base.train.x.shape == (20, 3, 32, 32)
    assert base.train.x.max() <= 1.0
    (root / "test_batch.bin").write_bytes(b"\0" * 100)
    with pytest.raises(ds.DataError, match="test_batch.bin"):
        ds.load_image_dataset("cifar10", tmp_path)
