import gzip
import os

import numpy as np
import pytest

from signfed import data as ds
from signfed.errors import ConfigError, FormatError


def write_fake_mnist(root, n_train=60, n_test=20, gz=False, seed=0):
    rng = np.random.default_rng(seed)
    arrays = {
        "train_images": rng.integers(0, 256, (n_train, 28, 28), dtype=np.uint8),
        "train_labels": rng.integers(0, 10, n_train, dtype=np.uint8),
        "test_images": rng.integers(0, 256, (n_test, 28, 28), dtype=np.uint8),
        "test_labels": rng.integers(0, 10, n_test, dtype=np.uint8),
    }
    for key, arr in arrays.items():
        path = os.path.join(root, ds.MNIST_FILES[key])
        ds.write_idx(path, arr)
        if gz:
            with open(path, "rb") as src, gzip.open(path + ".gz", "wb") as dst:
                dst.write(src.read())
            os.remove(path)
    return arrays


def test_idx_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    p = str(tmp_path / "x")
    ds.write_idx(p, arr)
    np.testing.assert_array_equal(ds.read_idx(p, ds.IMAGE_MAGIC), arr)


def test_idx_bad_magic_names_file(tmp_path):
    p = str(tmp_path / "labels")
    ds.write_idx(p, np.zeros(5, dtype=np.uint8))
    with pytest.raises(FormatError, match="labels: bad magic"):
        ds.read_idx(p, ds.IMAGE_MAGIC)


def test_idx_truncated(tmp_path):
    p = str(tmp_path / "imgs")
    ds.write_idx(p, np.zeros((3, 2, 2), dtype=np.uint8))
    with open(p, "rb") as fh:
        raw = fh.read()
    with open(p, "wb") as fh:
        fh.write(raw[:-3])
    with pytest.raises(FormatError, match="imgs: truncated"):
        ds.read_idx(p, ds.IMAGE_MAGIC)
    with open(p, "wb") as fh:
        fh.write(raw[:6])
    with pytest.raises(FormatError, match="truncated header"):
        ds.read_idx(p, ds.IMAGE_MAGIC)


@pytest.mark.parametrize("gz", [False, True])
def test_load_mnist(tmp_path, gz):
    arrays = write_fake_mnist(str(tmp_path), gz=gz)
    train, test = ds.load_mnist(str(tmp_path))
    assert train.features.shape == (60, 784) and test.features.shape == (20, 784)
    assert train.features.min() >= 0 and train.features.max() <= 1
    np.testing.assert_array_equal(train.labels, arrays["train_labels"])
    assert train.features[0, 5] == arrays["train_images"][0, 0, 5] / 255.0


def test_load_full_size_mnist(tmp_path):
    write_fake_mnist(str(tmp_path), n_train=60000, n_test=10000)
    train, test = ds.load_mnist(str(tmp_path))
    assert len(train) == 60000 and len(test) == 10000


def test_load_mnist_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ds.load_mnist(str(tmp_path))


def test_synthetic_blobs():
    d = ds.make_synthetic(4, 6, 50, 5.0, seed=1)
    assert len(d) == 200 and d.num_classes == 4
    assert np.bincount(d.labels).tolist() == [50] * 4
    means = np.array([d.features[d.labels == c].mean(axis=0) for c in range(4)])
    np.testing.assert_allclose(means[:, :4], 5.0 * np.eye(4), atol=0.6)
    again = ds.make_synthetic(4, 6, 50, 5.0, seed=1)
    np.testing.assert_array_equal(d.features, again.features)


def test_synthetic_rejects_small_dim():
    with pytest.raises(ConfigError, match="data.dim"):
        ds.make_synthetic(5, 3, 10, 1.0, 0)


def test_split_is_disjoint():
    d = ds.make_synthetic(3, 3, 20, 2.0, 0)
    tr, te = ds.train_test_split(d, 0.25, 7)
    assert len(te) == 15 and len(tr) == 45


def test_iid_partition():
    d = ds.make_synthetic(10, 10, 30, 2.0, 0)
    part = ds.partition(d, 20, 10, "iid", seed=3)
    flat = np.concatenate(part.client_indices)
    assert part.sizes() == [10] * 20
    assert len(np.unique(flat)) == 200


def test_label_sorted_shards_give_few_classes():
    d = ds.make_synthetic(10, 10, 100, 2.0, 0)
    part = ds.partition(d, 50, 20, "label-sorted-shards", seed=3)
    classes = [len(np.unique(d.labels[ix])) for ix in part.client_indices]
    assert max(classes) <= 4
    assert np.mean(classes) < 3
    assert len(np.unique(np.concatenate(part.client_indices))) == 1000


def test_partition_errors():
    d = ds.make_synthetic(2, 2, 10, 1.0, 0)
    with pytest.raises(ConfigError, match="partition.per_client"):
        ds.partition(d, 5, 5, "iid", 0)
    with pytest.raises(ConfigError, match="partition.per_client"):
        ds.partition(d, 2, 3, "label-sorted-shards", 0)
    with pytest.raises(ConfigError, match="partition.mode"):
        ds.partition(d, 2, 2, "dirichlet", 0)


def test_in_backdoor_relabel():
    d = ds.Dataset(np.zeros((5, 2)), np.array([5, 1, 5, 7, 0]), num_classes=10)
    out = ds.relabel_in_backdoor(d, 5, 7)
    assert out.labels.tolist() == [7, 1, 7, 7, 0]
    assert d.labels.tolist() == [5, 1, 5, 7, 0]
    with pytest.raises(ConfigError, match="target_class"):
        ds.relabel_in_backdoor(d, 5, 5)


def test_out_backdoor_construction():
    d = ds.make_synthetic(4, 4, 30, 2.0, 0)
    part = ds.partition(d, 6, 20, "iid", 1)
    shards, dropped = ds.build_out_backdoor(d, part, excluded_class=2, target_class=0,
                                            malicious_clients=[1, 4])
    excluded_total = int(np.sum(d.labels == 2))
    for k, sh in enumerate(shards):
        assert not np.any(sh.labels == 2)
    extra = sum(len(shards[k]) - int(np.sum(d.labels[part.client_indices[k]] != 2)) for k in (1, 4))
    assert extra == excluded_total
    # every sample is either placed or counted as dropped
    assert sum(len(s) for s in shards) + dropped == len(d)
