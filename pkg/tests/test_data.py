import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preqsel import data
from preqsel.rng import Stream


@pytest.fixture
def idx_pair(tmp_path):
    images = np.array([[[0, 255, 128], [1, 2, 3], [4, 5, 6]],
                       [[9, 8, 7], [6, 5, 4], [3, 2, 255]]], dtype=np.uint8)
    labels = np.array([3, 1], dtype=np.uint8)
    data.write_idx(tmp_path / "img", images, data.IDX_IMAGES_MAGIC)
    data.write_idx(tmp_path / "lab", labels, data.IDX_LABELS_MAGIC)
    return tmp_path, images, labels


def test_load_idx_exact_pixels(idx_pair):
    root, images, labels = idx_pair
    ds = data.load_idx(root / "img", root / "lab", num_classes=10)
    assert ds.x.shape == (2, 9)
    np.testing.assert_array_equal(ds.x, images.reshape(2, 9) / 255.0)
    np.testing.assert_array_equal(ds.y, labels)


def test_load_idx_gzip_transparent(idx_pair):
    root, _, _ = idx_pair
    for name in ("img", "lab"):
        (root / f"{name}.gz").write_bytes(gzip.compress((root / name).read_bytes()))
    raw = data.load_idx(root / "img", root / "lab", 10)
    gz = data.load_idx(root / "img.gz", root / "lab.gz", 10)
    np.testing.assert_array_equal(raw.x, gz.x)
    np.testing.assert_array_equal(raw.y, gz.y)


def test_load_idx_errors(idx_pair):
    root, images, _ = idx_pair
    data.write_idx(root / "lab3", np.array([1, 2, 3], dtype=np.uint8), data.IDX_LABELS_MAGIC)
    with pytest.raises(data.DataError, match="count mismatch"):
        data.load_idx(root / "img", root / "lab3")
    with pytest.raises(data.DataError, match="magic"):
        data.load_idx(root / "lab", root / "lab")
    (root / "trunc").write_bytes((root / "img").read_bytes()[:-3])
    with pytest.raises(data.DataError, match="truncated"):
        data.load_idx(root / "trunc", root / "lab")


def test_load_csv_min_max(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0,f1\n0,1,2\n1,3,5\n2,-1,1\n")
    ds = data.load_csv(p)
    assert ds.num_classes == 3
    np.testing.assert_allclose(ds.x, (np.array([[1, 2], [3, 5], [-1, 1]]) + 1) / 6)


def test_synth_deterministic_and_balanced():
    a = data.synth_mixture(3, 4, 20, 2.0, seed=5)
    b = data.synth_mixture(3, 4, 20, 2.0, seed=5)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert np.bincount(a.y).tolist() == [20, 20, 20]
    assert len(data.synth_mixture(2, 3, 5, 0.0, seed=1)) == 10


def test_synth_infeasible_separation():
    with pytest.raises(data.DataError):
        data.synth_mixture(50, 1, 2, 10.0, seed=0, max_tries=3)


def _fit_linear_probe(ds, steps=400, lr=0.5):
    # full-batch softmax regression, independent of the package's training loop
    x = np.c_[ds.x, np.ones(len(ds))]
    W = np.zeros((x.shape[1], ds.num_classes))
    onehot = np.eye(ds.num_classes)[ds.y]
    for _ in range(steps):
        z = x @ W
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        W -= lr * x.T @ (p - onehot) / len(ds)
    return np.mean(np.argmax(x @ W, 1) != ds.y)


def test_separation_ten_is_linearly_separable():
    ds = data.synth_mixture(2, 5, 500, 10.0, seed=3)
    assert _fit_linear_probe(ds) <= 0.01


def test_prefix_chain_superset():
    ds = data.synth_mixture(2, 2, 100, 1.0, seed=0)
    chain = data.make_prefix_chain(ds, [10, 50, 100, 200], seed=4)
    for a, b in zip(chain.sizes, chain.sizes[1:]):
        assert set(chain.subset_indices(a)) < set(chain.subset_indices(b))
    assert sorted(chain.subset_indices(200)) == list(range(200))
    other = data.make_prefix_chain(ds, [10, 200], seed=5)
    assert not np.array_equal(chain.permutation, other.permutation)
    np.testing.assert_array_equal(chain.added_indices(1), chain.permutation[10:50])
    with pytest.raises(data.DataError):
        data.make_prefix_chain(ds, [10, 300], seed=0)
    with pytest.raises(data.DataError):
        data.make_prefix_chain(ds, [50, 10], seed=0)


def test_split_sizes():
    ds = data.synth_mixture(2, 2, 50, 1.0, seed=0)
    tr, ca = data.split_train_calib(ds, data.SplitSpec(0.1, 0))
    assert (len(tr), len(ca)) == (90, 10)
    tr, ca = data.split_train_calib(ds.take([0, 1]), data.SplitSpec(0.1, 0))
    assert (len(tr), len(ca)) == (1, 1)
    with pytest.raises(data.DataError):
        data.split_train_calib(ds.take([0]), data.SplitSpec())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 1000), st.integers(0, 2**32))
def test_split_partition_property(n, seed):
    ds = data.Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), 2)
    tr, ca = data.split_train_calib(ds, data.SplitSpec(0.1, seed))
    assert len(tr) + len(ca) == n
    assert not set(tr.ids) & set(ca.ids)
    assert set(tr.ids) | set(ca.ids) == set(range(n))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**63))
def test_permutation_is_a_permutation(n, seed):
    p = Stream(seed, "perm").permutation(n)
    assert sorted(p.tolist()) == list(range(n))


def test_stream_uniform_range_and_repeatability():
    u = Stream(1, "a").uniform(10_000)
    assert u.min() >= 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01
    np.testing.assert_array_equal(u, Stream(1, "a").uniform(10_000))
    s = Stream(1, "a")
    np.testing.assert_array_equal(np.concatenate([s.uniform(3), s.uniform(4)]), u[:7])
    z = Stream(2).normal(20_000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
