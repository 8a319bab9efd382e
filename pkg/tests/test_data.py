import gzip
import struct

import numpy as np
import pytest

from itdm.data import (
    BadMagicError,
    CountMismatchError,
    Dataset,
    DualBatchSampler,
    TruncatedFileError,
    find_idx_files,
    load_idx,
    synthetic_blobs,
    write_idx,
)
from itdm.nn import Dense
from itdm.tensor import make_rng

# two 2x2 images and their labels, laid out by hand from the IDX byte format
IMAGES = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 204, 0, 1, 254])
LABELS = bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3])


@pytest.fixture
def idx_pair(tmp_path):
    images, labels = tmp_path / "img", tmp_path / "lbl"
    images.write_bytes(IMAGES)
    labels.write_bytes(LABELS)
    return images, labels


def test_load_hand_built_fixture(idx_pair):
    ds = load_idx(*idx_pair)
    expected = np.array([[[0, 255], [51, 102]], [[204, 0], [1, 254]]]) / 255.0
    np.testing.assert_array_equal(ds.x, expected)
    np.testing.assert_array_equal(ds.labels, [7, 3])
    assert ds.num_classes == 10 and ds.sample_shape == (2, 2)


def test_load_gzip(tmp_path):
    (tmp_path / "i.gz").write_bytes(gzip.compress(IMAGES))
    (tmp_path / "l.gz").write_bytes(gzip.compress(LABELS))
    assert len(load_idx(tmp_path / "i.gz", tmp_path / "l.gz")) == 2


def test_bad_magic(tmp_path, idx_pair):
    bad = tmp_path / "bad"
    bad.write_bytes(bytes([0, 0, 8, 2]) + LABELS[4:])
    with pytest.raises(BadMagicError):
        load_idx(idx_pair[0], bad)
    with pytest.raises(BadMagicError):
        load_idx(idx_pair[1], idx_pair[1])


def test_truncated(tmp_path, idx_pair):
    short = tmp_path / "short"
    short.write_bytes(IMAGES[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(short, idx_pair[1])
    short.write_bytes(IMAGES[:10])
    with pytest.raises(TruncatedFileError):
        load_idx(short, idx_pair[1])


def test_count_mismatch(tmp_path, idx_pair):
    one = tmp_path / "one"
    one.write_bytes(struct.pack(">II", 0x801, 1) + bytes([4]))
    with pytest.raises(CountMismatchError):
        load_idx(idx_pair[0], one)


def test_idx_round_trip(tmp_path, idx_pair):
    ds = load_idx(*idx_pair)
    write_idx(ds, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i2").read_bytes() == IMAGES
    assert (tmp_path / "l2").read_bytes() == LABELS
    rng = make_rng(1)
    big = Dataset(rng.integers(0, 256, (5, 28, 28)) / 255.0, rng.integers(0, 10, 5), 10)
    write_idx(big, tmp_path / "i3", tmp_path / "l3")
    back = load_idx(tmp_path / "i3", tmp_path / "l3")
    np.testing.assert_array_equal(back.x, big.x)
    np.testing.assert_array_equal(back.labels, big.labels)


def test_find_idx_files(tmp_path, monkeypatch):
    root = tmp_path / "fmnist"
    root.mkdir()
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte.gz"]:
        (root / name).write_bytes(b"")
    assert find_idx_files("fmnist", tmp_path) is None
    (root / "t10k-labels-idx1-ubyte").write_bytes(b"")
    monkeypatch.setenv("ITDM_DATA_DIR", str(tmp_path))
    found = find_idx_files("fmnist")
    assert found["test_images"].name == "t10k-images-idx3-ubyte.gz"


def test_blobs_deterministic_and_balanced():
    a = synthetic_blobs(3, 20, 4, 5.0, make_rng(2))
    b = synthetic_blobs(3, 20, 4, 5.0, make_rng(2))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [20, 20, 20]
    with pytest.raises(ValueError):
        synthetic_blobs(1, 5, 2, 1.0, make_rng(0))
    with pytest.raises(ValueError):
        synthetic_blobs(3, 5, 2, 1.0, make_rng(0))


def _fit_linear(ds, steps=300, lr=0.5):
    from itdm.nn import softmax_cross_entropy
    layer = Dense(ds.x.shape[1], ds.num_classes, relu=False)
    for _ in range(steps):
        out, cache = layer.forward(ds.x)
        _, d = softmax_cross_entropy(out, ds.labels)
        _, g = layer.backward(d, cache)
        for k in g:
            layer.params[k] -= lr * g[k]
    return np.mean(layer.forward(ds.x)[0].argmax(1) == ds.labels)


def test_blobs_separable_and_indistinguishable():
    assert _fit_linear(synthetic_blobs(2, 200, 2, 10.0, make_rng(0))) > 0.99
    acc = _fit_linear(synthetic_blobs(2, 500, 2, 0.0, make_rng(0)))
    assert abs(acc - 0.5) < 0.06


def test_sampler_epoch_coverage():
    sampler = DualBatchSampler(103, 10, make_rng(0))
    for _ in range(3):
        pairs = list(sampler.epoch())
        assert len(pairs) == sampler.steps_per_epoch() == 11
        s1 = np.concatenate([p[0] for p in pairs])
        assert sorted(s1.tolist()) == list(range(103))
        assert all(len(a) == len(b) for a, b in pairs)
        assert len(pairs[-1][0]) == 3


def test_sampler_full_batch():
    sampler = DualBatchSampler(12, 12, make_rng(0))
    for _ in range(2):
        (s1, s2), = list(sampler.epoch())
        assert sorted(s1.tolist()) == list(range(12)) == sorted(s2.tolist())


def test_sampler_end_of_epoch_signal():
    sampler = DualBatchSampler(4, 4, make_rng(0))
    with pytest.raises(StopIteration):
        sampler.next_pair()
    sampler.start_epoch()
    sampler.next_pair()
    with pytest.raises(StopIteration):
        sampler.next_pair()


def test_sampler_deterministic():
    def run(seed):
        s = DualBatchSampler(50, 7, make_rng(seed))
        return [(a.tolist(), b.tolist()) for _ in range(2) for a, b in s.epoch()]
    assert run(4) == run(4)
    assert run(4) != run(5)


def test_sampler_overlap_matches_independent_draws():
    n, m = 200, 20
    sampler = DualBatchSampler(n, m, make_rng(11))
    overlaps = []
    for _ in range(200):
        for s1, s2 in sampler.epoch():
            overlaps.append(len(np.intersect1d(s1, s2)) / m)
    # |S1 & S2| is hypergeometric: mean m^2/n, variance m (m/n)(1-m/n)(n-m)/(n-1)
    mean = m / n
    var = m * (m / n) * (1 - m / n) * (n - m) / (n - 1) / m**2
    se = np.sqrt(var / len(overlaps))
    assert abs(np.mean(overlaps) - mean) < 3 * se
