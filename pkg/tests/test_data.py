import struct

import numpy as np
import pytest

from quadranet import data as D


def test_xor_labels_and_balance():
    ds = D.gen_xor(25, spread=3.0, seed=1)
    x = ds.inputs
    assert x.shape == (100, 2) and np.all(x != 0) and np.all(np.abs(x) <= 3.0)
    assert np.array_equal(ds.labels, (np.sign(x[:, 0] * x[:, 1]) > 0).astype(int))
    assert ds.labels.sum() == 50


def test_xor_determinism():
    assert D.gen_xor(10, seed=3).to_bytes() == D.gen_xor(10, seed=3).to_bytes()
    assert D.gen_xor(10, seed=3).to_bytes() != D.gen_xor(10, seed=4).to_bytes()


def test_xor_errors():
    with pytest.raises(ValueError):
        D.gen_xor(0)
    with pytest.raises(ValueError):
        D.gen_xor(3, spread=0.0)


def test_xor_images():
    ds = D.gen_xor_images(5, size=16, seed=0)
    assert ds.inputs.shape == (20, 1, 16, 16) and ds.num_classes == 2
    pts = D.gen_xor(5, seed=0)
    assert np.array_equal(ds.labels, pts.labels)
    # the brightest pixel sits in the quadrant of the source point
    flat = ds.inputs[:, 0].reshape(20, -1).argmax(axis=1)
    rows, cols = np.unravel_index(flat, (16, 16))
    assert np.array_equal(cols >= 8, pts.inputs[:, 0] > 0)
    assert np.array_equal(rows < 8, pts.inputs[:, 1] > 0)


def test_interaction_class_balance():
    ds = D.gen_interaction_images(10_000, size=8, seed=0, channels=1)
    counts = np.bincount(ds.labels, minlength=4)
    assert np.all(np.abs(counts - 2500) <= 0.05 * 2500)


def test_interaction_shapes_and_determinism():
    a = D.gen_interaction_images(20, size=16, seed=5)
    b = D.gen_interaction_images(20, size=16, seed=5)
    assert a.inputs.shape == (20, 3, 16, 16) and a.num_classes == 4
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != D.gen_interaction_images(20, size=16, seed=6).to_bytes()
    assert set(D.gen_interaction_images(50, size=16, num_classes=2).labels) <= {0, 1}


def test_interaction_errors():
    with pytest.raises(ValueError):
        D.gen_interaction_images(4, size=7)
    with pytest.raises(ValueError):
        D.gen_interaction_images(4, num_classes=3)


def test_interaction_defeats_linear_probe():
    """An affine read-out of the raw pixels, fit by ridge regression on one-hot targets."""
    train = D.gen_interaction_images(2000, size=32, seed=11)
    test = D.gen_interaction_images(1000, size=32, seed=12)
    def feats(ds):
        x = ds.inputs.reshape(len(ds), -1)
        return np.hstack([x, np.ones((len(ds), 1))])
    X = feats(train)
    Y = np.eye(4)[train.labels]
    W = np.linalg.solve(X.T @ X + 1.0 * np.eye(X.shape[1]), X.T @ Y)
    acc = np.mean((feats(test) @ W).argmax(axis=1) == test.labels)
    assert acc <= 0.6


def test_split_stride():
    ds = D.gen_xor(5)
    tr, va = ds.split_stride(5)
    assert len(tr) == 16 and len(va) == 4 and va.split == "val"
    assert np.array_equal(va.inputs, ds.inputs[4::5])


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((2, 2)), [0], 2)


def write_fixture(tmp_path):
    # written directly with struct, independent of write_idx
    pixels = bytes(range(0, 32 * 8, 8))
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 2, 4, 4) + pixels)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 2) + bytes([3, 7]))
    return tmp_path / "img", tmp_path / "lab"


def test_read_idx_fixture(tmp_path):
    img, lab = write_fixture(tmp_path)
    ds = D.read_idx(img, lab)
    assert ds.inputs.shape == (2, 1, 4, 4)
    expected = np.arange(0, 256, 8, dtype=np.float64).reshape(2, 1, 4, 4) / 255.0
    assert np.array_equal(ds.inputs, expected)
    assert list(ds.labels) == [3, 7] and ds.num_classes == 8


def test_idx_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 1, 6, 3))
    ds = D.LabeledDataset(pixels / 255.0, rng.integers(0, 10, size=5), 10)
    D.write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = D.read_idx(tmp_path / "i", tmp_path / "l", num_classes=10)
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)
    D.write_idx(back, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i").read_bytes() == (tmp_path / "i2").read_bytes()


def test_idx_errors(tmp_path):
    img, lab = write_fixture(tmp_path)
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">IIII", 0x801, 2, 4, 4) + bytes(32))
    with pytest.raises(D.IdxFormatError, match="0x00000803"):
        D.read_idx(bad, lab)
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(D.IdxLengthError, match="truncated"):
        D.read_idx(empty, lab)
    short = tmp_path / "short"
    short.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(D.IdxLengthError, match="offset"):
        D.read_idx(short, lab)
    lab3 = tmp_path / "lab3"
    lab3.write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(D.IdxError, match="2 images but 3 labels"):
        D.read_idx(img, lab3)
