import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scvae.data_io import (
    load_mnist,
    make_splits,
    parse_idx,
    read_split,
    synth_dataset,
    write_idx,
    write_split,
)
from scvae.errors import ConfigurationError, FormatError, InputError

MNIST_DIR = os.environ.get("SCVAE_MNIST_DIR")


def test_hand_built_image_file():
    raw = struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 128, 0])
    out = parse_idx(raw)
    np.testing.assert_array_equal(out, [[0.0, 1.0, 128 / 255, 0.0]])


def test_label_file():
    raw = struct.pack(">II", 0x801, 3) + bytes([7, 0, 9])
    np.testing.assert_array_equal(parse_idx(raw), [7, 0, 9])


def test_bad_magic_is_quoted():
    raw = struct.pack(">II", 0xDEADBEEF, 0)
    with pytest.raises(FormatError, match="0xDEADBEEF"):
        parse_idx(raw)


def test_truncated_payload_reports_counts():
    raw = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5)
    with pytest.raises(FormatError, match="expected 8 bytes, got 5"):
        parse_idx(raw)


def test_gzip_is_transparent():
    raw = struct.pack(">IIII", 0x803, 1, 1, 2) + bytes([51, 102])
    np.testing.assert_array_equal(parse_idx(gzip.compress(raw)), parse_idx(raw))


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.sampled_from([4, 9, 16]))))
def test_image_round_trip_is_bitwise(pixels):
    parsed = parse_idx(struct.pack(">IIII", 0x803, pixels.shape[0], 1, pixels.shape[1]) + pixels.tobytes())
    again = parse_idx(write_idx(parsed))
    assert again.tobytes() == parsed.tobytes()


def test_label_round_trip():
    labels = np.array([0, 9, 3, 3], dtype=np.uint8)
    assert parse_idx(write_idx(labels)).tobytes() == labels.tobytes()


def _fake_mnist(rng):
    train = rng.integers(0, 256, size=(60000, 784), dtype=np.uint8)
    test = rng.integers(0, 256, size=(10000, 784), dtype=np.uint8)
    return (train / 255.0, rng.integers(0, 10, 60000).astype(np.uint8),
            test / 255.0, rng.integers(0, 10, 10000).astype(np.uint8))


def test_split_sizes_and_membership():
    ti, tl, si, sl = _fake_mnist(np.random.default_rng(0))
    split = make_splits(ti, tl, si, sl, seed=1)
    assert (len(split.train), len(split.val), len(split.test)) == (50000, 10000, 10000)
    assert np.shares_memory(split.train.images, ti)
    np.testing.assert_array_equal(split.val.images, ti[50000:])
    other = make_splits(ti, tl, si, sl, seed=99)
    np.testing.assert_array_equal(other.val.labels, split.val.labels)


def test_split_row_count_mismatch():
    ti, tl, si, sl = _fake_mnist(np.random.default_rng(0))
    with pytest.raises(InputError):
        make_splits(ti[:100], tl[:100], si, sl)


def test_mnist_directory_with_gzip_files(tmp_path):
    ti, tl, si, sl = _fake_mnist(np.random.default_rng(1))
    files = {
        "train-images-idx3-ubyte.gz": write_idx(ti, 28, 28),
        "train-labels-idx1-ubyte.gz": write_idx(tl),
        "t10k-images-idx3-ubyte.gz": write_idx(si, 28, 28),
        "t10k-labels-idx1-ubyte.gz": write_idx(sl),
    }
    for name, payload in files.items():
        (tmp_path / name).write_bytes(gzip.compress(payload, compresslevel=1))
    split = load_mnist(tmp_path)
    assert split.train.images.shape == (50000, 784)
    assert split.train.images.tobytes() == ti[:50000].tobytes()


@pytest.mark.skipif(not MNIST_DIR, reason="set SCVAE_MNIST_DIR to the official MNIST files")
def test_official_mnist_files():
    split = load_mnist(MNIST_DIR)
    assert (len(split.train), len(split.val), len(split.test)) == (50000, 10000, 10000)
    assert split.train.images.shape[1] == 784
    assert split.train.images.max() <= 1.0 and split.train.labels.max() <= 9


def test_synth_is_deterministic():
    a = synth_dataset(seed=4, n_per_class=20)
    b = synth_dataset(seed=4, n_per_class=20)
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.test.labels.tobytes() == b.test.labels.tobytes()


def test_synth_sizes_and_ranges():
    split = synth_dataset(seed=0, n_per_class=100, n_classes=4, d=64)
    assert split.train.images.shape == (400, 64)
    assert set(np.unique(split.train.images)) <= {0.0, 1.0}
    assert set(np.unique(split.train.labels)) == {0, 1, 2, 3}


@pytest.mark.parametrize("kwargs", [dict(n_classes=11), dict(d=1), dict(n_per_class=0)])
def test_synth_validation(kwargs):
    with pytest.raises(ConfigurationError):
        synth_dataset(seed=0, **{"n_per_class": 10, **kwargs})


def test_synth_is_linearly_separable():
    from sklearn.linear_model import LogisticRegression

    split = synth_dataset(seed=2, n_per_class=250, n_classes=4, d=64)
    clf = LogisticRegression(max_iter=2000).fit(split.train.images, split.train.labels)
    assert clf.score(split.test.images, split.test.labels) > 0.9


def test_write_and_read_split(tmp_path):
    split = synth_dataset(seed=1, n_per_class=10, d=16)
    write_split(split, tmp_path)
    back = read_split(tmp_path)
    assert back.train.images.tobytes() == split.train.images.tobytes()
    assert back.val.labels.tobytes() == split.val.labels.tobytes()
