import gzip
import struct

import numpy as np
import pytest

from pmgmra.datasets import (DatasetSpec, load_dataset, parse_idx,
                             parse_raw_matrix, synth_dataset, write_idx)
from pmgmra.errors import FormatError, InvalidInput


def idx_bytes(code, dims, payload):
    return bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_layout():
    X = parse_idx(idx_bytes(0x08, (2, 2, 2), bytes(range(8))))
    assert X.dtype == np.float64
    assert X.tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]


def test_idx_normalize():
    X = parse_idx(idx_bytes(0x08, (1, 3), bytes([0, 128, 255])), normalize=True)
    assert X.max() == 1.0 and X[0, 0] == 0.0


def test_idx_errors():
    with pytest.raises(FormatError):
        parse_idx(b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(FormatError):
        parse_idx(idx_bytes(0x07, (1,), b"\x00"))
    with pytest.raises(FormatError):
        parse_idx(idx_bytes(0x08, (2, 2), bytes(3)))
    with pytest.raises(FormatError):
        parse_idx(b"\x00\x00\x08\x02\x00")


def test_idx_wide_types(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(3, 2) - 2.5
    write_idx(tmp_path / "f.idx", a)
    np.testing.assert_array_equal(parse_idx(tmp_path / "f.idx"), a)
    b = np.arange(-3, 3, dtype=np.int32).reshape(2, 3)
    write_idx(tmp_path / "i.idx.gz", b)
    assert (tmp_path / "i.idx.gz").read_bytes()[:2] == b"\x1f\x8b"
    np.testing.assert_array_equal(parse_idx(tmp_path / "i.idx.gz"), b)


def test_mnist_shaped_concatenation(tmp_path):
    from conftest import mnist_like
    imgs = mnist_like(700, seed=1)
    write_idx(tmp_path / "train.idx", imgs[:600])
    write_idx(tmp_path / "test.idx.gz", imgs[600:])
    X = load_dataset(DatasetSpec("m", "idx", paths=(tmp_path / "train.idx", tmp_path / "test.idx.gz")))
    assert X.shape == (700, 784) and X.dtype == np.float32
    # lossless for u8: widen then narrow gives the original bytes back
    assert X.astype(np.uint8).tobytes() == imgs.reshape(700, 784).tobytes()


def test_raw_matrix(tmp_path):
    assert parse_raw_matrix(struct.pack("<d", 2.5), 1, 1).tolist() == [[2.5]]
    with pytest.raises(FormatError):
        parse_raw_matrix(bytes(15), 2, 1)
    payload = np.arange(12, dtype=np.uint8).tobytes()
    X = parse_raw_matrix(payload, 3, 4, "u8")
    assert X.shape == (3, 4) and X.dtype == np.float64 and X[2, 3] == 11
    with pytest.raises(InvalidInput):
        parse_raw_matrix(payload, 3, 4, "f16")


def test_cifar_shaped_payload():
    payload = bytes(60000 * 3072)
    X = parse_raw_matrix(payload, 60000, 3072, "u8")
    assert X.shape == (60000, 3072)
    with pytest.raises(FormatError):
        parse_raw_matrix(payload[:-1], 60000, 3072, "u8")


def test_synthetic_affine_subspace():
    X = synth_dataset("affine_subspace", 500, 20, d=3, seed=7)
    C = X - X.mean(axis=0)
    _, sv, vt = np.linalg.svd(C, full_matrices=True)
    resid = C - C @ vt[:3].T @ vt[:3]
    assert np.abs(resid).max() <= 1e-12
    assert sv[2] > 1e-3 * sv[0]


def test_synthetic_determinism_and_range():
    a = synth_dataset("uniform_cube", 50, 4, seed=3)
    assert a.tobytes() == synth_dataset("uniform_cube", 50, 4, seed=3).tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert synth_dataset("swiss_roll_like", 10, 5, seed=1).shape == (10, 5)
    with pytest.raises(InvalidInput):
        synth_dataset("affine_subspace", 10, 2, d=3)
    with pytest.raises(InvalidInput):
        synth_dataset("swiss_roll_like", 10, 2, d=2)
    with pytest.raises(InvalidInput):
        synth_dataset("torus", 10, 3)


def test_storage_dtype_defaults():
    assert DatasetSpec("a", "idx").storage_dtype == np.float32
    assert DatasetSpec("a", "rawf64", raw_dtype="u8").storage_dtype == np.float32
    assert DatasetSpec("a", "rawf64").storage_dtype == np.float64
    assert DatasetSpec("a", "synthetic").storage_dtype == np.float64
    assert DatasetSpec("a", "idx", storage="f64").storage_dtype == np.float64


def test_load_dataset_limit():
    X = load_dataset(DatasetSpec("s", "synthetic", n=100, D=3, limit=10))
    assert X.shape == (10, 3) and X.flags.c_contiguous
    with pytest.raises(InvalidInput):
        load_dataset(DatasetSpec("s", "idx"))
    with pytest.raises(InvalidInput):
        load_dataset(DatasetSpec("s", "parquet"))
