"""Dataset ingestion: IDX containers, raw little-endian matrices, synthetic clouds."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput

__all__ = ["DatasetSpec", "parse_idx", "parse_raw_matrix", "synth_dataset",
           "write_idx", "load_dataset", "RAW_DTYPES", "SYNTHETIC_KINDS"]

# IDX type byte -> big-endian element type
_IDX_TYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_IDX_CODE = {dt: code for code, dt in _IDX_TYPES.items()}

RAW_DTYPES = {"u8": np.dtype("u1"), "f32": np.dtype("<f4"),
              "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
SYNTHETIC_KINDS = ("affine_subspace", "swiss_roll_like", "uniform_cube")


@dataclass(frozen=True)
class DatasetSpec:
    """Where a point cloud comes from and how it is stored.

    ``source`` is ``idx`` (``paths`` lists IDX files, concatenated in order),
    ``rawf64`` (one raw matrix file with ``raw_dtype`` elements) or
    ``synthetic`` (``kind``, ``n``, ``D``, ``d``, ``seed``).
    """
    name: str
    source: str
    n: int | None = None
    D: int | None = None
    paths: tuple = ()
    raw_dtype: str = "f64"
    kind: str = "uniform_cube"
    d: int = 2
    seed: int = 0
    normalize: bool = False
    limit: int | None = None
    storage: str | None = None

    @property
    def storage_dtype(self):
        """Shelf float width: f32 for image data (IDX or raw u8), else f64."""
        if self.storage is not None:
            return RAW_DTYPES[self.storage]
        image = self.source == "idx" or (self.source == "rawf64" and self.raw_dtype == "u8")
        return np.dtype("<f4") if image else np.dtype("<f8")


def _read_bytes(source):
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(source, normalize=False):
    """Parse one IDX tensor into an ``n x D`` float64 matrix.

    Trailing axes are flattened row-major.  ``normalize`` divides integer
    data by the type's maximum (255 for u8).
    """
    data = _read_bytes(source)
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise FormatError(f"bad IDX magic {data[:4]!r}")
    dtype = _IDX_TYPES[data[2]]
    ndim = data[3]
    if ndim < 1 or len(data) < 4 + 4 * ndim:
        raise FormatError("IDX header is truncated")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    start = 4 + 4 * ndim
    if len(data) - start < count * dtype.itemsize:
        raise FormatError(f"IDX payload holds {len(data) - start} bytes, "
                          f"header promises {count * dtype.itemsize}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    arr = arr.reshape(dims[0], -1) if ndim > 1 else arr.reshape(-1, 1)
    out = arr.astype(np.float64)
    if normalize and dtype.kind in "iu":
        out /= np.iinfo(dtype).max
    return out


def write_idx(path, array):
    """Write ``array`` as an IDX file (``.gz`` suffix compresses)."""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _IDX_CODE:
        raise InvalidInput(f"IDX cannot store dtype {array.dtype}")
    header = bytes([0, 0, _IDX_CODE[dtype], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + np.ascontiguousarray(array, dtype=dtype).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def parse_raw_matrix(source, n, D, dtype="f64", normalize=False):
    """Load ``n x D`` little-endian elements of ``dtype`` (u8, f32, f64, i64)."""
    try:
        dt = RAW_DTYPES[dtype]
    except KeyError:
        raise InvalidInput(f"unknown raw dtype {dtype!r}") from None
    data = _read_bytes(source)
    expect = n * D * dt.itemsize
    if len(data) != expect:
        raise FormatError(f"raw payload is {len(data)} bytes, expected {n}x{D}x{dt.itemsize} = {expect}")
    out = np.frombuffer(data, dtype=dt).reshape(n, D).astype(np.float64)
    if normalize and dt.kind in "iu":
        out /= np.iinfo(dt).max
    return out


def _random_orthonormal(rng, D, d):
    q, r = np.linalg.qr(rng.standard_normal((D, d)))
    return q * np.sign(np.diag(r))


def synth_dataset(kind, n, D, d=2, seed=0):
    """Deterministic synthetic cloud.

    * ``affine_subspace``: exactly on a random ``d``-dim affine subspace of R^D.
    * ``swiss_roll_like``: a rolled 2-d sheet rotated into R^D (needs D >= 3).
    * ``uniform_cube``: uniform in ``[0, 1]^D``.
    """
    if n < 1 or D < 1:
        raise InvalidInput("n and D must be positive")
    if d > D:
        raise InvalidInput(f"intrinsic dimension {d} exceeds ambient dimension {D}")
    rng = np.random.default_rng(seed)
    if kind == "affine_subspace":
        basis = _random_orthonormal(rng, D, d)
        offset = rng.standard_normal(D)
        coords = rng.uniform(-1.0, 1.0, size=(n, d))
        return offset + coords @ basis.T
    if kind == "swiss_roll_like":
        if D < 3:
            raise InvalidInput("swiss_roll_like needs D >= 3")
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
        h = 10.0 * rng.random(n)
        sheet = np.column_stack([t * np.cos(t), h, t * np.sin(t)]) / 10.0
        return sheet @ _random_orthonormal(rng, D, 3).T
    if kind == "uniform_cube":
        return rng.random((n, D))
    raise InvalidInput(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")


def load_dataset(spec):
    """Materialise ``spec`` as a matrix in its storage dtype."""
    if spec.source == "idx":
        if not spec.paths:
            raise InvalidInput("idx datasets need at least one path")
        X = np.concatenate([parse_idx(p, spec.normalize) for p in spec.paths])
    elif spec.source == "rawf64":
        if not spec.paths or spec.n is None or spec.D is None:
            raise InvalidInput("raw datasets need a path, n and D")
        X = parse_raw_matrix(spec.paths[0], spec.n, spec.D, spec.raw_dtype, spec.normalize)
    elif spec.source == "synthetic":
        X = synth_dataset(spec.kind, spec.n, spec.D, spec.d, spec.seed)
    else:
        raise InvalidInput(f"unknown dataset source {spec.source!r}")
    if spec.limit is not None:
        X = X[:spec.limit]
    return np.ascontiguousarray(X, dtype=spec.storage_dtype)
