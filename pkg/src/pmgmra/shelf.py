"""Shelf: a region of named, typed n-dimensional arrays.

A shelf lives either in an ordinary file mapped into memory (``persistent``)
or in an anonymous buffer with the exact same byte layout (``volatile``).
Arrays are bump-allocated at 64-byte aligned offsets and handed out as numpy
views over the region, so numpy code can work on them in place.

Region layout (little-endian)::

    0   magic        8s   b"GMRASHLF"
    8   version      u32  1
    12  capacity     u64  region size in bytes
    20  entry count  u64
    28  consistency  u32  0 = none, 1 = wal
    32  records      name_len u16, name, dtype u8, ndim u8,
                     shape u64 * ndim, offset u64, nbytes u64
    ..  payloads     from ``catalog_limit(capacity)`` upward

With ``consistency="wal"`` every write inside a transaction first appends an
undo record ``(target_offset u64, length u64, old_bytes, crc32 u32)`` to the
sidecar ``<path>.wal``; commit appends ``TXCOMMIT`` and truncates the log.
Opening a shelf whose log holds an uncommitted transaction rolls the region
back to its pre-transaction bytes.
"""
from __future__ import annotations

import contextlib
import hashlib
import os
import shutil
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (AlreadyExists, CapacityError, CorruptionError,
                     FormatError, InvalidInput, NameExists, NotFound,
                     SimulatedCrash, TxError)

__all__ = ["Shelf", "ArrayRecord", "create_shelf", "open_shelf",
           "catalog_limit", "MAGIC", "COMMIT_MARKER", "DTYPE_CODES"]

MAGIC = b"GMRASHLF"
VERSION = 1
COMMIT_MARKER = b"TXCOMMIT"
ALIGN = 64
MIN_CAPACITY = 64 * 1024
MAX_NAME = 255
MAX_NDIM = 8

_HEADER = struct.Struct("<8sIQQI")
_WAL_HEAD = struct.Struct("<QQ")
_CRC = struct.Struct("<I")
_COUNT_OFFSET = 20

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"),
               3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}
_CONSISTENCY = {"none": 0, "wal": 1}


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def catalog_limit(capacity):
    """First payload byte: header plus the reserved catalog area.

    The reserve scales with the region (1/32nd, clamped to [4 KiB, 256 MiB])
    so it never needs to be recorded in the header.
    """
    return _align(min(max(capacity // 32, 4096), 256 << 20))


def _dtype_code(dtype):
    dt = np.dtype(dtype)
    if dt.byteorder == ">":
        dt = dt.newbyteorder("<")
    try:
        return _CODE_OF[dt]
    except KeyError:
        raise InvalidInput(f"unsupported dtype {dtype!r}; "
                           f"expected one of f32, f64, i64, u8") from None


@dataclass(frozen=True)
class ArrayRecord:
    name: str
    dtype: int
    shape: tuple
    offset: int
    nbytes: int

    @property
    def numpy_dtype(self):
        return DTYPE_CODES[self.dtype]

    def encode(self):
        raw = self.name.encode("utf-8")
        return (struct.pack("<H", len(raw)) + raw
                + struct.pack("<BB", self.dtype, len(self.shape))
                + struct.pack(f"<{len(self.shape)}Q", *self.shape)
                + struct.pack("<QQ", self.offset, self.nbytes))


def _decode_records(buf, count, limit, capacity):
    records = []
    pos = _HEADER.size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = bytes(buf[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            if pos > limit:
                raise FormatError("catalog overruns its reserved area")
            if code not in DTYPE_CODES or ndim > MAX_NDIM or not name:
                raise FormatError(f"malformed record for {name!r}")
            rec = ArrayRecord(name, code, tuple(shape), offset, nbytes)
            expect = DTYPE_CODES[code].itemsize * int(np.prod(shape, dtype=np.int64))
            if nbytes != expect or offset % ALIGN or offset < limit \
                    or offset + nbytes > capacity:
                raise FormatError(f"bad extent for array {name!r}")
            records.append(rec)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"catalog is truncated or garbled: {exc}") from None
    return records, pos


class Shelf:
    """A named collection of arrays stored in one region.

    Use :func:`create_shelf` / :func:`open_shelf` rather than the constructor.
    """

    def __init__(self, mem, path, mode, consistency, records, catalog_end,
                 fsync=True):
        self._mem = mem
        self.path = Path(path) if path is not None else None
        self.mode = mode
        self.consistency = consistency
        self.capacity = int(mem.shape[0])
        self.fsync = fsync
        self._records = {r.name: r for r in records}
        self._catalog_end = catalog_end
        self._data_start = catalog_limit(self.capacity)
        self._next = max([self._data_start]
                         + [_align(r.offset + r.nbytes) for r in records])
        self._tx = None
        self._wal = None
        self.crash_budget = None
        self.closed = False

    # -- catalog -------------------------------------------------------------

    def __contains__(self, name):
        return name in self._records

    def __len__(self):
        return len(self._records)

    def __getitem__(self, name):
        return self.get_array(name)

    def names(self):
        return list(self._records)

    def list_arrays(self):
        return list(self._records.values())

    def record(self, name):
        try:
            return self._records[name]
        except KeyError:
            raise NotFound(name) from None

    @property
    def used_bytes(self):
        """High-water mark of the region: header, catalog and payloads."""
        ends = [self._catalog_end] + [r.offset + r.nbytes
                                      for r in self._records.values()]
        return max(ends)

    # -- arrays --------------------------------------------------------------

    def put_array(self, name, data=None, *, dtype=None, shape=None):
        """Allocate ``name`` and copy ``data`` into it.

        With ``data=None`` the array is allocated zero-filled from ``dtype``
        and ``shape``.  Under WAL consistency the whole put is atomic.
        """
        self._check_open()
        raw = name.encode("utf-8") if isinstance(name, str) else b""
        if not raw or len(raw) > MAX_NAME:
            raise InvalidInput(f"array name must be 1..{MAX_NAME} bytes: {name!r}")
        if name in self._records:
            raise NameExists(name)
        if data is not None:
            data = np.asarray(data)
            dtype = data.dtype if dtype is None else dtype
            shape = data.shape if shape is None else tuple(shape)
            if int(np.prod(shape)) != data.size:
                raise InvalidInput(f"shape {shape} does not match data size {data.size}")
        if dtype is None or shape is None:
            raise InvalidInput("dtype and shape are required without data")
        code = _dtype_code(dtype)
        shape = tuple(int(s) for s in shape)
        if len(shape) > MAX_NDIM or any(s < 0 for s in shape):
            raise InvalidInput(f"invalid shape {shape}")
        nbytes = DTYPE_CODES[code].itemsize * int(np.prod(shape, dtype=np.int64))
        offset = _align(self._next)
        if offset + nbytes > self.capacity:
            raise CapacityError(f"{name!r} needs {nbytes} bytes at offset {offset}; "
                                f"region capacity is {self.capacity}")
        rec = ArrayRecord(name, code, shape, offset, nbytes)
        enc = rec.encode()
        if self._catalog_end + len(enc) > self._data_start:
            raise CapacityError("catalog area is full")

        with self._auto_tx():
            if data is not None and nbytes:
                payload = np.ascontiguousarray(data, dtype=DTYPE_CODES[code])
                self._write(offset, payload.reshape(-1).view(np.uint8))
            self._write(self._catalog_end, enc)
            self._write(_COUNT_OFFSET, struct.pack("<Q", len(self._records) + 1))
        self._records[name] = rec
        self._catalog_end += len(enc)
        self._next = offset + nbytes
        return rec

    def get_array(self, name):
        """Return a view over the stored bytes of ``name`` (no copy).

        Views are writable unless the shelf runs with WAL consistency, where
        in-place edits must go through :meth:`write_array` to be logged.
        """
        self._check_open()
        rec = self.record(name)
        view = (self._mem[rec.offset:rec.offset + rec.nbytes]
                .view(rec.numpy_dtype).reshape(rec.shape))
        if self.consistency == "wal":
            view = view.view()
            view.flags.writeable = False
        return view

    def write_array(self, name, values, index=None):
        """Logged in-place update: ``array[index] = values``."""
        self._check_open()
        rec = self.record(name)
        current = (self._mem[rec.offset:rec.offset + rec.nbytes]
                   .view(rec.numpy_dtype).reshape(rec.shape))
        updated = current.copy()
        if index is None:
            updated[...] = values
        else:
            updated[index] = values
        with self._auto_tx():
            self._write(rec.offset, updated.reshape(-1).view(np.uint8))

    def erase_array(self, name):
        """Drop ``name`` from the catalog.  Its extent is not reused."""
        self._check_open()
        rec = self.record(name)
        ordered = list(self._records.values())
        idx = ordered.index(rec)
        start = _HEADER.size + sum(len(r.encode()) for r in ordered[:idx])
        tail = b"".join(r.encode() for r in ordered[idx + 1:])
        new_end = start + len(tail)
        with self._auto_tx():
            # zero the stale bytes so equal catalogs mean equal regions
            self._write(start, tail + bytes(self._catalog_end - new_end))
            self._write(_COUNT_OFFSET, struct.pack("<Q", len(ordered) - 1))
        del self._records[name]
        self._catalog_end = new_end
        # the extent stays burnt for the rest of the session
        self._next = max(self._next, rec.offset + rec.nbytes)

    # -- transactions ---------------------------------------------------------

    def begin_tx(self):
        self._check_open()
        if self.consistency != "wal":
            raise TxError("transactions need consistency='wal'")
        if self._tx is not None:
            raise TxError("a transaction is already open")
        self._tx = []
        if self.mode == "persistent":
            self._wal = open(self._wal_path(), "ab")

    def commit_tx(self):
        if self._tx is None:
            raise TxError("no open transaction")
        if self.mode == "persistent":
            # payload must be durable before the marker that makes it final
            self._flush_region()
            self._wal_append(COMMIT_MARKER)
            self._wal.truncate(0)
            self._wal.close()
            self._wal = None
            os.unlink(self._wal_path())
        self._tx = None

    def rollback_tx(self):
        """Abort the open transaction in-process, restoring the old bytes."""
        if self._tx is None:
            raise TxError("no open transaction")
        for offset, old in reversed(self._tx):
            self._mem[offset:offset + len(old)] = np.frombuffer(old, np.uint8)
        if self.mode == "persistent":
            self._flush_region()
            self._wal.close()
            self._wal = None
            os.unlink(self._wal_path())
        self._tx = None
        self._reload_catalog()

    @property
    def in_transaction(self):
        return self._tx is not None

    @contextlib.contextmanager
    def transaction(self):
        self.begin_tx()
        try:
            yield self
        except SimulatedCrash:
            raise
        except BaseException:
            self.rollback_tx()
            raise
        self.commit_tx()

    @contextlib.contextmanager
    def _auto_tx(self):
        if self.consistency == "wal" and self._tx is None:
            with self.transaction():
                yield
        else:
            yield

    # -- low-level writes -----------------------------------------------------

    def _spend(self, n):
        """Bytes of an ``n``-byte write that survive the injected crash."""
        if self.crash_budget is None:
            return n
        allowed = min(n, self.crash_budget)
        self.crash_budget -= allowed
        return allowed

    def _wal_path(self):
        return Path(str(self.path) + ".wal")

    def _wal_append(self, data):
        allowed = self._spend(len(data))
        if self.mode == "persistent":
            self._wal.write(data[:allowed])
            self._wal.flush()
            if self.fsync:
                os.fsync(self._wal.fileno())
        if allowed < len(data):
            raise SimulatedCrash("crash while appending to the log")

    def _write(self, offset, data):
        data = np.frombuffer(data, np.uint8) if not isinstance(data, np.ndarray) else data
        n = int(data.shape[0])
        if n == 0:
            return
        if self._tx is not None:
            old = self._mem[offset:offset + n].tobytes()
            head = _WAL_HEAD.pack(offset, n)
            crc = zlib.crc32(head + old)
            self._wal_append(head + old + _CRC.pack(crc))
            self._tx.append((offset, old))
        allowed = self._spend(n)
        self._mem[offset:offset + allowed] = data[:allowed]
        if allowed < n:
            raise SimulatedCrash("crash while writing the region")

    def _flush_region(self):
        if isinstance(self._mem, np.memmap):
            self._mem.flush()

    def _reload_catalog(self):
        _, _, _, count, _ = _HEADER.unpack_from(self._mem, 0)
        records, end = _decode_records(self._mem, count, self._data_start,
                                       self.capacity)
        self._records = {r.name: r for r in records}
        self._catalog_end = end

    # -- lifecycle --------------------------------------------------------------

    def _check_open(self):
        if self.closed:
            raise ValueError("shelf is closed")

    def flush(self):
        self._flush_region()

    def close(self):
        if self.closed:
            return
        if self._tx is not None:
            self.rollback_tx()
        self._flush_region()
        self._mem = None
        self.closed = True

    def abandon(self):
        """Drop all handles without committing or flushing (crash stand-in)."""
        if self._wal is not None:
            self._wal.close()
            self._wal = None
        self._mem = None
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def to_bytes(self):
        return self._mem.tobytes()

    def checksum(self):
        return hashlib.sha256(memoryview(self._mem)).hexdigest()

    def save(self, path):
        """Write the region image to ``path`` as a persistent shelf file.

        Only the used prefix is written; the file is then extended to the full
        capacity, which stays sparse on filesystems that support it.
        """
        path = Path(path)
        try:
            fh = open(path, "xb")
        except FileExistsError:
            raise AlreadyExists(str(path)) from None
        with fh:
            fh.write(memoryview(self._mem[:self.used_bytes]))
            fh.truncate(self.capacity)
        return path

    def __repr__(self):
        where = self.path if self.path is not None else "<memory>"
        return (f"Shelf({where}, mode={self.mode}, consistency={self.consistency}, "
                f"arrays={len(self._records)}, used={self.used_bytes}/{self.capacity})")


def _header_bytes(capacity, consistency):
    return _HEADER.pack(MAGIC, VERSION, capacity, 0, _CONSISTENCY[consistency])


def create_shelf(path=None, capacity_bytes=1 << 20, mode="persistent",
                 consistency="none", fsync=True):
    """Create an empty shelf region.

    ``path`` is required for persistent shelves; volatile shelves keep it only
    as a label.
    """
    if mode not in ("persistent", "volatile"):
        raise InvalidInput(f"unknown mode {mode!r}")
    if consistency not in _CONSISTENCY:
        raise InvalidInput(f"unknown consistency {consistency!r}")
    capacity = int(capacity_bytes)
    if capacity < MIN_CAPACITY:
        raise CapacityError(f"capacity must be at least {MIN_CAPACITY} bytes")
    capacity = _align(capacity)

    if mode == "volatile":
        try:
            mem = np.zeros(capacity, dtype=np.uint8)
        except MemoryError:
            raise CapacityError(f"cannot allocate {capacity} bytes") from None
    else:
        if path is None:
            raise InvalidInput("persistent shelves need a path")
        path = Path(path)
        directory = path.parent if str(path.parent) else Path(".")
        if path.exists():
            raise AlreadyExists(str(path))
        free = shutil.disk_usage(directory).free
        if free < capacity:
            raise CapacityError(f"{capacity} bytes requested, {free} free on {directory}")
        try:
            with open(path, "xb") as fh:
                fh.truncate(capacity)
        except FileExistsError:
            raise AlreadyExists(str(path)) from None
        mem = np.memmap(path, dtype=np.uint8, mode="r+", shape=(capacity,))
    mem[:_HEADER.size] = np.frombuffer(_header_bytes(capacity, consistency), np.uint8)
    shelf = Shelf(mem, path, mode, consistency, [], _HEADER.size, fsync=fsync)
    shelf.flush()
    return shelf


def _recover(path, mem):
    """Roll back an uncommitted transaction found in ``<path>.wal``."""
    wal_path = Path(str(path) + ".wal")
    if not wal_path.exists():
        return False
    log = wal_path.read_bytes()
    committed = log.endswith(COMMIT_MARKER)
    body_end = len(log) - len(COMMIT_MARKER) if committed else len(log)
    capacity = mem.shape[0]
    undo = []
    pos = 0
    while pos < body_end:
        if body_end - pos < _WAL_HEAD.size:
            break
        offset, length = _WAL_HEAD.unpack_from(log, pos)
        end = pos + _WAL_HEAD.size + length + _CRC.size
        if end > body_end or offset + length > capacity:
            break
        old = log[pos + _WAL_HEAD.size:end - _CRC.size]
        (crc,) = _CRC.unpack_from(log, end - _CRC.size)
        if zlib.crc32(log[pos:pos + _WAL_HEAD.size] + old) != crc:
            break
        undo.append((offset, old))
        pos = end
    if committed:
        if pos != body_end:
            raise CorruptionError(f"committed log {wal_path} has a damaged record at byte {pos}")
    else:
        # torn tail: anything past ``pos`` never reached the region
        for offset, old in reversed(undo):
            mem[offset:offset + len(old)] = np.frombuffer(old, np.uint8)
        mem.flush()
    os.unlink(wal_path)
    return not committed


def open_shelf(path, fsync=True):
    """Open an existing persistent shelf, recovering it first if needed."""
    path = Path(path)
    if not path.exists():
        raise NotFound(str(path))
    size = path.stat().st_size
    if size < _HEADER.size:
        raise FormatError(f"{path} is too small to be a shelf")
    mem = np.memmap(path, dtype=np.uint8, mode="r+", shape=(size,))
    _recover(path, mem)
    magic, version, capacity, count, consistency = _HEADER.unpack_from(mem, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if capacity != size:
        raise FormatError(f"{path}: header capacity {capacity} != file size {size}")
    if consistency not in (0, 1):
        raise FormatError(f"{path}: bad consistency code {consistency}")
    records, end = _decode_records(mem, count, catalog_limit(capacity), capacity)
    spans = sorted((r.offset, r.offset + r.nbytes) for r in records if r.nbytes)
    for (_, a_end), (b_start, _) in zip(spans, spans[1:]):
        if b_start < a_end:
            raise FormatError(f"{path}: overlapping array extents")
    if len({r.name for r in records}) != len(records):
        raise FormatError(f"{path}: duplicate array names")
    mode_name = "wal" if consistency == 1 else "none"
    return Shelf(mem, path, "persistent", mode_name, records, end, fsync=fsync)
