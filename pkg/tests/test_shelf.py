import hashlib
import shutil
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings, HealthCheck, strategies as st

from pmgmra.errors import (AlreadyExists, CapacityError, CorruptionError,
                           FormatError, InvalidInput, NameExists, NotFound,
                           SimulatedCrash, TxError)
from pmgmra.shelf import (COMMIT_MARKER, MAGIC, catalog_limit, create_shelf,
                          open_shelf)

MiB = 1 << 20


def file_sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def catalog(shelf):
    return [(r.name, r.dtype, r.shape, r.offset, r.nbytes) for r in shelf.list_arrays()]


def test_create_empty(tmp_path):
    s = create_shelf(tmp_path / "s1", MiB)
    assert s.list_arrays() == []
    s.close()
    assert (tmp_path / "s1").stat().st_size == MiB
    head = (tmp_path / "s1").read_bytes()[:32]
    assert head[:8] == MAGIC
    assert struct.unpack("<IQQI", head[8:]) == (1, MiB, 0, 0)
    assert open_shelf(tmp_path / "s1").list_arrays() == []


def test_create_errors(tmp_path):
    create_shelf(tmp_path / "s", MiB).close()
    with pytest.raises(AlreadyExists):
        create_shelf(tmp_path / "s", MiB)
    with pytest.raises(CapacityError):
        create_shelf(tmp_path / "t", 1000)
    with pytest.raises(InvalidInput):
        create_shelf(None, MiB, mode="persistent")


def test_mnist_capacity_boundary():
    # 70000 x 784 f32 fits only when the data area is large enough
    nbytes = 70000 * 784 * 4
    assert nbytes == 219_520_000
    too_small = create_shelf(None, nbytes, mode="volatile")
    with pytest.raises(CapacityError):
        too_small.put_array("X", dtype=np.float32, shape=(70000, 784))
    cap = nbytes + catalog_limit(2 * nbytes) + 64
    ok = create_shelf(None, cap, mode="volatile")
    rec = ok.put_array("X", dtype=np.float32, shape=(70000, 784))
    assert rec.nbytes == nbytes


def test_u8_mnist_record_size():
    s = create_shelf(None, 64 * MiB, mode="volatile")
    assert s.put_array("images", dtype=np.uint8, shape=(70000, 784)).nbytes == 54_880_000


def test_put_get_identity():
    s = create_shelf(None, MiB, mode="volatile")
    s.put_array("a", np.array([[1.0, 2.0], [3.0, 4.0]]))
    a = s.get_array("a")
    assert a.shape == (2, 2) and a.dtype == np.float64
    assert a.tolist() == [[1, 2], [3, 4]]


def test_dtypes_roundtrip(tmp_path):
    arrays = {"f32": np.arange(6, dtype=np.float32).reshape(2, 3),
              "f64": np.linspace(0, 1, 7),
              "i64": np.array([-5, 0, 2**40], dtype=np.int64),
              "u8": np.arange(256, dtype=np.uint8),
              "empty": np.zeros((0, 4)),
              "big-endian": np.arange(3, dtype=">f8")}
    s = create_shelf(tmp_path / "s", MiB)
    for k, v in arrays.items():
        s.put_array(k, v)
    s.close()
    s = open_shelf(tmp_path / "s")
    for k, v in arrays.items():
        np.testing.assert_array_equal(s.get_array(k), v)
    with pytest.raises(InvalidInput):
        s.put_array("c", np.array([1 + 2j]))


def test_put_errors():
    s = create_shelf(None, MiB, mode="volatile")
    s.put_array("a", np.zeros(3))
    with pytest.raises(NameExists):
        s.put_array("a", np.zeros(3))
    with pytest.raises(InvalidInput):
        s.put_array("", np.zeros(3))
    with pytest.raises(InvalidInput):
        s.put_array("x" * 256, np.zeros(3))
    with pytest.raises(CapacityError):
        s.put_array("huge", dtype=np.float64, shape=(MiB,))
    with pytest.raises(NotFound):
        s.get_array("missing")


def test_extents_aligned_and_disjoint():
    s = create_shelf(None, MiB, mode="volatile")
    for i, n in enumerate([1, 3, 17, 64, 5]):
        s.put_array(f"a{i}", np.ones(n, dtype=np.uint8))
    spans = sorted((r.offset, r.offset + r.nbytes) for r in s.list_arrays())
    assert all(a % 64 == 0 for a, _ in spans)
    # brute-force interval overlap check
    for i, (a0, a1) in enumerate(spans):
        for b0, b1 in spans[i + 1:]:
            assert a1 <= b0 or b1 <= a0


def test_inplace_mutation_persists(tmp_path):
    s = create_shelf(tmp_path / "s", MiB)
    s.put_array("a", np.zeros(4))
    s.get_array("a")[2] = 7.5
    s.close()
    assert open_shelf(tmp_path / "s").get_array("a").tolist() == [0, 0, 7.5, 0]


def test_views_are_not_copies(tmp_path):
    s = create_shelf(tmp_path / "s", MiB)
    s.put_array("a", np.zeros(4))
    v1, v2 = s.get_array("a"), s.get_array("a")
    v1[0] = 3.0
    assert v2[0] == 3.0


def test_concurrent_readers(tmp_path):
    s = create_shelf(tmp_path / "s", 4 * MiB)
    s.put_array("a", np.random.default_rng(0).random(100_000))
    expect = hashlib.sha256(s.get_array("a").tobytes()).hexdigest()
    seen = []

    def reader():
        for _ in range(20):
            seen.append(hashlib.sha256(s.get_array("a").tobytes()).hexdigest())

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(seen) == 80 and set(seen) == {expect}


def test_erase(tmp_path):
    s = create_shelf(tmp_path / "s", MiB)
    first = s.put_array("a", np.arange(3.0))
    s.put_array("b", np.arange(4.0))
    s.erase_array("a")
    with pytest.raises(NotFound):
        s.get_array("a")
    with pytest.raises(NotFound):
        s.erase_array("a")
    again = s.put_array("a", np.arange(5.0))
    assert again.offset != first.offset
    assert again.offset >= first.offset + first.nbytes
    s.close()
    s = open_shelf(tmp_path / "s")
    assert s.names() == ["b", "a"]
    assert s.get_array("a").tolist() == [0, 1, 2, 3, 4]


def test_erase_durable(tmp_path):
    s = create_shelf(tmp_path / "s", MiB)
    s.put_array("a", np.arange(3.0))
    s.erase_array("a")
    s.close()
    assert open_shelf(tmp_path / "s").names() == []


def test_flipped_magic(tmp_path):
    create_shelf(tmp_path / "s", MiB).close()
    with open(tmp_path / "s", "r+b") as fh:
        fh.write(b"X")
    with pytest.raises(FormatError):
        open_shelf(tmp_path / "s")


def test_bad_version_and_size(tmp_path):
    create_shelf(tmp_path / "s", MiB).close()
    shutil.copy(tmp_path / "s", tmp_path / "t")
    with open(tmp_path / "s", "r+b") as fh:
        fh.seek(8)
        fh.write(struct.pack("<I", 2))
    with pytest.raises(FormatError):
        open_shelf(tmp_path / "s")
    with open(tmp_path / "t", "ab") as fh:
        fh.write(b"\0" * 64)
    with pytest.raises(FormatError):
        open_shelf(tmp_path / "t")
    with pytest.raises(NotFound):
        open_shelf(tmp_path / "missing")


def test_tx_mode_gate():
    s = create_shelf(None, MiB, mode="volatile")
    with pytest.raises(TxError):
        s.begin_tx()


def test_nested_tx(tmp_path):
    s = create_shelf(tmp_path / "s", MiB, consistency="wal")
    s.begin_tx()
    with pytest.raises(TxError):
        s.begin_tx()
    s.commit_tx()
    with pytest.raises(TxError):
        s.commit_tx()


def test_wal_views_read_only(tmp_path):
    s = create_shelf(tmp_path / "s", MiB, consistency="wal")
    s.put_array("a", np.zeros(3))
    with pytest.raises(ValueError):
        s.get_array("a")[0] = 1.0
    s.write_array("a", 5.0, index=1)
    assert s.get_array("a").tolist() == [0, 5, 0]


def test_commit_then_open(tmp_path):
    s = create_shelf(tmp_path / "s", MiB, consistency="wal")
    s.put_array("a", np.zeros(3))
    with s.transaction():
        s.write_array("a", [1.0, 2.0, 3.0])
        s.put_array("b", np.ones(2))
    assert not (tmp_path / "s.wal").exists()
    s.abandon()
    s = open_shelf(tmp_path / "s")
    assert s.get_array("a").tolist() == [1, 2, 3]
    assert s.get_array("b").tolist() == [1, 1]


def test_rollback_in_process(tmp_path):
    s = create_shelf(tmp_path / "s", MiB, consistency="wal")
    s.put_array("a", np.zeros(3))
    before = s.checksum()
    with pytest.raises(RuntimeError):
        with s.transaction():
            s.write_array("a", [1.0, 2.0, 3.0])
            s.put_array("b", np.ones(2))
            raise RuntimeError("abort")
    assert s.checksum() == before
    assert s.names() == ["a"]


def _wal_base(tmp_path):
    s = create_shelf(tmp_path / "base", 256 * 1024, consistency="wal", fsync=False)
    s.put_array("a", np.arange(64, dtype=np.float64))
    s.put_array("b", np.arange(10, dtype=np.int64))
    s.close()
    return tmp_path / "base"


def _crashing_tx(s, rng):
    with s.transaction():
        s.write_array("a", rng.random(64))
        s.put_array("c", rng.random((8, 3)))
        s.write_array("b", -1, index=slice(2, 7))
        s.erase_array("b")
        s.put_array("d", rng.integers(0, 255, 100).astype(np.uint8))


def _tx_bytes(base, tmp_path):
    """Total bytes (log + region) the transaction writes."""
    path = tmp_path / "measure"
    shutil.copy(base, path)
    s = open_shelf(path, fsync=False)
    s.crash_budget = 1 << 40
    _crashing_tx(s, np.random.default_rng(0))
    spent = (1 << 40) - s.crash_budget
    s.close()
    return spent


def crash_and_recover(base, tmp_path, budget, tag):
    path = tmp_path / f"run{tag}"
    shutil.copy(base, path)
    before = file_sha(path)
    s = open_shelf(path, fsync=False)
    s.crash_budget = budget
    with pytest.raises(SimulatedCrash):
        _crashing_tx(s, np.random.default_rng(0))
    s.abandon()
    recovered = open_shelf(path)
    recovered.close()
    assert not (tmp_path / f"run{tag}.wal").exists()
    return before, file_sha(path)


@settings(max_examples=40, deadline=None,
          suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(frac=st.floats(0.0, 1.0, exclude_max=True))
def test_wal_prefix_property(tmp_path_factory, frac):
    tmp = tmp_path_factory.mktemp("walprop")
    base = _wal_base(tmp)
    total = _tx_bytes(base, tmp)
    before, after = crash_and_recover(base, tmp, int(frac * total), 0)
    assert before == after


def test_wal_every_boundary(tmp_path):
    """Crash exactly at, just before and just after each record boundary."""
    base = _wal_base(tmp_path)
    total = _tx_bytes(base, tmp_path)
    budgets = sorted({0, 1, 7, 8, 16, 100, total // 2, total - 9, total - 8, total - 1})
    for k, b in enumerate(budgets):
        before, after = crash_and_recover(base, tmp_path, b, k)
        assert before == after, f"budget {b}"


def test_committed_log_is_replayed_as_done(tmp_path):
    # marker present: transaction counts as committed, region kept as is
    base = _wal_base(tmp_path)
    s = open_shelf(base)
    s.begin_tx()
    s.write_array("a", np.zeros(64))
    s._wal_append(COMMIT_MARKER)
    s.abandon()
    s = open_shelf(base)
    assert s.get_array("a").tolist() == [0.0] * 64


def test_corrupt_committed_log(tmp_path):
    base = _wal_base(tmp_path)
    s = open_shelf(base)
    s.begin_tx()
    s.write_array("a", np.zeros(64))
    s._wal_append(COMMIT_MARKER)
    s.abandon()
    log = bytearray((tmp_path / "base.wal").read_bytes())
    log[20] ^= 0xFF
    (tmp_path / "base.wal").write_bytes(bytes(log))
    with pytest.raises(CorruptionError):
        open_shelf(base)


def test_volatile_matches_persistent(tmp_path):
    rng = np.random.default_rng(3)
    data = [rng.random((5, 4)), rng.integers(0, 9, 11), rng.random(3).astype(np.float32)]
    p = create_shelf(tmp_path / "p", MiB)
    v = create_shelf(None, MiB, mode="volatile")
    for s in (p, v):
        for i, d in enumerate(data):
            s.put_array(f"x{i}", d)
        s.erase_array("x1")
        s.put_array("x1", data[1])
    v.save(tmp_path / "v")
    p.close()
    assert (tmp_path / "p").read_bytes() == (tmp_path / "v").read_bytes()


@settings(max_examples=30, deadline=None,
          suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(ops=st.lists(st.tuples(st.sampled_from(["put", "erase"]),
                              st.integers(0, 5), st.integers(0, 40)), max_size=25))
def test_catalog_roundtrip_property(tmp_path_factory, ops):
    path = tmp_path_factory.mktemp("cat") / "s"
    s = create_shelf(path, MiB)
    for op, k, n in ops:
        name = f"arr{k}"
        if op == "put" and name not in s:
            s.put_array(name, np.arange(n, dtype=np.float64) * k)
        elif op == "erase" and name in s:
            s.erase_array(name)
    cat = catalog(s)
    payload = {r.name: s.get_array(r.name).tobytes() for r in s.list_arrays()}
    region = s.to_bytes()
    s.close()
    s = open_shelf(path)
    assert catalog(s) == cat
    assert {r.name: s.get_array(r.name).tobytes() for r in s.list_arrays()} == payload
    assert s.to_bytes() == region
