"""Pipeline orchestration over the volatile and shelf backends.

Both backends write the same arrays in the same order into a shelf region;
the volatile backend keeps that region in an anonymous buffer and saves it
to disk once the timed stages are over, so the two produce byte-identical
region files.  The four timed stages are

* ``load_s``: parse the dataset and copy it into the region as ``data/X``;
* ``covertree_deserialize_s``: read the prebuilt cover tree;
* ``cells_s``: dyadic cells and their affine fits, stored on the region;
* ``wavelets_s``: wavelets from the region-resident cells, stored back.

Cover-tree construction is not part of any stage.
"""
from __future__ import annotations

import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covertree import (build_cover_tree, deserialize_cover_tree,
                        serialize_cover_tree, validate_cover_tree)
from .datasets import load_dataset
from .dyadic import (DyadicParams, build_dyadic_tree, load_dyadic_tree,
                     save_dyadic_tree, validate_partition)
from .errors import CoefficientError, GmraError, InvalidInput, NotFound
from .shelf import catalog_limit, create_shelf, open_shelf
from .wavelets import (batch_transform, build_wavelets, fgwt, igwt,
                       load_coefficients, load_model, save_coefficients,
                       save_wavelets, validate_wavelets)

__all__ = ["STAGES", "BACKENDS", "TimingSplits", "PipelineResult",
           "estimate_capacity", "ingest", "run_pipeline", "validate_artifacts",
           "write_jsonl", "SUITES"]

STAGES = ("load_s", "covertree_deserialize_s", "cells_s", "wavelets_s")
BACKENDS = ("volatile", "shelf")
SUITES = ("covertree", "partition", "wavelets", "roundtrip")

_MODE = {"volatile": "volatile", "shelf": "persistent"}


@dataclass
class TimingSplits:
    """Per-trial stage timings (seconds) for one backend and dataset."""
    backend: str
    dataset: str
    raw: dict = field(default_factory=lambda: {s: [] for s in STAGES})

    @property
    def trials(self):
        return len(self.raw[STAGES[0]])

    def add(self, stage_times):
        for s in STAGES:
            t = float(stage_times[s])
            if t < 0:
                raise InvalidInput(f"negative time for {s}")
            self.raw[s].append(t)

    def mean(self, stage):
        return statistics.fmean(self.raw[stage])

    def stddev(self, stage):
        vals = self.raw[stage]
        return statistics.stdev(vals) if len(vals) > 1 else 0.0

    def total_mean(self):
        return sum(self.mean(s) for s in STAGES)

    def records(self):
        """One JSON-ready record per trial, then the aggregate record."""
        meta = {"backend": self.backend, "dataset": self.dataset, "trials": self.trials}
        out = []
        for t in range(self.trials):
            rec = {s: self.raw[s][t] for s in STAGES}
            rec.update(meta, record="trial", trial=t)
            out.append(rec)
        agg = {s: self.mean(s) for s in STAGES}
        agg.update(meta, record="aggregate",
                   stddev={s: self.stddev(s) for s in STAGES})
        out.append(agg)
        return out


@dataclass
class PipelineResult:
    timings: TimingSplits
    shelf_path: Path
    tree_path: Path
    summary: dict | None = None


def write_jsonl(records, sink):
    if hasattr(sink, "write"):
        for rec in records:
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
        return
    with open(sink, "a") as fh:
        write_jsonl(records, fh)


def _align64(n):
    return (int(n) + 63) & ~63


def _fit_capacity(payload):
    """Smallest 64-aligned capacity whose data area holds ``payload`` bytes."""
    cap = _align64(payload) + 4096
    while cap - catalog_limit(cap) < payload:
        cap = _align64(catalog_limit(cap) + payload)
    return max(cap, 64 * 1024)


def estimate_capacity(n, D, itemsize):
    """Region size for a full pipeline run.

    The model size depends on the data, so this is a generous guess: the
    dataset, a fixed 64 MiB allowance and 8 f64 values per input entry.
    Files are sparse, so unused capacity costs no disk blocks.
    """
    payload = _align64(n * D * itemsize) + (64 << 20) + 8 * n * D * 8
    return _fit_capacity(payload)


def _stage(times, name, t0):
    t1 = time.perf_counter()
    times[name] = t1 - t0
    return t1


def _fresh(path):
    path = Path(path)
    for p in (path, Path(str(path) + ".wal")):
        if p.exists():
            p.unlink()
    return path


def ingest(spec, shelf_path, consistency="none", capacity=None, fsync=True):
    """Store ``spec`` alone as ``data/X`` on a tightly sized shelf."""
    X = load_dataset(spec)
    if capacity is None:
        capacity = _fit_capacity(_align64(X.nbytes))
    shelf = create_shelf(shelf_path, capacity, "persistent", consistency, fsync=fsync)
    try:
        shelf.put_array("data/X", X)
    finally:
        shelf.close()
    return Path(shelf_path), X.shape


def _one_trial(spec, tree_path, params, backend, shelf_path, consistency,
               capacity, fsync):
    times = {}
    t = time.perf_counter()
    X = load_dataset(spec)
    cap = capacity or estimate_capacity(X.shape[0], X.shape[1], X.dtype.itemsize)
    shelf = create_shelf(shelf_path if backend == "shelf" else None, cap,
                         _MODE[backend], consistency, fsync=fsync)
    shelf.put_array("data/X", X)
    Xs = shelf.get_array("data/X")
    t = _stage(times, "load_s", t)

    ctree = deserialize_cover_tree(tree_path, Xs)
    t = _stage(times, "covertree_deserialize_s", t)

    tree = build_dyadic_tree(ctree, Xs, params)
    save_dyadic_tree(shelf, tree)
    t = _stage(times, "cells_s", t)

    model = build_wavelets(load_dyadic_tree(shelf, X.shape[1], copy=False))
    save_wavelets(shelf, model)
    _stage(times, "wavelets_s", t)
    return times, shelf, model


def run_pipeline(spec, tree_path, params=DyadicParams(), backend="shelf",
                 shelf_path=None, trials=1, build_covertree=False,
                 consistency="none", capacity=None, transform=True,
                 membership=False, fsync=True):
    """Run the four timed stages ``trials`` times on ``backend``.

    Each trial starts from scratch; the region of the last trial is left at
    ``shelf_path`` (the volatile one is saved there after timing).  With
    ``transform`` the training rows are then encoded and their coefficients
    stored under ``coeffs/``.  ``membership`` routes each row through the
    leaf that holds it rather than the nearest-center descent.
    """
    if backend not in BACKENDS:
        raise InvalidInput(f"unknown backend {backend!r}")
    if trials < 1:
        raise InvalidInput("trials must be at least 1")
    if shelf_path is None:
        raise InvalidInput("a shelf path is required")
    tree_path = Path(tree_path)
    if build_covertree:
        X = load_dataset(spec)
        serialize_cover_tree(build_cover_tree(X), tree_path)
    elif not tree_path.exists():
        raise NotFound(f"cover tree file {tree_path} does not exist")

    timings = TimingSplits(backend, spec.name)
    summary = None
    for trial in range(trials):
        if backend == "shelf":
            _fresh(shelf_path)
        times, shelf, model = _one_trial(spec, tree_path, params, backend, shelf_path,
                                         consistency, capacity, fsync)
        timings.add(times)
        last = trial == trials - 1
        try:
            if last and transform:
                table, summary = batch_transform(model, shelf.get_array("data/X"),
                                                 training=True, use_membership=membership)
                save_coefficients(shelf, table)
            if last and backend == "volatile":
                shelf.save(_fresh(shelf_path))
        finally:
            shelf.close()
    return PipelineResult(timings, Path(shelf_path), tree_path, summary)


def _roundtrip_report(model, X, table, tol):
    """Stored coefficients against a fresh forward pass along the same paths."""
    bad = []
    for i in range(len(table)):
        stored = table.row(model, i)
        fresh, finest = fgwt(model, X[i], path=stored.path, return_finest=True)
        scale = 1.0 + float(np.linalg.norm(finest))
        drift = float(np.abs(fresh.flat() - stored.flat()).max(initial=0.0))
        drift = max(drift, float(np.abs(fresh.p_leaf - stored.p_leaf).max(initial=0.0)))
        back = igwt(model, stored)
        err = float(np.linalg.norm(back - finest)) / scale
        if drift > tol * scale or err > tol:
            bad.append((i, drift, err))
    return bad


def validate_artifacts(shelf_path, tree_path=None, suites=SUITES, roundtrip_tol=1e-9):
    """Run every invariant suite over stored artifacts.

    Returns ``{suite: [violation, ...]}``; missing files raise
    :class:`NotFound`.  The cover-tree suite needs ``tree_path``.
    """
    shelf_path = Path(shelf_path)
    if not shelf_path.exists():
        raise NotFound(f"shelf {shelf_path} does not exist")
    if tree_path is not None and not Path(tree_path).exists():
        raise NotFound(f"cover tree file {tree_path} does not exist")
    report = {}
    shelf = open_shelf(shelf_path)
    try:
        if "data/X" not in shelf:
            raise NotFound(f"shelf {shelf_path} holds no data/X")
        X = np.asarray(shelf.get_array("data/X"), dtype=np.float64)
        if "covertree" in suites and tree_path is not None:
            try:
                report["covertree"] = validate_cover_tree(deserialize_cover_tree(tree_path, X), X)
            except GmraError as exc:
                report["covertree"] = [("format", None, None, str(exc))]
        try:
            model = load_model(shelf)
        except GmraError as exc:
            return {**report, **{s: [("format", None, None, str(exc))]
                                 for s in ("partition", "wavelets", "roundtrip") if s in suites}}
        if "partition" in suites:
            report["partition"] = validate_partition(model.tree, X)
        if "wavelets" in suites:
            report["wavelets"] = validate_wavelets(model)
        if "roundtrip" in suites:
            if "coeffs/leaf_ids" in shelf:
                try:
                    report["roundtrip"] = _roundtrip_report(
                        model, X, load_coefficients(shelf), roundtrip_tol)
                except CoefficientError as exc:
                    report["roundtrip"] = [("shape", None, None, str(exc))]
            else:
                _, summary = batch_transform(model, X, training=True)
                err = summary["max_rel_error"]
                report["roundtrip"] = [] if err <= roundtrip_tol else [("error", None, None, f"{err:.3g}")]
    finally:
        shelf.close()
    return report


def default_shelf_path(name, suffix=".shelf"):
    """``$GMRA_SHELF_DIR/<name><suffix>``, or ``None`` when unset."""
    base = os.environ.get("GMRA_SHELF_DIR")
    return None if not base else Path(base) / f"{name}{suffix}"


def footprint_mib(path):
    return Path(path).stat().st_size / float(1 << 20)


def ratio(shelf_timing, volatile_timing):
    v = volatile_timing.total_mean()
    return math.inf if v == 0 else shelf_timing.total_mean() / v
