"""Dyadic cells extracted from a cover tree, with per-cell affine fits.

Cell ``(j, k)`` is anchored at the cover-tree node that is the ``k``-th
smallest point index among the nodes present at level ``j``; it holds every
point whose nearest ancestor (itself included) materialised at level ``>= j``
is that anchor.  Assigning points by subtree makes each level an exact
partition of the cloud and each cell's children an exact partition of the
cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .covertree import Violation
from .errors import FormatError, InvalidInput

__all__ = ["DimPolicy", "DyadicParams", "DyadicCell", "DyadicTree",
           "extract_cells", "cell_statistics", "build_dyadic_tree",
           "validate_partition", "save_dyadic_tree", "load_dyadic_tree",
           "fix_signs"]


@dataclass(frozen=True)
class DimPolicy:
    """How many singular directions a cell keeps.

    ``fixed`` keeps ``value`` directions; ``energy`` keeps the fewest that
    capture a fraction ``value`` of the squared spectrum.  Either way the
    count is clamped to ``min(n_cell - 1, D)``.
    """
    kind: str = "energy"
    value: float = 0.95

    def __post_init__(self):
        if self.kind == "fixed":
            if self.value < 0 or int(self.value) != self.value:
                raise InvalidInput(f"fixed dimension must be a nonnegative integer: {self.value}")
        elif self.kind == "energy":
            if not 0.0 <= self.value <= 1.0:
                raise InvalidInput(f"energy threshold must lie in [0, 1]: {self.value}")
        else:
            raise InvalidInput(f"unknown dimension policy {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """Parse ``fixed:<d>`` or ``energy:<tau>``."""
        kind, _, value = text.partition(":")
        try:
            return cls(kind, int(value) if kind == "fixed" else float(value))
        except ValueError:
            raise InvalidInput(f"bad dimension policy {text!r}") from None

    def __str__(self):
        return f"{self.kind}:{self.value:g}" if self.kind == "energy" else f"fixed:{int(self.value)}"

    def choose(self, singular_values, n_cell, ambient_dim):
        cap = max(0, min(n_cell - 1, ambient_dim))
        if self.kind == "fixed":
            return min(int(self.value), cap)
        energy = np.asarray(singular_values, dtype=np.float64) ** 2
        total = energy.sum()
        if total == 0.0:
            return 0
        d = int(np.searchsorted(np.cumsum(energy), self.value * total)) + 1
        return min(d, cap)


@dataclass(frozen=True)
class DyadicParams:
    dim_policy: DimPolicy = DimPolicy()
    min_cell_size: int = 10
    j_min: int | None = None


@dataclass(eq=False)
class DyadicCell:
    scale: int
    ordinal: int
    anchor: int
    indices: np.ndarray
    parent: int | None = None
    children: list = field(default_factory=list)
    center: np.ndarray | None = None
    basis: np.ndarray | None = None
    singular_values: np.ndarray | None = None
    radius: float | None = None

    @property
    def id(self):
        return (self.scale, self.ordinal)

    @property
    def size(self):
        return int(self.indices.shape[0])

    @property
    def dim(self):
        return 0 if self.basis is None else int(self.basis.shape[1])

    @property
    def is_leaf(self):
        return not self.children


@dataclass(eq=False)
class DyadicTree:
    """Cells in breadth-first order; ``cells[0]`` is the root."""
    cells: list
    n_points: int
    ambient_dim: int

    def __post_init__(self):
        self.by_id = {c.id: i for i, c in enumerate(self.cells)}

    @property
    def root(self):
        return self.cells[0]

    def __len__(self):
        return len(self.cells)

    def cell(self, cell_id):
        return self.cells[self.by_id[cell_id]]

    def scales(self):
        return sorted({c.scale for c in self.cells}, reverse=True)

    def level(self, j):
        return [c for c in self.cells if c.scale == j]

    def leaves(self):
        return [i for i, c in enumerate(self.cells) if c.is_leaf]

    def path_to(self, row):
        """Arena rows from the root down to ``row``."""
        path = [row]
        while self.cells[path[-1]].parent is not None:
            path.append(self.cells[path[-1]].parent)
        return path[::-1]

    def leaf_of_points(self):
        """``leaf[i]`` = arena row of the leaf holding training point ``i``."""
        leaf = np.full(self.n_points, -1, dtype=np.int64)
        for row in self.leaves():
            leaf[self.cells[row].indices] = row
        return leaf


def _anchors_by_level(cover_tree, lowest):
    parent = np.asarray(cover_tree.parent, dtype=np.int64)
    scale = np.asarray(cover_tree.scale, dtype=np.int64)
    anchors = {}
    a = np.arange(cover_tree.n, dtype=np.int64)
    for j in range(cover_tree.bottom_scale, cover_tree.top_scale + 1):
        if j < lowest:
            continue
        # ancestors only move up as j grows, so keep climbing from the last level
        while True:
            climb = scale[a] < j
            if not climb.any():
                break
            a[climb] = parent[a[climb]]
        anchors[j] = a.copy()
    return anchors


def extract_cells(cover_tree, X, params=DyadicParams()):
    """Cell structure (point sets and tree links) without statistics."""
    n = cover_tree.n
    if np.asarray(X).shape[0] != n:
        raise InvalidInput(f"cover tree has {n} points, cloud has {np.asarray(X).shape[0]}")
    top, bottom = cover_tree.top_scale, cover_tree.bottom_scale
    lowest = bottom if params.j_min is None else max(bottom, params.j_min)
    anchors = _anchors_by_level(cover_tree, lowest)

    root = DyadicCell(top, 0, int(anchors[top][0]) if n else 0,
                      np.arange(n, dtype=np.int64))
    cells = [root]
    frontier = [0]
    j = top
    while frontier and j > lowest:
        below = anchors[j - 1]
        fresh = []
        for row in frontier:
            cell = cells[row]
            if cell.size <= max(params.min_cell_size, 1):
                continue
            groups = below[cell.indices]
            order = np.argsort(groups, kind="stable")
            keys, starts = np.unique(groups[order], return_index=True)
            for key, part in zip(keys.tolist(), np.split(cell.indices[order], starts[1:])):
                fresh.append((key, row, np.sort(part)))
        fresh.sort(key=lambda item: item[0])
        frontier = []
        for k, (key, parent_row, part) in enumerate(fresh):
            cells.append(DyadicCell(j - 1, k, key, part, parent=parent_row))
            cells[parent_row].children.append(len(cells) - 1)
            frontier.append(len(cells) - 1)
        j -= 1
    for cell in cells:
        cell.children.sort(key=lambda r: cells[r].anchor)
    return DyadicTree(cells, n, int(np.asarray(X).shape[1]))


def fix_signs(basis):
    """Flip columns so each one's largest-magnitude entry is positive."""
    if basis.size == 0:
        return basis
    pivot = np.argmax(np.abs(basis), axis=0)
    signs = np.where(basis[pivot, np.arange(basis.shape[1])] < 0, -1.0, 1.0)
    return basis * signs


def cell_statistics(points, dim_policy=DimPolicy()):
    """Center, scaling basis, singular values and radius of one cell.

    ``points`` holds the cell's rows.  The basis is the leading right singular
    vectors of the centered rows, as columns.  Tall cells are first reduced
    by a QR factorisation, which leaves singular values and right singular
    vectors unchanged.
    """
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise InvalidInput("a cell needs at least one point")
    n_cell, D = P.shape
    center = P.mean(axis=0)
    centered = P - center
    radius = float(np.sqrt(np.einsum("ij,ij->i", centered, centered).max()))
    if n_cell > 2 * D:
        reduced = scipy.linalg.qr(centered, mode="r", check_finite=False)[0][:D]
    else:
        reduced = centered
    _, sv, vt = np.linalg.svd(reduced, full_matrices=False)
    d = dim_policy.choose(sv, n_cell, D)
    basis = fix_signs(vt[:d].T.copy())
    return center, basis, sv, radius


def build_dyadic_tree(cover_tree, X, params=DyadicParams()):
    """:func:`extract_cells` followed by :func:`cell_statistics` on every cell."""
    tree = extract_cells(cover_tree, X, params)
    X = np.asarray(X)
    for cell in tree.cells:
        if cell.parent is not None:
            up = tree.cells[cell.parent]
            if up.size == cell.size:
                # same point set as the parent: same fit
                cell.center, cell.basis = up.center, up.basis
                cell.singular_values, cell.radius = up.singular_values, up.radius
                continue
        cell.center, cell.basis, cell.singular_values, cell.radius = \
            cell_statistics(X[cell.indices], params.dim_policy)
    return tree


def validate_partition(tree, X=None, rtol=1e-12):
    """Check cell containment, disjoint/covering children and level covers.

    With ``X`` and computed statistics, also checks that each cell lies in
    the ball of its ``radius`` around its ``center``.
    """
    report = []
    n = tree.n_points
    cells = tree.cells
    root = cells[0]
    if root.size != n or not np.array_equal(np.sort(root.indices), np.arange(n)):
        report.append(Violation("cover", root.id, None, "root does not hold every point"))

    for row, cell in enumerate(cells):
        if cell.size == 0:
            report.append(Violation("empty", cell.id, None, "cell has no points"))
        if np.unique(cell.indices).size != cell.size:
            report.append(Violation("disjoint", cell.id, None, "repeated point index"))
        if not cell.children:
            continue
        merged = np.concatenate([cells[c].indices for c in cell.children])
        uniq, counts = np.unique(merged, return_counts=True)
        for i in uniq[counts > 1].tolist():
            owners = [cells[c].id for c in cell.children if i in cells[c].indices]
            report.append(Violation("disjoint", cell.id, i, f"point {i} in children {owners}"))
        extra = np.setdiff1d(uniq, cell.indices)
        if extra.size:
            report.append(Violation("containment", cell.id, extra.tolist(),
                                    "children hold points outside the parent"))
        missing = np.setdiff1d(cell.indices, uniq)
        if missing.size:
            report.append(Violation("cover", cell.id, missing.tolist(),
                                    "children miss points of the parent"))
        for c in cell.children:
            if cells[c].parent != row:
                report.append(Violation("link", cell.id, cells[c].id, "child's parent link"))

    # a leaf keeps covering its points at every finer level
    scales = tree.scales()
    for j in scales:
        frontier = [c for c in cells if c.scale == j or (c.is_leaf and c.scale > j)]
        merged = np.concatenate([c.indices for c in frontier])
        if merged.size != n or not np.array_equal(np.sort(merged), np.arange(n)):
            uniq, counts = np.unique(merged, return_counts=True)
            report.append(Violation("level", j, None,
                                    f"{int((counts > 1).sum())} repeated, "
                                    f"{n - uniq.size} missing points"))

    if X is not None:
        X = np.asarray(X, dtype=np.float64)
        for cell in cells:
            if cell.center is None:
                continue
            diff = X[cell.indices] - cell.center
            far = float(np.sqrt(np.einsum("ij,ij->i", diff, diff).max()))
            if far > cell.radius * (1 + rtol) + 1e-300:
                report.append(Violation("sphere", cell.id, None,
                                        f"point at {far:.6g} outside radius {cell.radius:.6g}"))
    return report


def _cell_prefix(cell):
    return f"cells/{cell.scale}/{cell.ordinal}"


def save_dyadic_tree(shelf, tree):
    """Store cells as ``cells/<j>/<k>/{indices,center,basis,sv}`` plus
    ``tree/meta`` (one row ``j, k, anchor, parent_row, n_points, dim`` per cell)
    and ``tree/radius``."""
    meta = np.empty((len(tree), 6), dtype=np.int64)
    for row, cell in enumerate(tree.cells):
        prefix = _cell_prefix(cell)
        shelf.put_array(f"{prefix}/indices", cell.indices.astype(np.int64))
        shelf.put_array(f"{prefix}/center", cell.center)
        shelf.put_array(f"{prefix}/basis", cell.basis)
        shelf.put_array(f"{prefix}/sv", cell.singular_values)
        meta[row] = (cell.scale, cell.ordinal, cell.anchor,
                     -1 if cell.parent is None else cell.parent, cell.size, cell.dim)
    shelf.put_array("tree/meta", meta)
    shelf.put_array("tree/radius", np.array([c.radius for c in tree.cells]))


def load_dyadic_tree(shelf, ambient_dim=None, copy=True):
    """Rebuild a tree stored by :func:`save_dyadic_tree`.

    With ``copy=False`` cell arrays stay views into the shelf region.
    """
    if "tree/meta" not in shelf:
        raise FormatError("shelf holds no dyadic tree (tree/meta missing)")
    get = (lambda name: np.array(shelf.get_array(name))) if copy else shelf.get_array
    meta = np.array(shelf.get_array("tree/meta"))
    radius = np.array(shelf.get_array("tree/radius"))
    if meta.ndim != 2 or meta.shape[1] != 6 or radius.shape != (meta.shape[0],):
        raise FormatError("tree/meta has the wrong shape")
    cells = []
    for row, (j, k, anchor, parent_row, size, dim) in enumerate(meta.tolist()):
        prefix = f"cells/{j}/{k}"
        cell = DyadicCell(j, k, anchor, get(f"{prefix}/indices"),
                          parent=None if parent_row < 0 else parent_row,
                          center=get(f"{prefix}/center"),
                          basis=get(f"{prefix}/basis"),
                          singular_values=get(f"{prefix}/sv"),
                          radius=float(radius[row]))
        if cell.size != size or cell.dim != dim:
            raise FormatError(f"cell {prefix} disagrees with tree/meta")
        cells.append(cell)
    for row, cell in enumerate(cells):
        if cell.parent is not None:
            cells[cell.parent].children.append(row)
    for cell in cells:
        cell.children.sort(key=lambda r: cells[r].anchor)
    D = ambient_dim if ambient_dim is not None else int(cells[0].center.shape[0])
    return DyadicTree(cells, cells[0].size, D)
