"""Cover tree over a Euclidean point cloud.

Every point is exactly one explicit node, so node ids coincide with point
indices: ``parent[i]`` and ``scale[i]`` describe point ``i``.  A node is
implicitly present at every level from its ``scale`` down to the bottom of
the tree.  The invariants maintained (and checked by
:func:`validate_cover_tree`) are

* covering: ``|x_c - x_p| <= 2**scale[p]`` for every child ``c`` of ``p``;
* separation: nodes present at level ``s`` are pairwise more than ``2**s``
  apart;
* nesting: a child is materialised strictly below its parent.

All comparisons are made on squared distances against ``4**s``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import DuplicatePoint, FormatError, InvalidInput

__all__ = ["CoverTree", "CoverTreeNode", "Violation", "as_point_cloud",
           "root_scale", "build_cover_tree", "validate_cover_tree",
           "serialize_cover_tree", "deserialize_cover_tree", "tree_to_bytes"]

MAGIC = b"GMRACTR1"
_HEAD = struct.Struct("<8sQiiQ")
_NODE = struct.Struct("<QiqI")


class Violation(NamedTuple):
    kind: str
    a: object
    b: object
    detail: str


class CoverTreeNode(NamedTuple):
    point_index: int
    scale: int
    children: tuple
    parent: int | None


def as_point_cloud(X):
    """Validate ``X`` as an ``n x D`` finite matrix and return it as f64."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise InvalidInput(f"point cloud must be a nonempty n x D matrix, got {X.shape}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        bad = np.argwhere(~np.isfinite(X))[0]
        raise InvalidInput(f"non-finite coordinate at row {bad[0]}, column {bad[1]}")
    return X


def _pow4(s):
    return math.ldexp(1.0, 2 * int(s))


def root_scale(X, root_index=0):
    """Smallest integer ``s`` with ``max_i |x_root - x_i| <= 2**s``.

    A cloud whose points all coincide with the root gets ``s = 0``.
    """
    X = as_point_cloud(X)
    diff = X - X[root_index]
    far = float(np.einsum("ij,ij->i", diff, diff).max())
    if far == 0.0:
        return 0
    s = math.ceil(0.5 * math.log2(far))
    while _pow4(s - 1) >= far:
        s -= 1
    while _pow4(s) < far:
        s += 1
    return s


@dataclass(eq=False)
class CoverTree:
    parent: np.ndarray
    scale: np.ndarray
    top_scale: int
    bottom_scale: int
    _children: list | None = field(default=None, repr=False)

    root = 0

    @property
    def n(self):
        return int(self.parent.shape[0])

    def children(self, node):
        if self._children is None:
            kids = [[] for _ in range(self.n)]
            for c in np.flatnonzero(self.parent >= 0):
                kids[self.parent[c]].append(int(c))
            self._children = [tuple(k) for k in kids]
        return self._children[node]

    def node(self, i):
        p = int(self.parent[i])
        return CoverTreeNode(int(i), int(self.scale[i]), self.children(i),
                             None if p < 0 else p)

    @property
    def nodes(self):
        return [self.node(i) for i in range(self.n)]

    def __eq__(self, other):
        if not isinstance(other, CoverTree):
            return NotImplemented
        return (self.top_scale == other.top_scale
                and self.bottom_scale == other.bottom_scale
                and np.array_equal(self.parent, other.parent)
                and np.array_equal(self.scale, other.scale))

    def subtree(self, node):
        """Point indices of ``node`` and all its descendants."""
        out, stack = [], [node]
        while stack:
            q = stack.pop()
            out.append(q)
            stack.extend(self.children(q))
        return sorted(out)


def _find_duplicate(X):
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    if first.size == X.shape[0]:
        return None
    seen = {}
    for i, g in enumerate(inverse.tolist()):
        if g in seen:
            return seen[g], i
        seen[g] = i
    return None


def build_cover_tree(X, *, implementation=None):
    """Insert every point in ascending index order; the root is point 0.

    ``implementation`` picks a kernel module from
    :data:`pmgmra.kernels.IMPLEMENTATIONS` (default: the fastest available).
    """
    X = as_point_cloud(X)
    dup = _find_duplicate(X)
    if dup is not None:
        raise DuplicatePoint(*dup)
    top = root_scale(X, 0)
    impl = kernels if implementation is None else kernels.IMPLEMENTATIONS[implementation]
    parent, scale = impl.cover_tree_insert(X, top)
    return CoverTree(parent, scale, top, int(scale.min()))


def validate_cover_tree(tree, X):
    """Exhaustively check the cover-tree invariants.

    Returns a list of :class:`Violation`; empty means the tree is valid.
    The separation check visits all ``n(n-1)/2`` pairs.
    """
    X = as_point_cloud(X)
    report = []
    n = tree.n
    if X.shape[0] != n:
        return [Violation("partition", None, None,
                          f"tree has {n} nodes, cloud has {X.shape[0]} points")]
    parent = np.asarray(tree.parent, dtype=np.int64)
    scale = np.asarray(tree.scale, dtype=np.int64)

    roots = np.flatnonzero(parent < 0)
    if roots.size != 1:
        report.append(Violation("partition", None, None,
                                f"expected one root, found {roots.size}"))
    out_of_range = np.flatnonzero(parent >= n)
    for c in out_of_range:
        report.append(Violation("partition", int(c), int(parent[c]), "parent id out of range"))
    if report:
        return report
    root = int(roots[0])

    # every node must reach the root without revisiting a node
    depth_ok = np.zeros(n, dtype=bool)
    depth_ok[root] = True
    for start in range(n):
        path, q = [], start
        while not depth_ok[q]:
            if q in path:
                report.append(Violation("partition", start, q, "cycle in parent links"))
                break
            path.append(q)
            q = int(parent[q])
        else:
            depth_ok[path] = True

    if scale[root] != tree.top_scale:
        report.append(Violation("nesting", root, None,
                                f"root scale {scale[root]} != top_scale {tree.top_scale}"))
    if tree.top_scale < tree.bottom_scale:
        report.append(Violation("nesting", None, None, "top_scale < bottom_scale"))
    for i in np.flatnonzero((scale < tree.bottom_scale) | (scale > tree.top_scale)):
        report.append(Violation("nesting", int(i), None,
                                f"scale {scale[i]} outside [{tree.bottom_scale}, {tree.top_scale}]"))

    kids = np.flatnonzero(parent >= 0)
    par = parent[kids]
    for c in kids[scale[kids] >= scale[par]]:
        report.append(Violation("nesting", int(parent[c]), int(c),
                                f"child scale {scale[c]} not below parent scale {scale[parent[c]]}"))
    diff = X[kids] - X[par]
    d2 = np.einsum("ij,ij->i", diff, diff)
    limit = np.ldexp(1.0, (2 * scale[par]).astype(np.int32))
    for k in np.flatnonzero(d2 > limit):
        c = int(kids[k])
        report.append(Violation("covering", int(par[k]), c,
                                f"distance {math.sqrt(d2[k]):.6g} > 2^{scale[par[k]]}"))

    us, vs = kernels.separation_violations(X, scale.astype(np.int32))
    for u, v in zip(us.tolist(), vs.tolist()):
        lvl = min(scale[u], scale[v])
        report.append(Violation("separation", u, v,
                                f"distance {np.linalg.norm(X[u] - X[v]):.6g} <= 2^{lvl}"))
    return report


def tree_to_bytes(tree):
    buf = io.BytesIO()
    serialize_cover_tree(tree, buf)
    return buf.getvalue()


def serialize_cover_tree(tree, sink):
    """Write ``tree`` to a binary file object or path (little-endian)."""
    if not hasattr(sink, "write"):
        with open(sink, "wb") as fh:
            return serialize_cover_tree(tree, fh)
    n = tree.n
    sink.write(_HEAD.pack(MAGIC, n, tree.top_scale, tree.bottom_scale, n))
    for i in range(n):
        kids = tree.children(i)
        sink.write(_NODE.pack(i, int(tree.scale[i]), int(tree.parent[i]), len(kids)))
        if kids:
            sink.write(struct.pack(f"<{len(kids)}Q", *kids))


def deserialize_cover_tree(source, X=None):
    """Read a tree written by :func:`serialize_cover_tree`.

    ``source`` is bytes, a path or a binary file object.  When ``X`` is given
    the node count must match its number of points.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if len(data) < _HEAD.size:
        raise FormatError("cover tree stream is truncated")
    magic, n, top, bottom, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad cover tree magic {magic!r}")
    if count != n:
        raise FormatError(f"node count {count} != point count {n}")
    if X is not None and np.asarray(X).shape[0] != n:
        raise FormatError(f"tree has {n} points, cloud has {np.asarray(X).shape[0]}")
    # every node needs at least its fixed-size record
    if count > (len(data) - _HEAD.size) // _NODE.size:
        raise FormatError("cover tree stream is truncated")

    point_of = np.empty(count, dtype=np.int64)
    node_scale = np.empty(count, dtype=np.int32)
    node_parent = np.empty(count, dtype=np.int64)
    node_children = []
    pos = _HEAD.size
    try:
        for k in range(count):
            pi, s, par, nkids = _NODE.unpack_from(data, pos)
            pos += _NODE.size
            kids = struct.unpack_from(f"<{nkids}Q", data, pos)
            pos += 8 * nkids
            point_of[k], node_scale[k], node_parent[k] = pi, s, par
            node_children.append(kids)
    except struct.error:
        raise FormatError("cover tree stream is truncated") from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last node")
    if count and (point_of.min() < 0 or point_of.max() >= n
                  or np.unique(point_of).size != n):
        raise FormatError("node point indices are not a permutation of the cloud")
    if ((node_parent < -1) | (node_parent >= count)).any():
        raise FormatError("parent id out of range")
    for k, kids in enumerate(node_children):
        for c in kids:
            if c >= count or node_parent[c] != k:
                raise FormatError(f"child list of node {k} disagrees with parent links")
    if sum(len(k) for k in node_children) != int((node_parent >= 0).sum()):
        raise FormatError("child lists do not cover every non-root node")

    parent = np.full(n, -1, dtype=np.int64)
    scale = np.empty(n, dtype=np.int32)
    has_parent = node_parent >= 0
    parent[point_of[has_parent]] = point_of[node_parent[has_parent]]
    scale[point_of] = node_scale
    return CoverTree(parent, scale, int(top), int(bottom))
