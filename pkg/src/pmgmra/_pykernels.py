"""Pure-Python/numpy kernels.  Same contracts as the compiled ``_ckernels``."""
import math

import numpy as np

from .errors import DuplicatePoint


def _sqdist_rows(X, rows, x):
    diff = X[rows] - x
    return np.einsum("ij,ij->i", diff, diff)


def cover_tree_insert(X, top_scale):
    """Insert points ``1..n-1`` under root ``0`` in index order.

    Returns ``(parent, scale)``: ``parent[i]`` is the node point ``i`` hangs
    from (-1 for the root) and ``scale[i]`` the level it is materialised at.
    Distances are compared squared against ``4**level``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    parent = np.full(n, -1, dtype=np.int64)
    scale = np.empty(n, dtype=np.int32)
    scale[0] = top_scale
    children = [dict() for _ in range(n)]

    for p in range(1, n):
        x = X[p]
        ids = np.zeros(1, dtype=np.int64)
        d2 = _sqdist_rows(X, ids, x)
        if d2[0] == 0.0:
            raise DuplicatePoint(0, p)
        level = top_scale
        best_q, best_level = -1, top_scale
        while True:
            bound = math.ldexp(1.0, 2 * level)
            close = d2 <= bound
            if close.any():
                cand = np.flatnonzero(close)
                dmin = d2[cand].min()
                best_q = int(ids[cand][d2[cand] == dmin].min())
                best_level = level
            new = [c for q in ids.tolist() for c in children[q].get(level - 1, ())]
            if new:
                new = np.asarray(new, dtype=np.int64)
                dn = _sqdist_rows(X, new, x)
                if (dn == 0.0).any():
                    raise DuplicatePoint(int(new[np.argmax(dn == 0.0)]), p)
                keep_new = dn <= bound
                ids = np.concatenate([ids[close], new[keep_new]])
                d2 = np.concatenate([d2[close], dn[keep_new]])
            else:
                ids, d2 = ids[close], d2[close]
            if ids.size == 0:
                break
            level -= 1
        parent[p] = best_q
        scale[p] = best_level - 1
        children[best_q].setdefault(best_level - 1, []).append(p)
    return parent, scale


def separation_violations(X, scale):
    """All pairs ``u < v`` with ``|x_u - x_v|^2 <= 4**min(scale_u, scale_v)``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    scale = np.asarray(scale)
    n = X.shape[0]
    us, vs = [], []
    for u in range(n - 1):
        diff = X[u + 1:] - X[u]
        d2 = np.einsum("ij,ij->i", diff, diff)
        lvl = np.minimum(scale[u + 1:], scale[u]).astype(np.float64)
        bad = np.flatnonzero(d2 <= np.ldexp(1.0, (2 * lvl).astype(np.int32)))
        if bad.size:
            us.extend([u] * bad.size)
            vs.extend((bad + u + 1).tolist())
    return np.asarray(us, dtype=np.int64), np.asarray(vs, dtype=np.int64)
