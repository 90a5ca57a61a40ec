"""Geometric wavelets and the forward/inverse geometric wavelet transforms.

For a cell with scaling basis ``Phi_c`` and center ``c_c`` under a parent
``(Phi_p, c_p)``, the wavelet basis ``Psi`` is an orthonormal basis of
``(I - Phi_p Phi_p^T) Phi_c`` and the translation is
``w = (I - Phi_p Phi_p^T)(c_c - c_p)``.  With these, consecutive
approximations along a root-to-leaf path satisfy
``x_j = x_{j-1} + Psi_j q_j + w_j`` exactly, which is what makes
``igwt(fgwt(x))`` reproduce the finest approximation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .covertree import Violation
from .dyadic import fix_signs, load_dyadic_tree
from .errors import CoefficientError, FormatError

__all__ = ["WaveletNode", "GmraModel", "WaveletCoefficients", "CoefficientTable",
           "wavelet_for", "build_wavelets", "assign_leaf", "fgwt", "igwt",
           "batch_transform", "validate_wavelets", "save_wavelets", "load_model",
           "save_coefficients", "load_coefficients", "write_coefficients_csv",
           "DROP_TOL"]

DROP_TOL = 1e-10


@dataclass(eq=False)
class WaveletNode:
    row: int
    basis: np.ndarray
    translation: np.ndarray

    @property
    def dim(self):
        return int(self.basis.shape[1])


@dataclass(eq=False)
class GmraModel:
    tree: object
    wavelets: list

    def __post_init__(self):
        cells = self.tree.cells
        self._child_centers = [
            np.array([cells[c].center for c in cell.children]) if cell.children else None
            for cell in cells]

    @property
    def ambient_dim(self):
        return self.tree.ambient_dim


@dataclass(eq=False)
class WaveletCoefficients:
    """FGWT output for one point.

    ``q`` runs fine to coarse: ``q[0]`` belongs to the leaf, ``q[-1]`` to the
    root's child.  ``q0`` is the root scaling coefficient.
    """
    leaf: int
    path: list
    p_leaf: np.ndarray
    q: list
    q0: np.ndarray

    def flat(self):
        return np.concatenate(self.q + [self.q0]) if self.q else self.q0.copy()


def _project_out(basis, M):
    if basis.shape[1] == 0:
        return M.copy()
    return M - basis @ (basis.T @ M)


def wavelet_for(parent_basis, parent_center, child_basis, child_center, tol=DROP_TOL):
    """Wavelet basis and translation between a cell and its parent."""
    D = child_center.shape[0]
    translation = _project_out(parent_basis, (child_center - parent_center)[:, None])[:, 0]
    M = _project_out(parent_basis, child_basis)
    if M.shape[1] == 0:
        return np.zeros((D, 0)), translation
    Q, R, _ = scipy.linalg.qr(M, mode="economic", pivoting=True, check_finite=False)
    thresh = tol * max(1.0, float(np.abs(M).max()))
    rank = int(np.count_nonzero(np.abs(np.diag(R)) > thresh))
    if rank == 0:
        return np.zeros((D, 0)), translation
    # Q = M R^-1 amplifies the residual parent component by 1/|r_ii|; strip it
    # and re-orthonormalise
    psi = _project_out(parent_basis, Q[:, :rank])
    psi, _ = np.linalg.qr(psi)
    return fix_signs(psi), translation


def build_wavelets(tree):
    """Attach a :class:`WaveletNode` to every non-root cell of ``tree``."""
    wavelets = [None] * len(tree)
    for row, cell in enumerate(tree.cells):
        if cell.parent is None:
            continue
        up = tree.cells[cell.parent]
        psi, w = wavelet_for(up.basis, up.center, cell.basis, cell.center)
        wavelets[row] = WaveletNode(row, psi, w)
    return GmraModel(tree, wavelets)


def assign_leaf(model, x):
    """Root-to-leaf path, stepping to the child with the nearest center.

    Ties go to the child with the lowest ordinal.
    """
    x = np.asarray(x, dtype=np.float64)
    cells = model.tree.cells
    path = [0]
    while cells[path[-1]].children:
        centers = model._child_centers[path[-1]]
        diff = centers - x
        pick = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        path.append(cells[path[-1]].children[pick])
    return path


def _scaling_projection(cell, v):
    coeff = cell.basis.T @ (v - cell.center)
    return cell.center + cell.basis @ coeff, coeff


def fgwt(model, x, path=None, return_finest=False):
    """Forward transform of ``x`` along ``path`` (default: :func:`assign_leaf`).

    With ``return_finest`` also returns the leaf approximation ``x_J`` that
    :func:`igwt` must reproduce.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.ambient_dim,):
        raise CoefficientError(f"expected a {model.ambient_dim}-vector, got shape {x.shape}")
    cells = model.tree.cells
    path = assign_leaf(model, x) if path is None else list(path)
    leaf = cells[path[-1]]
    finest, p_leaf = _scaling_projection(leaf, x)
    xj = finest
    q = []
    for t in range(len(path) - 1, 0, -1):
        cell = cells[path[t]]
        q.append(model.wavelets[path[t]].basis.T @ (xj - cell.center))
        xj, _ = _scaling_projection(cells[path[t - 1]], xj)
    root = cells[path[0]]
    q0 = root.basis.T @ (xj - root.center)
    coeffs = WaveletCoefficients(path[-1], path, p_leaf, q, q0)
    return (coeffs, finest) if return_finest else coeffs


def igwt(model, coeffs, scale=None):
    """Inverse transform.  With ``scale`` stop once the path drops below it,
    returning the coarser approximation at that scale."""
    cells = model.tree.cells
    path = coeffs.path
    if not path or path[0] != 0 or path[-1] != coeffs.leaf:
        raise CoefficientError("coefficient path must run from the root to its leaf")
    if len(coeffs.q) != len(path) - 1:
        raise CoefficientError(f"path has {len(path) - 1} wavelet steps, "
                               f"got {len(coeffs.q)} coefficient blocks")
    root = cells[0]
    if np.shape(coeffs.q0) != (root.dim,):
        raise CoefficientError(f"root coefficient must have length {root.dim}")
    if np.shape(coeffs.p_leaf) != (cells[coeffs.leaf].dim,):
        raise CoefficientError(f"leaf coefficient must have length {cells[coeffs.leaf].dim}")
    x = root.center + root.basis @ coeffs.q0
    steps = len(path) - 1
    for t in range(1, len(path)):
        row = path[t]
        if cells[row].parent != path[t - 1]:
            raise CoefficientError(f"cell {row} is not a child of cell {path[t - 1]}")
        if scale is not None and cells[row].scale < scale:
            break
        wav = model.wavelets[row]
        block = coeffs.q[steps - t]
        if np.shape(block) != (wav.dim,):
            raise CoefficientError(f"wavelet block for cell {row} must have length {wav.dim}")
        x = x + wav.basis @ block + wav.translation
    return x


@dataclass(eq=False)
class CoefficientTable:
    leaf_ids: np.ndarray
    p_leaf: np.ndarray
    q_flat: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return int(self.leaf_ids.shape[0])

    def row(self, model, i):
        """Rebuild the :class:`WaveletCoefficients` of row ``i``."""
        cells = model.tree.cells
        leaf = int(self.leaf_ids[i])
        path = model.tree.path_to(leaf)
        if getattr(self, "_p_offsets", None) is None:
            dims = np.array([c.dim for c in cells], dtype=np.int64)
            self._p_offsets = np.concatenate([[0], np.cumsum(dims[self.leaf_ids])])
        p_start = int(self._p_offsets[i])
        p_leaf = self.p_leaf[p_start:p_start + cells[leaf].dim]
        flat = self.q_flat[self.offsets[i]:self.offsets[i + 1]]
        q, pos = [], 0
        for t in range(len(path) - 1, 0, -1):
            k = model.wavelets[path[t]].dim
            q.append(flat[pos:pos + k])
            pos += k
        if flat.shape[0] - pos != cells[0].dim:
            raise CoefficientError(f"row {i}: coefficient count does not match its path")
        return WaveletCoefficients(leaf, path, p_leaf, q, flat[pos:])


def batch_transform(model, X, roundtrip=True, training=False, use_membership=False):
    """Apply :func:`fgwt` (and :func:`igwt`) to every row of ``X``.

    ``training`` declares that row ``i`` is training point ``i``; the summary
    then reports how often the nearest-center descent misses the leaf that
    holds the point.  ``use_membership`` (training rows only) routes each row
    through that leaf instead.  Per-row ``rel_error`` is
    ``|igwt(fgwt(x)) - x_J| / (1 + |x_J|)``.
    """
    X = np.asarray(X)
    n = X.shape[0] if X.ndim == 2 else 0
    training = training or use_membership
    if training and n != model.tree.n_points:
        raise CoefficientError(f"training rows: expected {model.tree.n_points}, got {n}")
    leaf_of = model.tree.leaf_of_points() if training else None
    leaf_ids = np.empty(n, dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    p_parts, q_parts = [], []
    rel = np.zeros(n)
    approx = np.zeros(n)
    disagree = 0
    for i in range(n):
        x = np.asarray(X[i], dtype=np.float64)
        nearest = assign_leaf(model, x)
        path = nearest
        if use_membership:
            path = model.tree.path_to(int(leaf_of[i]))
        if training and nearest[-1] != leaf_of[i]:
            disagree += 1
        coeffs, finest = fgwt(model, x, path=path, return_finest=True)
        flat = coeffs.flat()
        leaf_ids[i] = coeffs.leaf
        p_parts.append(coeffs.p_leaf)
        q_parts.append(flat)
        offsets[i + 1] = offsets[i] + flat.shape[0]
        approx[i] = np.linalg.norm(finest - x)
        if roundtrip:
            back = igwt(model, coeffs)
            rel[i] = np.linalg.norm(back - finest) / (1.0 + np.linalg.norm(finest))
    table = CoefficientTable(
        leaf_ids,
        np.concatenate(p_parts) if p_parts else np.zeros(0),
        np.concatenate(q_parts) if q_parts else np.zeros(0),
        offsets)
    summary = {
        "n": n,
        "max_rel_error": float(rel.max()) if n and roundtrip else 0.0,
        "mean_rel_error": float(rel.mean()) if n and roundtrip else 0.0,
        "max_approx_error": float(approx.max()) if n else 0.0,
        "mean_approx_error": float(approx.mean()) if n else 0.0,
        "leaf_disagreement_rate": disagree / n if n and training else None,
    }
    return table, summary


def validate_wavelets(model, orth_tol=1e-10, span_tol=1e-8):
    """Orthonormality and span checks on every scaling and wavelet basis."""
    report = []
    cells = model.tree.cells
    for row, cell in enumerate(cells):
        B = cell.basis
        err = float(np.abs(B.T @ B - np.eye(B.shape[1])).max()) if B.size else 0.0
        if not err <= orth_tol:
            report.append(Violation("scaling-orthonormal", cell.id, None, f"{err:.3g}"))
        wav = model.wavelets[row]
        if cell.parent is None:
            if wav is not None:
                report.append(Violation("wavelet-root", cell.id, None, "root carries a wavelet"))
            continue
        if wav is None:
            report.append(Violation("wavelet-missing", cell.id, None, "no wavelet node"))
            continue
        up = cells[cell.parent]
        psi = wav.basis
        if psi.size:
            err = float(np.abs(psi.T @ psi - np.eye(psi.shape[1])).max())
            if not err <= orth_tol:
                report.append(Violation("wavelet-orthonormal", cell.id, None, f"{err:.3g}"))
            err = float(np.abs(up.basis.T @ psi).max()) if up.basis.size else 0.0
            if not err <= orth_tol:
                report.append(Violation("orthogonality", cell.id, up.id, f"{err:.3g}"))
        M = _project_out(up.basis, cell.basis)
        resid = _project_out(psi, M) if M.size else M
        err = float(np.abs(resid).max()) if resid.size else 0.0
        if not err <= span_tol:
            report.append(Violation("span", cell.id, up.id, f"{err:.3g}"))
        w = _project_out(up.basis, (cell.center - up.center)[:, None])[:, 0]
        err = float(np.abs(w - wav.translation).max())
        if not err <= span_tol * (1.0 + float(np.abs(w).max())):
            report.append(Violation("translation", cell.id, up.id, f"{err:.3g}"))
    return report


def save_wavelets(shelf, model):
    """Store ``wavelets/<j>/<k>/{psi,w}`` for every non-root cell."""
    for row, cell in enumerate(model.tree.cells):
        wav = model.wavelets[row]
        if wav is None:
            continue
        prefix = f"wavelets/{cell.scale}/{cell.ordinal}"
        shelf.put_array(f"{prefix}/psi", wav.basis)
        shelf.put_array(f"{prefix}/w", wav.translation)


def load_model(shelf):
    tree = load_dyadic_tree(shelf)
    wavelets = [None] * len(tree)
    for row, cell in enumerate(tree.cells):
        if cell.parent is None:
            continue
        prefix = f"wavelets/{cell.scale}/{cell.ordinal}"
        if f"{prefix}/psi" not in shelf:
            raise FormatError(f"shelf is missing {prefix}/psi")
        wavelets[row] = WaveletNode(row, np.array(shelf.get_array(f"{prefix}/psi")),
                                    np.array(shelf.get_array(f"{prefix}/w")))
    return GmraModel(tree, wavelets)


def save_coefficients(shelf, table):
    shelf.put_array("coeffs/leaf_ids", table.leaf_ids)
    shelf.put_array("coeffs/p_leaf", table.p_leaf)
    shelf.put_array("coeffs/q_flat", table.q_flat)
    shelf.put_array("coeffs/offsets", table.offsets)


def load_coefficients(shelf):
    return CoefficientTable(*(np.array(shelf.get_array(f"coeffs/{name}"))
                              for name in ("leaf_ids", "p_leaf", "q_flat", "offsets")))


def write_coefficients_csv(path, model, table):
    """One row per point: leaf id, leaf scaling coefficients, then wavelet
    coefficients fine to coarse ending with the root scaling block."""
    cells = model.tree.cells
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        p_pos = 0
        for i in range(len(table)):
            leaf = int(table.leaf_ids[i])
            k = cells[leaf].dim
            p = table.p_leaf[p_pos:p_pos + k]
            p_pos += k
            q = table.q_flat[table.offsets[i]:table.offsets[i + 1]]
            out.writerow([leaf] + [repr(float(v)) for v in np.concatenate([p, q])])
