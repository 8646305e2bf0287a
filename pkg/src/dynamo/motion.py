"""Linearized motion operators built from velocity fields.

M(s) warps frame t+1 back onto frame t: the row of target pixel r samples the
source at r + s^r, by nearest-pixel assignment (a permutation-like matrix) or
by bilinear interpolation weights.  Block forms couple consecutive frames of
the full sequence vector.
"""

import numpy as np
from scipy import sparse

from .flow import FlowField
from .operators import SparseOperator, vstack


def _target_grids(s: FlowField):
    ii, jj = np.meshgrid(np.arange(s.n_x), np.arange(s.n_y), indexing="ij")
    return ii + s.s_x, jj + s.s_y


def motion_matrix_rounding(s: FlowField) -> SparseOperator:
    """One unit entry per row at the nearest displaced pixel, clipped to bounds."""
    n_x, n_y = s.n_x, s.n_y
    tx, ty = _target_grids(s)
    ix = np.clip(np.rint(tx), 0, n_x - 1).astype(np.int64)
    iy = np.clip(np.rint(ty), 0, n_y - 1).astype(np.int64)
    cols = (iy * n_x + ix).ravel(order="F")
    rows = np.arange(n_x * n_y)
    vals = np.ones(rows.size)
    return sparse.csr_array(
        sparse.coo_array((vals, (rows, cols)), shape=(rows.size, rows.size))
    )


def motion_matrix_bilinear(s: FlowField) -> SparseOperator:
    """Up to four interpolation weights per row at the displaced location.

    Displacements are clamped to the grid so the 2x2 stencil always exists;
    exactly-integer displacements collapse to a single unit entry.
    """
    n_x, n_y = s.n_x, s.n_y
    if n_x < 2 or n_y < 2:
        raise ValueError("bilinear warping needs at least a 2x2 grid")
    tx, ty = _target_grids(s)
    tx = np.clip(tx, 0.0, n_x - 1.0)
    ty = np.clip(ty, 0.0, n_y - 1.0)
    x0 = np.minimum(np.floor(tx).astype(np.int64), n_x - 2)
    y0 = np.minimum(np.floor(ty).astype(np.int64), n_y - 2)
    fx = tx - x0
    fy = ty - y0

    rows = np.arange(n_x * n_y)
    row4, col4, val4 = [], [], []
    for dx, dy, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cols = ((y0 + dy) * n_x + (x0 + dx)).ravel(order="F")
        wf = w.ravel(order="F")
        keep = wf > 0.0
        row4.append(rows[keep])
        col4.append(cols[keep])
        val4.append(wf[keep])
    return sparse.csr_array(
        sparse.coo_array(
            (np.concatenate(val4), (np.concatenate(row4), np.concatenate(col4))),
            shape=(rows.size, rows.size),
        )
    )


_ENCODINGS = {"rounding": motion_matrix_rounding, "bilinear": motion_matrix_bilinear}


def motion_matrix(s: FlowField, encoding: str = "bilinear") -> SparseOperator:
    try:
        return _ENCODINGS[encoding](s)
    except KeyError:
        raise ValueError(f"unknown motion encoding {encoding!r}") from None


def assemble_mbar(s_list, encoding: str = "bilinear") -> SparseOperator:
    """Forward-in-time coupling: block row t is [..., I, -M(s(t)), ...]."""
    s_list = list(s_list)
    if not s_list:
        raise ValueError("need at least one velocity field")
    ns = s_list[0].n_x * s_list[0].n_y
    n_t = len(s_list) + 1
    eye = sparse.identity(ns, format="csr")
    rows = []
    for t, s in enumerate(s_list):
        blocks = [None] * n_t
        blocks[t] = eye
        blocks[t + 1] = -motion_matrix(s, encoding)
        rows.append(blocks)
    return sparse.csr_array(sparse.bmat(rows, format="csr"))


def assemble_mbar_prime(sp_list, encoding: str = "bilinear") -> SparseOperator:
    """Reverse coupling: block row t is [..., -M(s'(t+1)), I, ...]."""
    sp_list = list(sp_list)
    if not sp_list:
        raise ValueError("need at least one velocity field")
    ns = sp_list[0].n_x * sp_list[0].n_y
    n_t = len(sp_list) + 1
    eye = sparse.identity(ns, format="csr")
    rows = []
    for t, sp in enumerate(sp_list):
        blocks = [None] * n_t
        blocks[t] = -motion_matrix(sp, encoding)
        blocks[t + 1] = eye
        rows.append(blocks)
    return sparse.csr_array(sparse.bmat(rows, format="csr"))


def assemble_mhat(mbar, mbar_prime) -> SparseOperator:
    """Stack both directions into one motion-consistency operator."""
    if mbar.shape != mbar_prime.shape:
        raise ValueError(
            f"block shapes differ: {mbar.shape} vs {mbar_prime.shape}"
        )
    return vstack([mbar, mbar_prime])
