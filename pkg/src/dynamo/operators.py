"""Sparse operator building blocks: finite differences, Kronecker gradients, stacking.

All operators are scipy CSR arrays. They are assembled once and treated as
immutable afterwards; only ``A @ x``, ``A.T @ y`` and stacking are needed
downstream, never factorizations.
"""

import numpy as np
from scipy import sparse

# Canonical sparse type used throughout the package.
SparseOperator = sparse.csr_array


def as_operator(a) -> SparseOperator:
    """Coerce a dense or sparse matrix to the canonical CSR form."""
    return sparse.csr_array(a)


def identity(n: int) -> SparseOperator:
    return sparse.identity(n, format="csr", dtype=np.float64)


def first_difference(n: int) -> SparseOperator:
    """Forward difference operator of shape (n-1, n) with rows [-1, +1].

    Unit entries: grid spacing is one pixel, so downstream velocities are in
    pixels per frame.
    """
    if n < 2:
        raise ValueError(f"first_difference needs n >= 2, got n={n}")
    rows = np.repeat(np.arange(n - 1), 2)
    cols = np.empty(2 * (n - 1), dtype=np.int64)
    cols[0::2] = np.arange(n - 1)
    cols[1::2] = np.arange(1, n)
    vals = np.tile(np.array([-1.0, 1.0]), n - 1)
    return sparse.csr_array((vals, (rows, cols)), shape=(n - 1, n))


def spatial_gradient(n_x: int, n_y: int) -> SparseOperator:
    """Two-dimensional gradient of a column-stacked n_x-by-n_y image.

    The image vector holds pixel (i, j) at position j*n_x + i (Fortran order),
    so the first block differences along i (vertical/x) and the second along
    j (horizontal/y).  Shape: (n_y*(n_x-1) + (n_y-1)*n_x, n_x*n_y).
    """
    if n_x < 2 or n_y < 2:
        raise ValueError(f"spatial_gradient needs n_x, n_y >= 2, got ({n_x}, {n_y})")
    d_x = sparse.kron(sparse.identity(n_y), first_difference(n_x), format="csr")
    d_y = sparse.kron(first_difference(n_y), sparse.identity(n_x), format="csr")
    return sparse.csr_array(sparse.vstack([d_x, d_y], format="csr"))


def block_diagonal(blocks) -> SparseOperator:
    """Block-diagonal stack of sparse operators."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("block_diagonal needs at least one block")
    return sparse.csr_array(sparse.block_diag(blocks, format="csr"))


def vstack(blocks) -> SparseOperator:
    """Vertical stack; all blocks must have the same column count."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("vstack needs at least one block")
    n_cols = blocks[0].shape[1]
    for k, blk in enumerate(blocks):
        if blk.shape[1] != n_cols:
            raise ValueError(
                f"vstack column mismatch: block 0 has {n_cols} columns, "
                f"block {k} has {blk.shape[1]}"
            )
    return sparse.csr_array(sparse.vstack(blocks, format="csr"))


def save_triplets(a, path) -> None:
    """Write an operator as ``row,col,value`` lines with 0-based indices."""
    coo = sparse.coo_array(a)
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r},{c},{float(v)!r}\n")


def load_triplets(path, shape) -> SparseOperator:
    rows, cols, vals = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r, c, v = line.split(",")
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    return sparse.csr_array((vals, (rows, cols)), shape=shape)
