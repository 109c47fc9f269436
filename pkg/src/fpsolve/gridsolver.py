"""Finite-difference Fokker-Planck operator and the data-driven grid solvers.

The operator has one row per interior node and one column per node, so the
boundary is left free; Monte Carlo data pins the solution instead.
"""
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import DensityField

DIRECT_LIMIT = 250_000
EIG_LIMIT = 4000


class SolverError(RuntimeError):
    pass


@dataclass
class OperatorMatrix:
    matrix: sp.csr_matrix
    grid: object
    interior: np.ndarray
    boundary: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, u):
        return self.matrix @ np.asarray(u, dtype=float)


@dataclass
class SolveReport:
    solution: DensityField
    residual_norm: float
    data_misfit: float
    discrete_l2_error: Optional[float] = None


def assemble_operator(model, grid):
    """Central-difference discretisation of the stationary operator.

    Row for interior node ``i``: ``-sum_j [(f_j u)(i+e_j) - (f_j u)(i-e_j)] / (2 h_j)``
    plus ``1/2 D_jj (u(i+e_j) - 2u(i) + u(i-e_j)) / h_j^2`` plus the four-point
    cross stencil for off-diagonal ``D``.
    """
    if callable(getattr(model, "sigma", None)):
        raise SolverError("operator assembly needs constant diffusion")
    n = grid.dim
    npts = grid.points_per_axis
    h = grid.spacing
    diff = model.diffusion
    nodes = grid.nodes()
    f = model.drift_at(nodes)

    interior = np.flatnonzero(grid.interior_mask())
    boundary = np.flatnonzero(~grid.interior_mask())
    row_ids = np.arange(interior.size)
    strides = np.array([npts ** (n - 1 - j) for j in range(n)])

    rows, cols, vals = [], [], []

    def add(offset, coef):
        rows.append(row_ids)
        cols.append(interior + offset)
        vals.append(np.broadcast_to(coef, row_ids.shape))

    centre = np.zeros(interior.size)
    for j in range(n):
        s = strides[j]
        add(s, -f[interior + s, j] / (2 * h[j]) + 0.5 * diff[j, j] / h[j] ** 2)
        add(-s, f[interior - s, j] / (2 * h[j]) + 0.5 * diff[j, j] / h[j] ** 2)
        centre -= diff[j, j] / h[j] ** 2
    for j, k in combinations(range(n), 2):
        d = diff[j, k]
        if d == 0.0:
            continue
        # 1/2 (D_jk + D_kj) u_jk with u_jk ~ (u++ - u+- - u-+ + u--) / (4 h_j h_k)
        c = d / (4 * h[j] * h[k])
        sj, sk = strides[j], strides[k]
        add(sj + sk, c)
        add(-sj - sk, c)
        add(sj - sk, -c)
        add(-sj + sk, -c)
    add(0, centre)

    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(interior.size, grid.size),
    )
    mat.sum_duplicates()
    return OperatorMatrix(mat, grid, interior, boundary)


def _values(v):
    return v.values if isinstance(v, DensityField) else np.asarray(v, dtype=float).ravel()


def discrete_l2_error(u, oracle):
    """``sqrt(h_1...h_n) * ||u - oracle||_2`` on a common grid."""
    if not u.grid.same_as(oracle.grid):
        raise ValueError("fields live on different grids")
    return float(np.sqrt(u.grid.box_volume) * np.linalg.norm(u.values - oracle.values))


def _report(op, u, v, oracle):
    field = DensityField(op.grid, u)
    err = discrete_l2_error(field, oracle) if oracle is not None else None
    return SolveReport(
        field,
        float(np.linalg.norm(op.matrix @ u)),
        float(np.linalg.norm(u - v)),
        err,
    )


def solve_baseline(op, boundary):
    """Solve ``A u = 0`` with ``u`` fixed to ``boundary`` on the boundary nodes.

    ``boundary`` holds one value per boundary node (in flat-index order) or a
    full field from which the boundary values are taken.
    """
    b = _values(boundary)
    if b.size == op.grid.size:
        b = b[op.boundary]
    if b.size != op.boundary.size:
        raise ValueError(f"need {op.boundary.size} boundary values, got {b.size}")
    pick = sp.csr_matrix(
        (np.ones(op.boundary.size), (np.arange(op.boundary.size), op.boundary)),
        shape=(op.boundary.size, op.grid.size),
    )
    stacked = sp.vstack([op.matrix, pick]).tocsc()
    rhs = np.concatenate([np.zeros(op.interior.size), b])
    try:
        lu = spla.splu(stacked)
    except RuntimeError as exc:
        raise SolverError(f"baseline system is singular: {exc}") from exc
    u = lu.solve(rhs)
    u += lu.solve(rhs - stacked @ u)
    return DensityField(op.grid, u)


def solve_constrained(op, v, oracle=None):
    """Euclidean projection of ``v`` onto the null space of ``A``."""
    vv = _values(v)
    a = op.matrix.tocsr()
    gram = (a @ a.T).tocsc()
    try:
        lu = spla.splu(gram)
    except RuntimeError as exc:
        raise SolverError(f"A A^T is singular (A not of full row rank): {exc}") from exc
    rhs = a @ vv
    lam = lu.solve(rhs)
    lam += lu.solve(rhs - gram @ lam)
    u = vv - a.T @ lam
    # a second projection removes what the first left behind in round-off
    lam = lu.solve(a @ u)
    u = u - a.T @ lam
    if not np.all(np.isfinite(u)):
        raise SolverError("A A^T is numerically singular")
    return _report(op, u, vv, oracle)


def solve_unconstrained(op, v, oracle=None, rtol=1e-10, maxiter=None):
    """Minimise ``||A u||^2 + ||u - v||^2``, i.e. solve ``(I + A^T A) u = v``."""
    vv = _values(v)
    a = op.matrix.tocsr()
    normal = (sp.identity(op.grid.size, format="csr") + a.T @ a).tocsc()
    if op.grid.size <= DIRECT_LIMIT:
        lu = spla.splu(normal)
        u = lu.solve(vv)
        u += lu.solve(vv - normal @ u)
    else:
        diag = normal.diagonal()
        precond = spla.LinearOperator(normal.shape, matvec=lambda r: r / diag)
        iters = [0]

        def count(_):
            iters[0] += 1

        u, info = spla.cg(normal, vv, rtol=rtol, maxiter=maxiter, M=precond, callback=count)
        if info != 0:
            res = np.linalg.norm(normal @ u - vv) / np.linalg.norm(vv)
            raise SolverError(f"CG did not converge after {iters[0]} iterations (rel. residual {res:.3e})")
    return _report(op, u, vv, oracle)


def boundary_band_fraction(field, oracle, width=1):
    """Share of squared error sitting within ``width`` nodes of the boundary."""
    err = (field.values - oracle.values).reshape(field.grid.shape) ** 2
    npts = field.grid.points_per_axis
    idx = np.indices(field.grid.shape)
    band = np.any((idx < width) | (idx >= npts - width), axis=0)
    total = err.sum()
    return float(err[band].sum() / total) if total > 0 else 0.0


def compute_q(model, grid):
    """``h^n sum_i (1/(1 + h^-4 lam_i))^2`` over nonzero eigenvalues of ``A_h^T A_h``.

    ``A_h = h^2 A``. Eigenvalues below ``1e-12 * lam_max`` count as zero.
    Uniform spacing is assumed (the first axis spacing is used).
    """
    if grid.size > EIG_LIMIT:
        raise SolverError(f"Q(h) needs a dense eigen-decomposition; {grid.size} nodes exceeds {EIG_LIMIT}")
    op = assemble_operator(model, grid)
    h = float(grid.spacing[0])
    ah = (h * h) * op.matrix.toarray()
    lam = np.linalg.eigvalsh(ah.T @ ah)
    lam = lam[lam > 1e-12 * lam.max()]
    if lam.size != op.interior.size:
        raise SolverError(f"A_h rank {lam.size} differs from {op.interior.size} interior rows")
    return float(h**grid.dim * np.sum((1.0 / (1.0 + lam / h**4)) ** 2))


def theorem1_ratio(model, grids, noise_std, trials, rng, boundary=None):
    """Average ``||z||^2 / ||e||^2`` with ``z = ubar - u*`` for ``v = u* + e``.

    ``boundary`` maps a grid to the baseline's boundary data (a full field or
    boundary values); it must be given, the baseline cannot be guessed.
    """
    if boundary is None:
        raise SolverError("theorem1_ratio needs boundary data for the baseline u*")
    out = []
    for grid in grids:
        op = assemble_operator(model, grid)
        base = solve_baseline(op, boundary(grid))
        a = op.matrix.tocsr()
        normal = (sp.identity(grid.size, format="csr") + a.T @ a).tocsc()
        lu = spla.splu(normal)
        num = den = 0.0
        for _ in range(trials):
            e = rng.normal(0.0, noise_std, size=grid.size)
            v = base.values + e
            ubar = lu.solve(v)
            ubar += lu.solve(v - normal @ ubar)
            z = ubar - base.values
            num += z @ z
            den += e @ e
        out.append((float(grid.spacing[0]), num / den))
    return out
