"""Periodic unit-cell problems on Y = [0,1]^2, effective tensors, and the
homogenized coefficient integrals of the two-scale model.

The quotient space H^1_#(Y)/R is realized by identifying opposite-edge
DOFs, pinning one node during the solve, and subtracting the weighted
mean afterwards. Conventions for the reduced-system packaging (moving
the homogenized right-hand side to the left):

    b*_jj   = v_j + w_jj - (p_mb - p_j) u_jj
    b*_jmb  = -v_j - w_jmb - (p_mb - p_j) u_jmb
    c*_j    = -T_j + sum_r z_jr (p_rb - p_r)

with v_j = int k_j grad M_j, w_jm[i] = int Q_j N^i_m, T_j = int
Q_j (M_1+M_2), u_jr[i] = int (dQ_j/dp_r) N^i_r, z_jr = int
(dQ_j/dp_r) M_r, and mb/rb the opposite continuum index.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, mesh

__all__ = [
    "UnitCellMesh",
    "CellSolutions",
    "EffectiveCoefficients",
    "solve_cell_N",
    "solve_cell_M",
    "effective_tensor",
    "homogenized_coefficients",
    "laminate_coefficient",
    "sine_coefficient",
    "write_coefficient_table",
]


class UnitCellMesh:
    """Periodic 2^m-by-2^m Q1 mesh of the unit cell.

    Unique DOFs are the nodes with both indices in [0, n); the top and
    right edge nodes are identified with their opposite partners.
    """

    def __init__(self, n):
        n = int(n)
        if n < 2 or n & (n - 1):
            raise ValueError("cell resolution must be a power of two >= 2")
        self.n = n
        self.grid = mesh.StructuredGrid(n, n)
        g = self.grid

        ix, iy = g.node_xy(np.arange(g.nnode))
        self.dof_map = (iy % n) * n + (ix % n)
        self.n_dof = n * n
        self.P = sp.csr_matrix(
            (
                np.ones(g.nnode),
                (np.arange(g.nnode), self.dof_map),
            ),
            shape=(g.nnode, self.n_dof),
        )
        M = fem.assemble_mass(g, 1.0)
        self.mean_weights = np.asarray(
            self.P.T @ (M @ np.ones(g.nnode))
        ).ravel()  # integrates each periodic basis function; sums to 1

    def reduce(self, A):
        """Periodic reduction of a full-grid operator: P^T A P."""
        return (self.P.T @ (A @ self.P)).tocsr()

    def to_nodal(self, u):
        """Unique-DOF vector -> full-grid nodal field."""
        return np.asarray(u)[self.dof_map]

    def mean(self, u):
        """Cell average of a unique-DOF field (|Y| = 1)."""
        return float(self.mean_weights @ np.asarray(u))

    def subtract_mean(self, u):
        return u - self.mean(u)

    def stiffness_operator(self, k, quad=None):
        """Pinned, factored periodic stiffness for repeated cell solves."""
        quad = quad or fem._DEFAULT_QUAD
        k_q = cell_field(self, k, quad)
        if k_q.min() <= 0:
            raise ValueError("cell conductivity must be strictly positive")
        A = self.reduce(fem.assemble_stiffness(self.grid, k_q, quad))
        return _PinnedOperator(A), k_q

    def solve_mean_zero(self, op, rhs):
        """Solve the consistent singular periodic system by pinning DOF 0,
        then shift to the mean-zero representative."""
        return self.subtract_mean(op.solve(rhs))


class _PinnedOperator:
    """Periodic stiffness with DOF 0 pinned, kept with its factorization so
    the residual guard in fem.solve_sparse still applies on reuse."""

    def __init__(self, A_per):
        self.A = fem.apply_dirichlet(A_per, np.array([0]))
        self.lu = spla.splu(sp.csc_matrix(self.A))

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float).copy()
        rhs[0] = 0.0
        return fem.solve_sparse(self.A, rhs, factor=self.lu)


def _quad_xy(grid, quad):
    ref = fem._reference_tensors(grid, quad)
    return np.einsum("qa,ead->eqd", ref["phi"], grid.coords[grid.conn])


def cell_field(cell, f, quad=None):
    """Canonicalize a cell coefficient to quadrature values (nelem, nq).

    Accepts scalars, element fields, nodal fields, (nelem, nq) arrays, or
    callables of the cell coordinate (vectorized over (N, 2) arrays).
    """
    quad = quad or fem._DEFAULT_QUAD
    if callable(f):
        xy = _quad_xy(cell.grid, quad)
        vals = np.asarray(f(xy.reshape(-1, 2)), dtype=float)
        return vals.reshape(xy.shape[0], xy.shape[1])
    return fem._scalar_at_quad(cell.grid, f, quad)


def integrate(cell, field_q, quad=None):
    """Integral over Y of a quadrature-valued field."""
    quad = quad or fem._DEFAULT_QUAD
    ref = fem._reference_tensors(cell.grid, quad)
    return float(np.einsum("q,eq->", ref["w"], field_q))


@dataclass
class CellSolutions:
    """The four cell problems' solutions at one macro point, as unique-DOF
    mean-zero fields: N[j][i] for continuum j+1 direction i+1, M[j]."""

    N: list
    M: list
    p: tuple


def _grad_rhs(cell, k_q, direction, quad):
    """Periodic load for the N problem: -int k e^i . grad(phi)."""
    g = cell.grid
    ref = fem._reference_tensors(g, quad)
    elem = -np.einsum("q,eq,qa->ea", ref["w"], k_q, ref["grad"][:, direction, :])
    rhs = np.zeros(g.nnode)
    np.add.at(rhs, g.conn.ravel(), elem.ravel())
    return np.asarray(cell.P.T @ rhs).ravel()


def solve_cell_N(cell, k, direction, quad=None, operator=None):
    """Cell corrector N^i: int k grad(N) . grad(phi) = -int k e^i . grad(phi)
    over periodic phi; returned as a mean-zero unique-DOF field.

    direction is 1 or 2. Pass `operator` from cell.stiffness_operator(k)
    to amortize repeated solves with the same k.
    """
    if direction not in (1, 2):
        raise ValueError("direction must be 1 or 2")
    quad = quad or fem._DEFAULT_QUAD
    k_q = cell_field(cell, k, quad)
    if k_q.min() <= 0:
        raise ValueError("cell conductivity must be strictly positive")
    rhs = _grad_rhs(cell, k_q, direction - 1, quad)
    if operator is None:
        operator, _ = cell.stiffness_operator(k_q, quad)
    return cell.solve_mean_zero(operator, rhs)


def solve_cell_M(cell, k, Q, quad=None, operator=None, mean_correct=False):
    """Cell corrector M: int k grad(M) . grad(psi) = int Q psi.

    Q must have zero cell average (uniqueness in the quotient space);
    a nonzero mean raises ValueError reporting the measured value unless
    mean_correct=True subtracts it first.
    """
    quad = quad or fem._DEFAULT_QUAD
    Q_q = cell_field(cell, Q, quad)
    qmean = integrate(cell, Q_q, quad)
    if mean_correct:
        Q_q = Q_q - qmean
    elif abs(qmean) > 1e-12 * max(1.0, np.abs(Q_q).max()):
        raise ValueError(
            f"Q must have zero cell average for the M problem; measured "
            f"mean {qmean:.6e}"
        )
    rhs = np.asarray(
        cell.P.T @ fem.assemble_load(cell.grid, Q_q, quad)
    ).ravel()
    if operator is None:
        operator, _ = cell.stiffness_operator(k, quad)
    return cell.solve_mean_zero(operator, rhs)


def effective_tensor(cell, k, N1, N2, quad=None):
    """K*_ij = int_Y k (delta_ij + dN^j/dy_i) dy, symmetrized.

    N1, N2 are the direction-1 and direction-2 correctors (unique DOFs).
    The skew part is discretization noise; the full-pipeline record keeps
    its magnitude, this entry point returns the plain 2x2 tensor.
    """
    K, _ = _effective_tensor_with_asym(cell, k, N1, N2, quad)
    return K


def _effective_tensor_with_asym(cell, k, N1, N2, quad=None):
    quad = quad or fem._DEFAULT_QUAD
    k_q = cell_field(cell, k, quad)
    ref = fem._reference_tensors(cell.grid, quad)
    K = np.zeros((2, 2))
    for j, N in enumerate((N1, N2)):
        gq = fem.gradient_at_quad(cell.grid, cell.to_nodal(N), quad)
        for i in range(2):
            K[i, j] = np.einsum(
                "q,eq->", ref["w"], k_q * ((i == j) + gq[:, :, i])
            )
    asym = abs(K[0, 1] - K[1, 0])
    return 0.5 * (K + K.T), asym


@dataclass
class EffectiveCoefficients:
    """Homogenized coefficients of the reduced system at one macro point."""

    p: tuple
    K1: np.ndarray
    K2: np.ndarray
    b11: np.ndarray
    b12: np.ndarray
    b21: np.ndarray
    b22: np.ndarray
    c1: float
    c2: float
    asymmetry: tuple
    integrals: dict = field(default_factory=dict)


def _dQ_central(Qfun, r, p, p_range):
    a, b = p_range
    h = 1e-6 * (b - a)
    if h <= 0:
        raise ValueError("p_range must satisfy b > a")

    def d(y):
        pp = list(p)
        pm = list(p)
        pp[r] += h
        pm[r] -= h
        return (Qfun(y, pp[0], pp[1]) - Qfun(y, pm[0], pm[1])) / (2 * h)

    return d


def homogenized_coefficients(
    cell, coeffs, p, quad=None, p_range=(0.0, 1.0), mean_correct=False
):
    """Solve the four cell problems at macro point p = (p1, p2) and package
    the homogenized reduced-system coefficients.

    coeffs carries k1, k2, Q1, Q2 as callables k(y, p_j), Q(y, p1, p2)
    over (N, 2) coordinate arrays (a model.CellCoefficients works);
    dQ_j/dp_r comes from coeffs.dQ(j, r) when that attribute exists, else
    by central differences with step 1e-6*(b-a) over p_range.
    """
    quad = quad or fem._DEFAULT_QUAD
    p = (float(p[0]), float(p[1]))
    ks = (coeffs.k1, coeffs.k2)
    Qs = (coeffs.Q1, coeffs.Q2)
    if Qs[0] is None or Qs[1] is None:
        raise ValueError("cell coefficients must define Q1 and Q2")

    ref = fem._reference_tensors(cell.grid, quad)
    w_q = ref["w"]

    N = [[None, None], [None, None]]
    M = [None, None]
    K = [None, None]
    asym = [0.0, 0.0]
    k_qs = []
    for j in range(2):
        op, k_q = cell.stiffness_operator(
            lambda y, j=j: ks[j](y, p[j]), quad
        )
        k_qs.append(k_q)
        for i in (1, 2):
            N[j][i - 1] = solve_cell_N(cell, k_q, i, quad=quad, operator=op)
        M[j] = solve_cell_M(
            cell,
            k_q,
            lambda y, j=j: Qs[j](y, p[0], p[1]),
            quad=quad,
            operator=op,
            mean_correct=mean_correct,
        )
        K[j], asym[j] = _effective_tensor_with_asym(
            cell, k_q, N[j][0], N[j][1], quad
        )

    Q_q = [cell_field(cell, lambda y, j=j: Qs[j](y, p[0], p[1]), quad)
           for j in range(2)]
    N_q = [[fem.interpolate_to_quad(cell.grid, cell.to_nodal(N[j][i]), quad)
            for i in range(2)] for j in range(2)]
    M_q = [fem.interpolate_to_quad(cell.grid, cell.to_nodal(M[j]), quad)
           for j in range(2)]
    gradM_q = [fem.gradient_at_quad(cell.grid, cell.to_nodal(M[j]), quad)
               for j in range(2)]

    def cint(fq):
        return float(np.einsum("q,eq->", w_q, fq))

    dQ_q = np.empty((2, 2), dtype=object)
    for j in range(2):
        for r in range(2):
            if getattr(coeffs, "dQ", None) is not None:
                dfun = coeffs.dQ(j + 1, r + 1)
                dQ_q[j, r] = cell_field(
                    cell, lambda y, d=dfun: d(y, p[0], p[1]), quad
                )
            else:
                dQ_q[j, r] = cell_field(
                    cell, _dQ_central(Qs[j], r, p, p_range), quad
                )

    v = [np.array([cint(k_qs[j] * gradM_q[j][:, :, d]) for d in range(2)])
         for j in range(2)]
    w_vec = [[np.array([cint(Q_q[j] * N_q[m][d]) for d in range(2)])
              for m in range(2)] for j in range(2)]
    T = [cint(Q_q[j] * (M_q[0] + M_q[1])) for j in range(2)]
    u_vec = [[np.array([cint(dQ_q[j, r] * N_q[r][d]) for d in range(2)])
              for r in range(2)] for j in range(2)]
    z = [[cint(dQ_q[j, r] * M_q[r]) for r in range(2)] for j in range(2)]

    b = np.empty((2, 2), dtype=object)
    c = [0.0, 0.0]
    for j in range(2):
        mb = 1 - j
        dp = p[mb] - p[j]
        b[j, j] = v[j] + w_vec[j][j] - dp * u_vec[j][j]
        b[j, mb] = -v[j] - w_vec[j][mb] - dp * u_vec[j][mb]
        c[j] = -T[j] + sum(
            z[j][r] * (p[1 - r] - p[r]) for r in range(2)
        )

    return EffectiveCoefficients(
        p=p,
        K1=K[0],
        K2=K[1],
        b11=b[0, 0],
        b12=b[0, 1],
        b21=b[1, 0],
        b22=b[1, 1],
        c1=c[0],
        c2=c[1],
        asymmetry=(asym[0], asym[1]),
        integrals={
            "v": v, "w": w_vec, "T": T, "u": u_vec, "z": z,
            "N": N, "M": M,
        },
    )


def laminate_coefficient(k_a, k_b, axis=1):
    """Piecewise-constant half-cell laminate: k_a where y_axis < 1/2."""

    def k(y, p=None):
        y = np.atleast_2d(y)
        return np.where(y[:, axis - 1] < 0.5, float(k_a), float(k_b))

    return k


def sine_coefficient(offset=2.0, axis=1):
    """Smooth periodic coefficient offset + sin(2 pi y_axis)."""

    def k(y, p=None):
        y = np.atleast_2d(y)
        return offset + np.sin(2 * np.pi * y[:, axis - 1])

    return k


def write_coefficient_table(path, records):
    """Structured-text export of EffectiveCoefficients keyed by macro point."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(f"p {rec.p[0]:.17g} {rec.p[1]:.17g}\n")
            for name, K in (("K1", rec.K1), ("K2", rec.K2)):
                fh.write(
                    f"  {name} {K[0,0]:.17g} {K[0,1]:.17g} "
                    f"{K[1,0]:.17g} {K[1,1]:.17g}\n"
                )
            for name, bv in (
                ("b11", rec.b11), ("b12", rec.b12),
                ("b21", rec.b21), ("b22", rec.b22),
            ):
                fh.write(f"  {name} {bv[0]:.17g} {bv[1]:.17g}\n")
            fh.write(f"  c1 {rec.c1:.17g}\n")
            fh.write(f"  c2 {rec.c2:.17g}\n")
