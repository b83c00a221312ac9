"""Q1 bilinear finite elements on structured grids.

Assembles the four bilinear forms of the linearized dual-continuum system
(diffusion, mass, convection, inter-continuum exchange), provides patch-local
assembly for multiscale basis construction, direct sparse solves with a
residual guard, and small dense generalized eigensolves.

Coefficient convention: nodal fields are interpolated to quadrature points,
elementwise fields are taken constant per element. Every assembly routine
accepts a scalar, an element field ``(nelem,)``, a nodal field ``(nnode,)``
or a ready per-quadrature array ``(nelem, nq)`` (vector fields analogously
with a trailing length-2 axis).
"""

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import DecompositionFailure, SolverFailure

__all__ = [
    "QuadratureRule",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_convection",
    "assemble_coupling",
    "assemble_load",
    "element_matrices",
    "assemble_on_subset",
    "apply_dirichlet",
    "solve_sparse",
    "generalized_eigs",
    "interpolate_to_quad",
    "gradient_at_quad",
    "mass_norm",
]


class QuadratureRule:
    """Tensor-product Gauss rule on the reference square [-1,1]^2.

    Attributes
    ----------
    points : ndarray, shape (nq, 2)
    weights : ndarray, shape (nq,)
        Weights sum to 4, the reference-element area.
    """

    def __init__(self, points, weights):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        weights = np.asarray(weights, dtype=float).ravel()
        if points.shape[0] != weights.size or points.shape[0] == 0:
            raise ValueError("points and weights must match and be nonempty")
        if not np.isclose(weights.sum(), 4.0):
            raise ValueError("weights must sum to the reference-element area 4")
        self.points = points
        self.weights = weights
        self.nq = weights.size

    @classmethod
    def gauss(cls, n=2):
        """n-point Gauss-Legendre rule per axis (default 2x2, exact to degree 3)."""
        if n < 1:
            raise ValueError("need at least one point per axis")
        x, w = np.polynomial.legendre.leggauss(n)
        pts = [(xi, yi) for yi in x for xi in x]
        wts = [wi * wj for wj in w for wi in w]
        return cls(pts, wts)


_DEFAULT_QUAD = QuadratureRule.gauss(2)

# local corner order of the Q1 element, counterclockwise from lower-left
_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def shape_values(points):
    """Q1 shape functions at reference points: (nq, 4)."""
    xi, eta = points[:, 0:1], points[:, 1:2]
    return 0.25 * (1 + _CORNERS[:, 0] * xi) * (1 + _CORNERS[:, 1] * eta)


def shape_gradients(points):
    """Reference-coordinate gradients: (nq, 2, 4)."""
    xi, eta = points[:, 0:1], points[:, 1:2]
    dxi = 0.25 * _CORNERS[:, 0] * (1 + _CORNERS[:, 1] * eta)
    deta = 0.25 * _CORNERS[:, 1] * (1 + _CORNERS[:, 0] * xi)
    return np.stack([dxi, deta], axis=1)


def _reference_tensors(grid, quad):
    """Per-grid cache of quadrature-weighted reference tensors.

    Uniform rectangular elements make these identical for every element:
    GG[q] carries grad.grad, MM[q] carries phi.phi, CD[q,d] carries
    phi * d(phi)/dx_d, LV[q] carries phi, all premultiplied by the physical
    quadrature weight.
    """
    cache = grid.__dict__.setdefault("_fem_cache", {})
    key = ("tensors", quad.nq, quad.points.tobytes())
    if key in cache:
        return cache[key]
    phi = shape_values(quad.points)
    dref = shape_gradients(quad.points)
    grad = dref * np.array([2.0 / grid.hx, 2.0 / grid.hy])[None, :, None]
    wj = quad.weights * (grid.hx * grid.hy / 4.0)
    gg = np.einsum("q,qdi,qdj->qij", wj, grad, grad)
    mm = np.einsum("q,qi,qj->qij", wj, phi, phi)
    cd = np.einsum("q,qi,qdj->qdij", wj, phi, grad)
    lv = wj[:, None] * phi
    out = {
        "phi": np.ascontiguousarray(phi),
        "grad": np.ascontiguousarray(grad),
        "w": wj,
        "gg": np.ascontiguousarray(gg),
        "mm": np.ascontiguousarray(mm),
        "cd": np.ascontiguousarray(cd),
        "lv": np.ascontiguousarray(lv),
    }
    cache[key] = out
    return out


def _scalar_at_quad(grid, field, quad):
    """Canonicalize a scalar coefficient to (nelem, nq)."""
    nq = quad.nq
    if np.isscalar(field):
        return np.full((grid.nelem, nq), float(field))
    field = np.asarray(field, dtype=float)
    if field.ndim == 1 and field.size == grid.nelem:
        return np.ascontiguousarray(np.broadcast_to(field[:, None], (grid.nelem, nq)))
    if field.ndim == 1 and field.size == grid.nnode:
        return interpolate_to_quad(grid, field, quad)
    if field.shape == (grid.nelem, nq):
        return np.ascontiguousarray(field)
    raise ValueError(
        f"cannot interpret coefficient of shape {field.shape} on a grid with "
        f"{grid.nelem} elements / {grid.nnode} nodes"
    )


def _vector_at_quad(grid, field, quad):
    """Canonicalize a vector coefficient to (nelem, nq, 2)."""
    nq = quad.nq
    if isinstance(field, (tuple, list)) and len(field) == 2:
        comps = [_scalar_at_quad(grid, f, quad) for f in field]
        return np.ascontiguousarray(np.stack(comps, axis=-1))
    field = np.asarray(field, dtype=float)
    if field.ndim == 2 and field.shape == (grid.nnode, 2):
        comps = [interpolate_to_quad(grid, field[:, d], quad) for d in range(2)]
        return np.ascontiguousarray(np.stack(comps, axis=-1))
    if field.ndim == 2 and field.shape == (grid.nelem, 2):
        return np.ascontiguousarray(
            np.broadcast_to(field[:, None, :], (grid.nelem, nq, 2)).copy()
        )
    if field.shape == (grid.nelem, nq, 2):
        return np.ascontiguousarray(field)
    raise ValueError(f"cannot interpret vector field of shape {field.shape}")


def interpolate_to_quad(grid, nodal, quad=None):
    """Evaluate a nodal field at all quadrature points: (nelem, nq)."""
    quad = quad or _DEFAULT_QUAD
    ref = _reference_tensors(grid, quad)
    nodal = np.asarray(nodal, dtype=float)
    return np.ascontiguousarray(nodal[grid.conn] @ ref["phi"].T)


def gradient_at_quad(grid, nodal, quad=None):
    """Gradient of a nodal field at quadrature points: (nelem, nq, 2)."""
    quad = quad or _DEFAULT_QUAD
    ref = _reference_tensors(grid, quad)
    nodal = np.asarray(nodal, dtype=float)
    return np.einsum("qda,ea->eqd", ref["grad"], nodal[grid.conn])


def element_matrices(grid, kind, coeff, quad=None):
    """Raw per-element matrices for one bilinear form.

    kind is one of "stiffness", "mass", "convection"; coeff follows the
    coefficient convention of the module docstring. Returns (nelem, 4, 4).
    """
    quad = quad or _DEFAULT_QUAD
    ref = _reference_tensors(grid, quad)
    if kind == "stiffness":
        cq = _scalar_at_quad(grid, coeff, quad)
        return kernels.stiffness_elems(cq, ref["gg"])
    if kind == "mass":
        cq = _scalar_at_quad(grid, coeff, quad)
        return kernels.mass_elems(cq, ref["mm"])
    if kind == "convection":
        bq = _vector_at_quad(grid, coeff, quad)
        return kernels.convection_elems(bq, ref["cd"])
    raise ValueError(f"unknown form kind {kind!r}")


def scatter_elements(grid, elem_mats):
    """Sum per-element 4x4 matrices into the global sparse matrix."""
    rows = np.repeat(grid.conn, 4, axis=1).ravel()
    cols = np.tile(grid.conn, (1, 4)).ravel()
    mat = sp.coo_matrix(
        (elem_mats.ravel(), (rows, cols)), shape=(grid.nnode, grid.nnode)
    )
    return mat.tocsr()


def assemble_on_subset(grid, elem_mats, elems, node_ids):
    """Assemble element matrices of `elems` over the local numbering `node_ids`.

    node_ids must be sorted and must contain every node of the given
    elements. Used for patch-local forms (the integrals over a coarse
    neighborhood), where slicing the global matrix would wrongly include
    contributions from elements outside the patch.
    """
    node_ids = np.asarray(node_ids)
    conn = grid.conn[elems]
    local = np.searchsorted(node_ids, conn)
    local = np.minimum(local, node_ids.size - 1)
    if not np.array_equal(node_ids[local], conn):
        raise ValueError("node_ids does not cover the requested elements")
    rows = np.repeat(local, 4, axis=1).ravel()
    cols = np.tile(local, (1, 4)).ravel()
    n = node_ids.size
    data = elem_mats[elems].ravel()
    return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def assemble_stiffness(grid, coeff, quad=None):
    """Global matrix of (kappa grad p, grad phi). Requires kappa > 0."""
    quad = quad or _DEFAULT_QUAD
    cq = _scalar_at_quad(grid, coeff, quad)
    if cq.min() <= 0.0:
        raise ValueError("conductivity must be strictly positive")
    ref = _reference_tensors(grid, quad)
    return scatter_elements(grid, kernels.stiffness_elems(cq, ref["gg"]))


def assemble_mass(grid, weight=None, quad=None):
    """Global matrix of (w p, phi). Requires w >= 0 (w = 1 when omitted)."""
    quad = quad or _DEFAULT_QUAD
    wq = _scalar_at_quad(grid, 1.0 if weight is None else weight, quad)
    if wq.min() < 0.0:
        raise ValueError("mass weight must be nonnegative")
    ref = _reference_tensors(grid, quad)
    return scatter_elements(grid, kernels.mass_elems(wq, ref["mm"]))


def assemble_convection(grid, b, quad=None):
    """Global matrix of (b . grad p, phi); nonsymmetric in general."""
    quad = quad or _DEFAULT_QUAD
    bq = _vector_at_quad(grid, b, quad)
    if not np.all(np.isfinite(bq)):
        raise ValueError("convection field must be finite")
    ref = _reference_tensors(grid, quad)
    return scatter_elements(grid, kernels.convection_elems(bq, ref["cd"]))


def assemble_coupling(grid, c, quad=None):
    """Exchange blocks for (c (p_i - p_j), phi): returns (self, cross).

    self = weighted mass with weight c, cross = -self, so the form
    vanishes identically when p_1 = p_2.
    """
    quad = quad or _DEFAULT_QUAD
    cq = _scalar_at_quad(grid, c, quad)
    if cq.min() < 0.0:
        raise ValueError("transfer coefficient must be nonnegative")
    ref = _reference_tensors(grid, quad)
    self_block = scatter_elements(grid, kernels.mass_elems(cq, ref["mm"]))
    return self_block, -self_block


def assemble_load(grid, f, quad=None):
    """Load vector of (f, phi)."""
    quad = quad or _DEFAULT_QUAD
    fq = _scalar_at_quad(grid, f, quad)
    ref = _reference_tensors(grid, quad)
    vals = kernels.load_elems(fq, ref["lv"])
    out = np.zeros(grid.nnode)
    np.add.at(out, grid.conn.ravel(), np.asarray(vals).ravel())
    return out


def apply_dirichlet(A, nodes, rhs=None):
    """Zero Dirichlet rows/columns with unit diagonal (homogeneous data).

    Returns the modified matrix (and rhs when given). Row/column elimination
    keeps symmetric inputs symmetric.
    """
    n = A.shape[0]
    keep = np.ones(n)
    keep[nodes] = 0.0
    D = sp.diags(keep)
    fix = sp.diags(1.0 - keep)
    A2 = (D @ A @ D + fix).tocsr()
    if rhs is None:
        return A2
    rhs2 = rhs * keep
    return A2, rhs2


def solve_sparse(A, rhs, factor=None):
    """Direct sparse solve with a residual guard of 1e-10 relative.

    Pass a precomputed `factor` (scipy splu object) to reuse a
    factorization. Ill-conditioned systems (high-contrast coefficients)
    get a few iterative-refinement passes before the guard is checked.
    """
    rhs = np.asarray(rhs, dtype=float)
    try:
        lu = factor if factor is not None else spla.splu(sp.csc_matrix(A))
        x = lu.solve(rhs)
    except RuntimeError as exc:  # SuperLU signals singularity this way
        raise SolverFailure(f"sparse factorization failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverFailure("sparse solve produced non-finite values")
    bnorm = np.linalg.norm(rhs)
    tol = 1e-10 * max(bnorm, 1e-300)
    rnorm = np.linalg.norm(A @ x - rhs)
    for _ in range(3):
        if rnorm <= tol:
            break
        dx = lu.solve(rhs - A @ x)
        if not np.all(np.isfinite(dx)):
            break
        x = x + dx
        rnorm = np.linalg.norm(A @ x - rhs)
    if rnorm > tol:
        # Strongly reaction-dominated high-contrast systems can sit below
        # the relative-to-rhs bound's float64 floor (|A||x| >> |Ax| from
        # cancellation); accept solutions at the componentwise
        # backward-stability limit instead.
        floor = np.linalg.norm(abs(A) @ np.abs(x)) + bnorm
        if rnorm > 1e-13 * floor:
            raise SolverFailure(
                f"residual {rnorm:.3e} exceeds 1e-10 * ||rhs|| = {tol:.3e} "
                f"and the backward-stability floor {1e-13 * floor:.3e}"
            )
    return x


def _check_symmetric(M, name):
    d = abs(M - M.T)
    scale = max(abs(M).max(), 1e-300)
    if d.max() > 1e-10 * scale:
        raise ValueError(f"{name} must be symmetric (asymmetry {d.max():.3e})")


def generalized_eigs(A, S, m):
    """m smallest eigenpairs of A v = lambda S v, ascending.

    A symmetric, S symmetric positive definite. Eigenvectors come back
    S-orthonormal with the sign fixed so the largest-magnitude entry is
    positive. Dense solve; intended for projected (snapshot-sized) problems.
    """
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    S = S.toarray() if sp.issparse(S) else np.asarray(S, dtype=float)
    n = A.shape[0]
    if not (A.shape == S.shape and A.shape == (n, n)):
        raise ValueError("A and S must be square and of equal size")
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}]")
    _check_symmetric(A, "A")
    _check_symmetric(S, "S")
    A = 0.5 * (A + A.T)
    S = 0.5 * (S + S.T)
    try:
        vals, vecs = scipy.linalg.eigh(A, S, subset_by_index=(0, m - 1))
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise DecompositionFailure(f"generalized eigensolve failed: {exc}") from exc
    # deterministic sign: largest-magnitude entry of each vector positive
    for k in range(vals.size):
        lead = np.argmax(np.abs(vecs[:, k]))
        if vecs[lead, k] < 0:
            vecs[:, k] = -vecs[:, k]
    resid = A @ vecs - S @ vecs * vals[None, :]
    scale = np.linalg.norm(A, ord=1) + np.linalg.norm(S, ord=1)
    if np.abs(resid).max() > 1e-8 * max(scale, 1.0):
        raise DecompositionFailure(
            f"eigen residual {np.abs(resid).max():.3e} too large"
        )
    return vals, vecs


def mass_norm(M, v):
    """Discrete L2 norm sqrt(v' M v) for a nodal field."""
    return float(np.sqrt(max(v @ (M @ v), 0.0)))
