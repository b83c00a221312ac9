"""Offline multiscale space construction and the projected coarse solve.

Per coarse neighborhood: harmonic (or coupled-harmonic) snapshots with
delta boundary data, a projected generalized spectral problem selecting
the smallest eigenpairs, and partition-of-unity-multiplied basis columns
merged into a global projection operator R over the stacked dual
pressure DOFs. The space is built once, at the frozen (zero) state.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, mesh, model as model_mod
from .errors import DecompositionFailure

__all__ = [
    "SnapshotSpace",
    "MultiscaleSpace",
    "uncoupled_snapshots",
    "coupled_snapshots",
    "spectral_decompose",
    "build_multiscale_space",
    "coarse_solve_system",
    "save_basis",
    "load_basis",
]


@dataclass
class SnapshotSpace:
    """Snapshot vectors over one coarse neighborhood's fine DOFs.

    Uncoupled mode: `vectors` is (n_patch, N_J), column k the harmonic
    extension of the spike at boundary node k (counterclockwise order).
    Coupled mode: (2*n_patch, 2*N_J), both continua stacked; columns are
    all r=1 spikes then all r=2 spikes, recorded in boundary_k/boundary_r.
    """

    neighborhood: mesh.CoarseNeighborhood
    mode: str
    vectors: np.ndarray
    boundary_k: np.ndarray
    boundary_r: np.ndarray = None
    continuum: int = None

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def n_patch(self):
        return self.neighborhood.fine_nodes.size


def _patch_matrix(nb, elem_mats):
    return fem.assemble_on_subset(
        nb.coarse.fine, elem_mats, nb.fine_elems, nb.fine_nodes
    )


def _stiffness_mats(grid, kappa, quad):
    return fem.element_matrices(grid, "stiffness", kappa, quad)


def uncoupled_snapshots(nb, kappa, quad=None, elem_mats=None):
    """Harmonic snapshots of one continuum: -div(kappa grad phi) = 0 in
    the neighborhood, phi = delta_k on its boundary, one column per
    boundary fine node."""
    fine = nb.coarse.fine
    quad = quad or fem._DEFAULT_QUAD
    if elem_mats is None:
        elem_mats = _stiffness_mats(fine, kappa, quad)
    A = _patch_matrix(nb, elem_mats)

    loc_b = nb.local_index(nb.boundary_nodes)
    loc_i = nb.local_index(nb.interior_nodes)
    nJ = loc_b.size

    V = np.zeros((nb.fine_nodes.size, nJ))
    V[loc_b, np.arange(nJ)] = 1.0
    if loc_i.size:
        Aii = A[loc_i][:, loc_i].tocsc()
        Aib = A[loc_i][:, loc_b]
        V[loc_i] = spla.splu(Aii).solve(-Aib.toarray())
    return SnapshotSpace(
        neighborhood=nb,
        mode="uncoupled",
        vectors=V,
        boundary_k=np.arange(nJ),
    )


def coupled_snapshots(nb, kappa1, kappa2, c_s, quad=None, elem_mats=None):
    """Coupled snapshots: the two-continuum system with symmetric exchange
    coefficient c_s and spike data delta_k e_r; 2*N_J columns (all r=1,
    then all r=2)."""
    fine = nb.coarse.fine
    quad = quad or fem._DEFAULT_QUAD
    if elem_mats is None:
        elem_mats = (
            _stiffness_mats(fine, kappa1, quad),
            _stiffness_mats(fine, kappa2, quad),
            fem.element_matrices(grid=fine, kind="mass", coeff=c_s, quad=quad),
        )
    m1, m2, mc = elem_mats
    A1 = _patch_matrix(nb, m1)
    A2 = _patch_matrix(nb, m2)
    W = _patch_matrix(nb, mc)
    K = sp.bmat([[A1 + W, -W], [-W, A2 + W]], format="csr")

    n = nb.fine_nodes.size
    loc_b = nb.local_index(nb.boundary_nodes)
    loc_i = nb.local_index(nb.interior_nodes)
    nJ = loc_b.size
    bnd = np.concatenate([loc_b, loc_b + n])
    inner = np.concatenate([loc_i, loc_i + n])

    V = np.zeros((2 * n, 2 * nJ))
    V[loc_b, np.arange(nJ)] = 1.0
    V[loc_b + n, nJ + np.arange(nJ)] = 1.0
    if inner.size:
        Kii = K[inner][:, inner].tocsc()
        Kib = K[inner][:, bnd]
        V[inner] = spla.splu(Kii).solve(-(Kib @ V[bnd]))
    return SnapshotSpace(
        neighborhood=nb,
        mode="coupled",
        vectors=V,
        boundary_k=np.tile(np.arange(nJ), 2),
        boundary_r=np.repeat([1, 2], nJ),
    )


def spectral_decompose(space, kappa, s_weight, m, c_s=None, quad=None,
                       elem_mats=None):
    """Smallest m eigenpairs of the projected local spectral problem.

    The a-form is the (per-continuum) stiffness form; the s-form is the
    mass form weighted by kappa times the summed squared chi gradients.
    For coupled spaces pass per-continuum pairs (kappa1, kappa2) and
    (w1, w2); both forms are the sums over continua, and the symmetric
    exchange coefficient c_s adds its penalty on the component mismatch
    to the a-form (this ranking is what makes the coupled space favor
    synchronized modes when the exchange dominates).

    Returns (eigenvalues ascending, nodal eigenfunctions (n, m)); the
    eigenvectors are s-orthonormal in the projected form.
    """
    nb = space.neighborhood
    fine = nb.coarse.fine
    quad = quad or fem._DEFAULT_QUAD
    if space.dim == 0:
        raise ValueError("empty snapshot space")
    if not 1 <= m <= space.dim:
        raise ValueError(f"need 1 <= m <= {space.dim}, got {m}")

    if space.mode == "uncoupled":
        kappas, weights = (kappa,), (s_weight,)
    else:
        kappas, weights = kappa, s_weight
    if elem_mats is None:
        elem_mats = (
            [_stiffness_mats(fine, k, quad) for k in kappas],
            [fem.element_matrices(fine, "mass", w, quad) for w in weights],
            None if c_s is None
            else fem.element_matrices(fine, "mass", c_s, quad),
        )
    stiff_mats, smass_mats, cmass_mat = elem_mats

    blocks_a = [_patch_matrix(nb, em) for em in stiff_mats]
    blocks_s = [_patch_matrix(nb, em) for em in smass_mats]
    A_loc = sp.block_diag(blocks_a, format="csr")
    S_loc = sp.block_diag(blocks_s, format="csr")
    if space.mode == "coupled" and cmass_mat is not None:
        W = _patch_matrix(nb, cmass_mat)
        A_loc = A_loc + sp.bmat([[W, -W], [-W, W]], format="csr")

    Phi = space.vectors
    A_proj = Phi.T @ (A_loc @ Phi)
    S_proj = Phi.T @ (S_loc @ Phi)
    try:
        vals, coeffs = fem.generalized_eigs(A_proj, S_proj, m)
    except DecompositionFailure as exc:
        raise DecompositionFailure(
            f"neighborhood {nb.j}: s-form singular on the snapshot space ({exc})"
        ) from exc
    return vals, Phi @ coeffs


@dataclass
class MultiscaleSpace:
    """Global offline space: R maps coarse DOFs to stacked fine DOFs.

    dim (the column count) follows the table convention for both modes:
    coupled columns are vector-valued pairs, uncoupled columns belong to
    a single continuum. scalar_components counts per-continuum component
    functions (2*dim for coupled columns).
    """

    mode: str
    fine: mesh.StructuredGrid
    coarse: mesh.CoarseGrid
    R: sp.csr_matrix
    col_node: np.ndarray
    col_rank: np.ndarray
    col_continuum: np.ndarray
    per_node: dict
    built_per_node: int

    @property
    def dim(self):
        return self.R.shape[1]

    @property
    def scalar_components(self):
        return 2 * self.dim if self.mode == "coupled" else self.dim

    def select(self, n_per_node):
        """Sub-space using the first n_per_node eigenfunctions per coarse
        node (per continuum in uncoupled mode). Valid because eigenpairs
        are stored in ascending spectral order."""
        if n_per_node > self.built_per_node:
            raise ValueError(
                f"built with {self.built_per_node} per node, "
                f"cannot select {n_per_node}"
            )
        mask = self.col_rank < n_per_node
        return MultiscaleSpace(
            mode=self.mode,
            fine=self.fine,
            coarse=self.coarse,
            R=self.R[:, mask].tocsr(),
            col_node=self.col_node[mask],
            col_rank=self.col_rank[mask],
            col_continuum=self.col_continuum[mask],
            per_node={
                j: min(L, n_per_node) for j, L in self.per_node.items()
            },
            built_per_node=n_per_node,
        )


def _prune_rank_deficient(R, tol=1e-10):
    """Drop linearly dependent columns via pivoted QR; returns kept index.

    Densifies R, so this is meant for the small problems where truncated
    boundary neighborhoods actually produce dependent columns.
    """
    _, Rq, piv = scipy.linalg.qr(R.toarray(), mode="economic", pivoting=True)
    d = np.abs(np.diag(Rq))
    if d.size == 0 or d[0] == 0.0:
        return np.arange(R.shape[1])
    keep = np.sort(piv[: d.size][d > d[0] * tol])
    dropped = R.shape[1] - keep.size
    if dropped:
        warnings.warn(
            f"dropping {dropped} linearly dependent offline columns",
            stacklevel=3,
        )
    return keep


def build_multiscale_space(
    model,
    coarse,
    mode,
    n_per_node,
    state=None,
    quad=None,
    include_boundary=False,
    prune=None,
    pou_mode="multiscale",
    spectral_exchange=True,
):
    """Construct the offline space at a frozen state (default: zero).

    mode: "coupled" or "uncoupled". n_per_node is the eigenfunction count
    kept per coarse node (per continuum in uncoupled mode); neighborhoods
    with fewer snapshots keep them all. include_boundary adds boundary
    coarse nodes to the node set (their columns are clipped to zero on
    the domain boundary); default is interior nodes only, the counting
    the error tables use. prune=True removes linearly dependent columns
    (defaults to True when include_boundary is set). spectral_exchange
    keeps the c_s mismatch penalty in the coupled spectral a-form;
    setting it False ranks modes by the diffusion energy alone.
    """
    if mode not in ("coupled", "uncoupled"):
        raise ValueError(f"unknown mode {mode!r}")
    fine = model.grid
    if coarse.fine is not fine and (
        coarse.fine.nx != fine.nx or coarse.fine.ny != fine.ny
    ):
        raise ValueError("coarse grid does not refine the model grid")
    quad = quad or fem._DEFAULT_QUAD
    if prune is None:
        prune = include_boundary

    if state is None:
        p1 = np.zeros(fine.nnode)
        p2 = np.zeros(fine.nnode)
    else:
        p1, p2 = state.p1, state.p2
    coeffs = model_mod.eval_coefficients(model, p1, p2, quad=quad)
    kappa_q = (coeffs.kappa1, coeffs.kappa2)
    c_s = 0.5 * (coeffs.c1 + coeffs.c2)

    pous = [
        mesh.partition_of_unity(coarse, kq.mean(axis=1), mode=pou_mode)
        for kq in kappa_q
    ]
    s_weight = [
        kq * pou.grad_squared_sum(interior_only=True, quad=quad)
        for kq, pou in zip(kappa_q, pous)
    ]

    stiff_mats = [_stiffness_mats(fine, kq, quad) for kq in kappa_q]
    smass_mats = [
        fem.element_matrices(fine, "mass", w, quad) for w in s_weight
    ]
    cmass_mat = fem.element_matrices(fine, "mass", c_s, quad)

    nodes = (
        np.arange(coarse.nnode) if include_boundary else coarse.interior_nodes
    )

    nfine = fine.nnode
    rows_acc, cols_acc, vals_acc = [], [], []
    col_node, col_rank, col_cont = [], [], []
    per_node = {}
    bmask = fine.boundary_mask
    ncols = 0

    def push(rows, vals, j, k, cont):
        nonlocal ncols
        nz = vals != 0.0
        rows_acc.append(rows[nz])
        vals_acc.append(vals[nz])
        cols_acc.append(np.full(int(nz.sum()), ncols, dtype=np.int64))
        col_node.append(j)
        col_rank.append(k)
        col_cont.append(cont)
        ncols += 1

    for j in nodes:
        nb = mesh.coarse_neighborhood(coarse, j)
        keep_nodes = ~bmask[nb.fine_nodes]
        chi = []
        for pou in pous:
            ids, vals = pou.chi(j)
            full = np.zeros(nfine)
            full[ids] = vals
            chi.append(full[nb.fine_nodes] * keep_nodes)

        if mode == "coupled":
            snap = coupled_snapshots(
                nb, None, None, None,
                quad=quad,
                elem_mats=(stiff_mats[0], stiff_mats[1], cmass_mat),
            )
            m_j = min(n_per_node, snap.dim)
            _, funcs = spectral_decompose(
                snap, None, None, m_j,
                quad=quad,
                elem_mats=(stiff_mats, smass_mats,
                           cmass_mat if spectral_exchange else None),
            )
            npatch = nb.fine_nodes.size
            stacked_rows = np.concatenate(
                [nb.fine_nodes, nb.fine_nodes + nfine]
            )
            for k in range(m_j):
                vals = np.concatenate(
                    [chi[0] * funcs[:npatch, k], chi[1] * funcs[npatch:, k]]
                )
                push(stacked_rows, vals, j, k, 0)
            per_node[int(j)] = m_j
        else:
            m_j = None
            for i in (0, 1):
                snap = uncoupled_snapshots(
                    nb, None, quad=quad, elem_mats=stiff_mats[i]
                )
                m_j = min(n_per_node, snap.dim)
                _, funcs = spectral_decompose(
                    snap, None, None, m_j,
                    quad=quad,
                    elem_mats=([stiff_mats[i]], [smass_mats[i]], None),
                )
                for k in range(m_j):
                    push(
                        nb.fine_nodes + i * nfine,
                        chi[i] * funcs[:, k],
                        j, k, i + 1,
                    )
            per_node[int(j)] = m_j

    if ncols:
        R = sp.coo_matrix(
            (
                np.concatenate(vals_acc),
                (np.concatenate(rows_acc), np.concatenate(cols_acc)),
            ),
            shape=(2 * nfine, ncols),
        ).tocsr()
    else:
        R = sp.csr_matrix((2 * nfine, 0))
    meta = (
        np.array(col_node, dtype=np.int64),
        np.array(col_rank, dtype=np.int64),
        np.array(col_cont, dtype=np.int64),
    )
    if prune and ncols:
        keep = _prune_rank_deficient(R)
        R = R[:, keep].tocsr()
        meta = tuple(a[keep] for a in meta)

    return MultiscaleSpace(
        mode=mode,
        fine=fine,
        coarse=coarse,
        R=R,
        col_node=meta[0],
        col_rank=meta[1],
        col_continuum=meta[2],
        per_node=per_node,
        built_per_node=int(n_per_node),
    )


def coarse_solve_system(A, rhs, R=None):
    """Galerkin-projected solve: (R^T A R) u = R^T rhs, prolonged back to
    the fine DOFs. R=None solves the fine system directly."""
    if R is None:
        return fem.solve_sparse(sp.csr_matrix(A), np.asarray(rhs, dtype=float))
    R = R if sp.issparse(R) else sp.csr_matrix(R)
    Ac = (R.T @ (A @ R)).tocsr()
    uc = fem.solve_sparse(Ac, R.T @ rhs)
    return R @ uc


_BASIS_KEYS = (
    "mode fine_nx fine_ny coarse_n built_per_node indptr indices data "
    "col_node col_rank col_continuum per_node_keys per_node_vals"
).split()


def save_basis(path, space):
    """Serialize the offline space: header metadata plus the columns in
    compressed column-major layout (fine-DOF indices + values)."""
    csc = space.R.tocsc()
    np.savez_compressed(
        path,
        mode=np.array(space.mode),
        fine_nx=space.fine.nx,
        fine_ny=space.fine.ny,
        coarse_n=space.coarse.nx,
        built_per_node=space.built_per_node,
        indptr=csc.indptr,
        indices=csc.indices,
        data=csc.data,
        col_node=space.col_node,
        col_rank=space.col_rank,
        col_continuum=space.col_continuum,
        per_node_keys=np.array(sorted(space.per_node)),
        per_node_vals=np.array(
            [space.per_node[k] for k in sorted(space.per_node)]
        ),
    )


def load_basis(path):
    """Inverse of save_basis; rebuilds the grids from the stored dims."""
    with np.load(path, allow_pickle=False) as z:
        missing = [k for k in _BASIS_KEYS if k not in z]
        if missing:
            raise ValueError(f"{path}: not a basis file (missing {missing})")
        fine = mesh.build_fine_grid(int(z["fine_nx"]), int(z["fine_ny"]))
        coarse = mesh.build_coarse_grid(fine, int(z["coarse_n"]))
        ncols = z["col_node"].size
        R = sp.csc_matrix(
            (z["data"], z["indices"], z["indptr"]),
            shape=(2 * fine.nnode, ncols),
        ).tocsr()
        per_node = dict(
            zip(z["per_node_keys"].tolist(), z["per_node_vals"].tolist())
        )
        return MultiscaleSpace(
            mode=str(z["mode"]),
            fine=fine,
            coarse=coarse,
            R=R,
            col_node=z["col_node"],
            col_rank=z["col_rank"],
            col_continuum=z["col_continuum"],
            per_node=per_node,
            built_per_node=int(z["built_per_node"]),
        )
