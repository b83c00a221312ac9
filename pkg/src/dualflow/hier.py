"""Hierarchical solution of parametrized cell problems over dyadic
macrogrids of pressure points.

Pressure points are organized into levels: level 1 anchors get a full
solve in the finest cell space V_L, a level-l point gets only a
correction solved in the coarser space V_{L+1-l}, driven by the residual
of its ancestor's composite solution, and the composite is
u(p) = correction + u(ancestor). All quadrature lives on the finest
mesh; coarse operators are Galerkin projections P^T A_L P through exact
nested prolongation, so each composite satisfies its own-space weak form
to solver precision by construction.

Macrogrid points are kept as integer numerators over 2^L, which makes
level membership, ancestor ties, and table keys exact.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .homogenize import UnitCellMesh, cell_field, _grad_rhs, integrate


__all__ = [
    "MacrogridHierarchy",
    "SpaceLadder",
    "HierEntry",
    "HierSolutionTable",
    "build_hierarchy",
    "build_ladder",
    "hierarchical_cell_solve",
    "full_reference_table",
    "dof_count",
    "convergence_report",
]


@dataclass
class MacrogridHierarchy:
    """Dyadic level decomposition of the macrogrid on [a, b].

    Points are stored as integer numerators r, standing for
    a + r*(b-a)/2^L. levels_1d[l-1] holds R_l; levels_2d[l-1] holds
    R_l x R_l as an (n, 2) integer array. Ancestor maps send each point
    of level >= 2 to the nearest point of any lower level (ties resolved
    toward the smaller coordinate).
    """

    a: float
    b: float
    L: int
    levels_1d: list
    levels_2d: list
    ancestor_1d: dict
    ancestor_2d: dict

    def coord(self, r):
        """Numerator(s) -> physical coordinate(s)."""
        return self.a + np.asarray(r, dtype=float) * (self.b - self.a) / 2**self.L

    def macrogrid(self, param_dim=1):
        """All numerators, levels merged, sorted (1D) or stacked (2D)."""
        if param_dim == 1:
            return np.sort(np.concatenate(self.levels_1d))
        return np.vstack(self.levels_2d)

    def level_sizes(self, param_dim=1):
        levels = self.levels_1d if param_dim == 1 else self.levels_2d
        return [len(s) for s in levels]

    def chain(self, key, param_dim=1):
        """Provenance from a point back to its anchor (inclusive)."""
        anc = self.ancestor_1d if param_dim == 1 else self.ancestor_2d
        out = [key]
        while anc[key] is not None:
            key = anc[key]
            out.append(key)
        return out


def _nearest(cands, point):
    """Nearest candidate row to `point`, ties toward smaller coordinates."""
    c = np.atleast_2d(np.asarray(cands))
    p = np.atleast_1d(point)
    d2 = ((c - p) ** 2).sum(axis=1)
    order = np.lexsort(tuple(c[:, i] for i in reversed(range(c.shape[1]))))
    # first minimum over the lexsorted order is the smallest-coordinate tie
    best = order[np.argmin(d2[order])]
    return c[best]


def build_hierarchy(a, b, L):
    """Level sets R_1 = {a, mid, b}, R_l = odd multiples of (b-a)/2^l,
    their 2D tensor versions, and nearest-lower-level ancestor maps."""
    if not a < b:
        raise ValueError("macrogrid interval needs a < b")
    L = int(L)
    if L < 1:
        raise ValueError("hierarchy depth must be >= 1")
    n = 2**L
    levels_1d = [np.array([0, n // 2, n], dtype=np.int64)]
    for l in range(2, L + 1):
        step = 2 ** (L - l)
        levels_1d.append(np.arange(step, n, 2 * step, dtype=np.int64))
    levels_2d = []
    for R in levels_1d:
        gx, gy = np.meshgrid(R, R, indexing="ij")
        levels_2d.append(np.column_stack([gx.ravel(), gy.ravel()]))

    ancestor_1d = {int(r): None for r in levels_1d[0]}
    ancestor_2d = {(int(x), int(y)): None for x, y in levels_2d[0]}
    lower_1d = levels_1d[0]
    lower_2d = levels_2d[0]
    for l in range(2, L + 1):
        for r in levels_1d[l - 1]:
            ancestor_1d[int(r)] = int(_nearest(lower_1d[:, None], [r])[0])
        for x, y in levels_2d[l - 1]:
            ax, ay = _nearest(lower_2d, [x, y])
            ancestor_2d[(int(x), int(y))] = (int(ax), int(ay))
        lower_1d = np.concatenate([lower_1d, levels_1d[l - 1]])
        lower_2d = np.vstack([lower_2d, levels_2d[l - 1]])
    return MacrogridHierarchy(
        a=float(a), b=float(b), L=L,
        levels_1d=levels_1d, levels_2d=levels_2d,
        ancestor_1d=ancestor_1d, ancestor_2d=ancestor_2d,
    )


class SpaceLadder:
    """Nested periodic cell spaces V_m of resolution 2^m, m = 1..L, with
    exact prolongations onto the finest space."""

    def __init__(self, L):
        L = int(L)
        if L < 1:
            raise ValueError("ladder depth must be >= 1")
        self.L = L
        self.meshes = [UnitCellMesh(2**m) for m in range(1, L + 1)]
        self.to_finest = [
            _periodic_prolongation(2**m, 2**L) for m in range(1, L + 1)
        ]

    @property
    def finest(self):
        return self.meshes[-1]

    def mesh(self, m):
        return self.meshes[m - 1]

    def prolong(self, m):
        """Prolongation V_m -> V_L on unique periodic DOFs (csr)."""
        return self.to_finest[m - 1]


def build_ladder(L):
    return SpaceLadder(L)


def _periodic_prolongation(nc, nf):
    """Bilinear interpolation between periodic unique-DOF grids, nc | nf."""
    if nf % nc:
        raise ValueError("fine resolution must be a multiple of the coarse")
    s = nf // nc
    ix = np.tile(np.arange(nf), nf)
    iy = np.repeat(np.arange(nf), nf)
    cx, tx = ix // s, (ix % s) / s
    cy, ty = iy // s, (iy % s) / s
    rows, cols, vals = [], [], []
    for dx, wx in ((0, 1 - tx), (1, tx)):
        for dy, wy in ((0, 1 - ty), (1, ty)):
            w = wx * wy
            nz = w > 0
            rows.append(np.flatnonzero(nz))
            cols.append(((cy[nz] + dy) % nc) * nc + (cx[nz] + dx) % nc)
            vals.append(w[nz])
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nf * nf, nc * nc),
    )
    P.sum_duplicates()
    return P.tocsr()


@dataclass
class HierEntry:
    """One macrogrid point's stored solution (finest-mesh representation)."""

    key: object
    point: object
    level: int
    space_level: int
    solution: np.ndarray
    residual: float
    ancestor: object
    chain: list


@dataclass
class HierSolutionTable:
    kind: str
    param_dim: int
    hierarchy: MacrogridHierarchy
    entries: dict = field(default_factory=dict)

    def solution(self, key):
        return self.entries[key].solution

    def __len__(self):
        return len(self.entries)


def _assemble_point(cell, k, Q, point, kind, direction, quad, mean_correct):
    """Finest-mesh periodic operator and load for one macrogrid point."""
    if kind == "N":
        k_q = cell_field(cell, lambda y: k(y, point), quad)
        rhs = _grad_rhs(cell, k_q, direction - 1, quad)
    else:
        p1, p2 = point
        k_q = cell_field(cell, lambda y: k(y, p1, p2), quad)
        Q_q = cell_field(cell, lambda y: Q(y, p1, p2), quad)
        qmean = integrate(cell, Q_q, quad)
        if mean_correct:
            Q_q = Q_q - qmean
        elif abs(qmean) > 1e-12 * max(1.0, np.abs(Q_q).max()):
            raise ValueError(
                f"Q must have zero cell average at macro point {point}; "
                f"measured mean {qmean:.6e}"
            )
        rhs = np.asarray(
            cell.P.T @ fem.assemble_load(cell.grid, Q_q, quad)
        ).ravel()
    if k_q.min() <= 0:
        raise ValueError("cell conductivity must be strictly positive")
    A = cell.reduce(fem.assemble_stiffness(cell.grid, k_q, quad))
    return A, rhs


def _pinned_solve(A, rhs):
    A_pin, rhs_pin = fem.apply_dirichlet(A, np.array([0]), rhs)
    return fem.solve_sparse(A_pin, rhs_pin)


def hierarchical_cell_solve(
    k, hierarchy, ladder, kind="N", direction=1, Q=None, quad=None,
    mean_correct=False,
):
    """Solve a parametrized cell problem over the whole macrogrid, anchors
    fully in V_L and level-l points as V_{L+1-l} corrections.

    kind="N": corrector problems with k(y, p) over the 1D macrogrid.
    kind="M": source problems with k(y, p1, p2), Q(y, p1, p2) over the 2D
    macrogrid. Solutions are returned as mean-zero unique-DOF vectors of
    the finest space.
    """
    if kind not in ("N", "M"):
        raise ValueError("kind must be 'N' or 'M'")
    if kind == "M" and Q is None:
        raise ValueError("kind='M' needs the source callable Q")
    if ladder.L != hierarchy.L:
        raise ValueError(
            f"ladder depth {ladder.L} != hierarchy depth {hierarchy.L}"
        )
    quad = quad or fem._DEFAULT_QUAD
    param_dim = 1 if kind == "N" else 2
    cell = ladder.finest
    anc_map = hierarchy.ancestor_1d if param_dim == 1 else hierarchy.ancestor_2d
    levels = hierarchy.levels_1d if param_dim == 1 else hierarchy.levels_2d

    table = HierSolutionTable(kind=kind, param_dim=param_dim,
                              hierarchy=hierarchy)
    for l, level_pts in enumerate(levels, start=1):
        m = hierarchy.L + 1 - l
        P = ladder.prolong(m)
        for row in np.atleast_2d(level_pts if param_dim == 2
                                 else level_pts[:, None]):
            key = int(row[0]) if param_dim == 1 else (int(row[0]), int(row[1]))
            point = (float(hierarchy.coord(row[0])) if param_dim == 1
                     else tuple(hierarchy.coord(row)))
            A, rhs = _assemble_point(
                cell, k, Q, point, kind, direction, quad, mean_correct
            )
            if l == 1:
                u = _pinned_solve(A, rhs.copy())
            else:
                anc = anc_map[key]
                if anc not in table.entries:
                    raise RuntimeError(
                        f"ancestor {anc} of {key} missing from the table"
                    )
                u_anc = table.entries[anc].solution
                rhs_c = np.asarray(P.T @ (rhs - A @ u_anc)).ravel()
                A_c = (P.T @ (A @ P)).tocsr()
                u = u_anc + P @ _pinned_solve(A_c, rhs_c)
            u = cell.subtract_mean(u)
            r_own = np.asarray(P.T @ (rhs - A @ u)).ravel() if l > 1 \
                else rhs - A @ u
            r_own[0] = 0.0  # pinned row carries the gauge, not the physics
            scale = max(np.linalg.norm(np.asarray(P.T @ rhs).ravel())
                        if l > 1 else np.linalg.norm(rhs), 1e-300)
            table.entries[key] = HierEntry(
                key=key, point=point, level=l, space_level=m,
                solution=u, residual=float(np.linalg.norm(r_own) / scale),
                ancestor=anc_map[key], chain=hierarchy.chain(key, param_dim),
            )
    return table


def full_reference_table(
    k, hierarchy, ladder, kind="N", direction=1, Q=None, quad=None,
    mean_correct=False,
):
    """Every macrogrid point solved fully in the finest space V_L."""
    quad = quad or fem._DEFAULT_QUAD
    param_dim = 1 if kind == "N" else 2
    cell = ladder.finest
    levels = hierarchy.levels_1d if param_dim == 1 else hierarchy.levels_2d
    table = HierSolutionTable(kind=kind, param_dim=param_dim,
                              hierarchy=hierarchy)
    for l, level_pts in enumerate(levels, start=1):
        for row in np.atleast_2d(level_pts if param_dim == 2
                                 else level_pts[:, None]):
            key = int(row[0]) if param_dim == 1 else (int(row[0]), int(row[1]))
            point = (float(hierarchy.coord(row[0])) if param_dim == 1
                     else tuple(hierarchy.coord(row)))
            A, rhs = _assemble_point(
                cell, k, Q, point, kind, direction, quad, mean_correct
            )
            u = cell.subtract_mean(_pinned_solve(A, rhs.copy()))
            r = rhs - A @ u
            r[0] = 0.0
            table.entries[key] = HierEntry(
                key=key, point=point, level=l, space_level=hierarchy.L,
                solution=u,
                residual=float(np.linalg.norm(r)
                               / max(np.linalg.norm(rhs), 1e-300)),
                ancestor=None, chain=[key],
            )
    return table


def dof_count(hierarchy, ladder, mode="hierarchical", param_dim=1):
    """Stored cell unknowns: hierarchical = sum_l |S^l| * dim(V_{L+1-l}),
    full = |U| * dim(V_L), with dim(V_m) = (2^m)^2 periodic DOFs."""
    if mode not in ("hierarchical", "full"):
        raise ValueError("mode must be 'hierarchical' or 'full'")
    sizes = hierarchy.level_sizes(param_dim)
    L = hierarchy.L
    if mode == "full":
        return sum(sizes) * 4**L
    return sum(n * 4 ** (L + 1 - l) for l, n in enumerate(sizes, start=1))


def convergence_report(table, reference, ladder):
    """Per-level max gradient-seminorm error of the composites against
    full finest-space solves, and the fitted constant of
    err(l) <= C * l * 2^{-L}."""
    if table.param_dim != reference.param_dim or \
            set(table.entries) != set(reference.entries):
        raise ValueError("tables cover different macrogrids")
    cell = ladder.finest
    A1 = cell.reduce(fem.assemble_stiffness(cell.grid, 1.0))
    L = table.hierarchy.L
    errs = {}
    for key, ent in table.entries.items():
        d = ent.solution - reference.entries[key].solution
        e = float(np.sqrt(max(d @ (A1 @ d), 0.0)))
        errs[ent.level] = max(errs.get(ent.level, 0.0), e)
    levels = sorted(errs)
    fitted = max(errs[l] / (l * 2.0**-L) for l in levels)
    return {
        "levels": levels,
        "max_error": [errs[l] for l in levels],
        "bound_shape": [l * 2.0**-L for l in levels],
        "fitted_C": fitted,
    }
