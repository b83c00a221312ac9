"""Structured rectangular grids, coarse/fine nesting and partitions of unity.

Node and element numbering is row-major with x fastest, starting at the
lower-left corner. Element connectivity lists the four corners
counterclockwise from the lower-left one, matching the reference element
used by the fem module.
"""

import numpy as np
import scipy.sparse.linalg as spla

from . import fem

__all__ = [
    "StructuredGrid",
    "CoarseGrid",
    "CoarseNeighborhood",
    "PartitionOfUnity",
    "build_fine_grid",
    "build_coarse_grid",
    "coarse_neighborhood",
    "partition_of_unity",
]


class StructuredGrid:
    """Uniform tensor-product grid of nx-by-ny Q1 elements.

    Parameters
    ----------
    nx, ny : int
        Element counts per axis, at least 2 each.
    extent : tuple
        (x0, y0, x1, y1) of the axis-aligned domain, default unit square.
    """

    def __init__(self, nx, ny, extent=(0.0, 0.0, 1.0, 1.0)):
        nx, ny = int(nx), int(ny)
        if nx < 2 or ny < 2:
            raise ValueError("need at least 2 elements per axis")
        x0, y0, x1, y1 = map(float, extent)
        if x1 <= x0 or y1 <= y0:
            raise ValueError("degenerate domain extent")
        self.nx = nx
        self.ny = ny
        self.extent = (x0, y0, x1, y1)
        self.hx = (x1 - x0) / nx
        self.hy = (y1 - y0) / ny
        self.nnode = (nx + 1) * (ny + 1)
        self.nelem = nx * ny

        ix, iy = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
        self.coords = np.column_stack(
            [x0 + ix.ravel() * self.hx, y0 + iy.ravel() * self.hy]
        )

        v0 = (
            np.repeat(np.arange(ny), nx) * (nx + 1)
            + np.tile(np.arange(nx), ny)
        )
        self.conn = np.column_stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1]).astype(
            np.int64
        )

        bmask = np.zeros(self.nnode, dtype=bool)
        allx = np.arange(nx + 1)
        ally = np.arange(ny + 1)
        bmask[self.node_id(allx, 0)] = True
        bmask[self.node_id(allx, ny)] = True
        bmask[self.node_id(0, ally)] = True
        bmask[self.node_id(nx, ally)] = True
        self.boundary_mask = bmask
        self.boundary_nodes = np.where(bmask)[0]
        self.interior_nodes = np.where(~bmask)[0]

    def node_id(self, ix, iy):
        return np.asarray(iy) * (self.nx + 1) + np.asarray(ix)

    def elem_id(self, ex, ey):
        return np.asarray(ey) * self.nx + np.asarray(ex)

    def node_xy(self, nid):
        nid = np.asarray(nid)
        return nid % (self.nx + 1), nid // (self.nx + 1)

    def element_centers(self):
        ex = np.tile(np.arange(self.nx), self.ny)
        ey = np.repeat(np.arange(self.ny), self.nx)
        x0, y0 = self.extent[0], self.extent[1]
        return np.column_stack(
            [x0 + (ex + 0.5) * self.hx, y0 + (ey + 0.5) * self.hy]
        )

    def __repr__(self):
        return f"StructuredGrid({self.nx}x{self.ny})"


class CoarseGrid(StructuredGrid):
    """Coarse grid refined exactly by a fine grid (ratio elements per axis)."""

    def __init__(self, fine, nc):
        nc = int(nc)
        if nc < 2:
            raise ValueError("need at least 2 coarse elements per axis")
        if fine.nx % nc or fine.ny % nc:
            raise ValueError(
                f"fine grid {fine.nx}x{fine.ny} is not divisible by {nc}"
            )
        super().__init__(nc, nc, extent=fine.extent)
        self.fine = fine
        self.ratio_x = fine.nx // nc
        self.ratio_y = fine.ny // nc

    def fine_elems_in(self, ce):
        """Fine element ids inside coarse element ce (row-major block)."""
        cex, cey = ce % self.nx, ce // self.nx
        ex = cex * self.ratio_x + np.arange(self.ratio_x)
        ey = cey * self.ratio_y + np.arange(self.ratio_y)
        EX, EY = np.meshgrid(ex, ey)
        return self.fine.elem_id(EX.ravel(), EY.ravel())

    def coarse_elem_of_fine(self, fe):
        """Coarse element owning each fine element (partition property)."""
        fe = np.asarray(fe)
        fex, fey = fe % self.fine.nx, fe // self.fine.nx
        return self.elem_id(fex // self.ratio_x, fey // self.ratio_y)

    def fine_node_of_coarse_node(self, j):
        cx, cy = self.node_xy(j)
        return self.fine.node_id(cx * self.ratio_x, cy * self.ratio_y)


def build_fine_grid(nx, ny=None, extent=(0.0, 0.0, 1.0, 1.0)):
    """Construct the fine grid (ny defaults to nx)."""
    return StructuredGrid(nx, nx if ny is None else ny, extent=extent)


def build_coarse_grid(fine, nc):
    """Coarse nc-by-nc grid with `fine` as its exact refinement."""
    return CoarseGrid(fine, nc)


class CoarseNeighborhood:
    """Union of the coarse elements sharing one coarse node.

    Attributes
    ----------
    j : int
        The center coarse-node index.
    coarse_elems : ndarray
        Member coarse elements (4 for interior nodes, fewer at the boundary).
    fine_elems : ndarray
        Fine elements covering the neighborhood.
    fine_nodes : ndarray
        All fine nodes of the closed patch, ascending.
    boundary_nodes : ndarray
        Fine nodes on the patch boundary, counterclockwise from the
        lower-left corner (the snapshot indexing order).
    interior_nodes : ndarray
        Remaining patch nodes, ascending.
    """

    def __init__(self, coarse, j):
        nxc = coarse.nx
        if not 0 <= j < coarse.nnode:
            raise ValueError(f"coarse node {j} out of range")
        cx, cy = int(j % (nxc + 1)), int(j // (nxc + 1))
        self.j = int(j)
        self.coarse = coarse

        exs = [e for e in (cx - 1, cx) if 0 <= e < nxc]
        eys = [e for e in (cy - 1, cy) if 0 <= e < coarse.ny]
        self.coarse_elems = np.array(
            [coarse.elem_id(ex, ey) for ey in eys for ex in exs]
        )
        self.fine_elems = np.sort(
            np.concatenate([coarse.fine_elems_in(ce) for ce in self.coarse_elems])
        )

        fine = coarse.fine
        rx, ry = coarse.ratio_x, coarse.ratio_y
        gx0, gx1 = min(exs) * rx, (max(exs) + 1) * rx
        gy0, gy1 = min(eys) * ry, (max(eys) + 1) * ry
        self.node_box = (gx0, gx1, gy0, gy1)

        xs = np.arange(gx0, gx1 + 1)
        ys = np.arange(gy0, gy1 + 1)
        XS, YS = np.meshgrid(xs, ys)
        self.fine_nodes = np.sort(fine.node_id(XS.ravel(), YS.ravel()))

        # perimeter walk: bottom, right, top, left
        bot = [(ix, gy0) for ix in range(gx0, gx1 + 1)]
        rgt = [(gx1, iy) for iy in range(gy0 + 1, gy1 + 1)]
        top = [(ix, gy1) for ix in range(gx1 - 1, gx0 - 1, -1)]
        lft = [(gx0, iy) for iy in range(gy1 - 1, gy0, -1)]
        walk = np.array(bot + rgt + top + lft)
        self.boundary_nodes = fine.node_id(walk[:, 0], walk[:, 1])

        inb = np.isin(self.fine_nodes, self.boundary_nodes)
        self.interior_nodes = self.fine_nodes[~inb]

    @property
    def n_boundary(self):
        return self.boundary_nodes.size

    def local_index(self, global_ids):
        """Positions of global node ids inside the ascending patch list."""
        idx = np.searchsorted(self.fine_nodes, global_ids)
        idx = np.minimum(idx, self.fine_nodes.size - 1)
        if not np.array_equal(self.fine_nodes[idx], np.asarray(global_ids)):
            raise ValueError("node ids outside the neighborhood")
        return idx


def coarse_neighborhood(coarse, j):
    """Neighborhood of coarse node j (see CoarseNeighborhood)."""
    return CoarseNeighborhood(coarse, j)


class PartitionOfUnity:
    """Family of partition-of-unity functions chi_l on the fine grid.

    One instance per continuum: the multiscale variant solves
    -div(kappa grad chi) = 0 on every coarse element with bilinear hat
    boundary data, so the family sums to one at every fine node.
    """

    def __init__(self, coarse, mode, patches):
        self.coarse = coarse
        self.mode = mode
        # per coarse node: (patch fine-node ids ascending, chi values)
        self._patches = patches

    def chi(self, l):
        """(fine node ids, values) of chi_l."""
        return self._patches[l]

    def dense(self, l):
        out = np.zeros(self.coarse.fine.nnode)
        ids, vals = self._patches[l]
        out[ids] = vals
        return out

    def sum_field(self):
        """Sum of all chi_l as a dense nodal field (should be 1 inside)."""
        out = np.zeros(self.coarse.fine.nnode)
        for ids, vals in self._patches:
            out[ids] += vals
        return out

    def grad_squared_sum(self, interior_only=True, quad=None):
        """Sum_l |grad chi_l|^2 at quadrature points, shape (nelem, nq).

        interior_only restricts the sum to interior coarse nodes (the
        spectral-weight convention); pass False to include boundary nodes.
        """
        fine = self.coarse.fine
        quad = quad or fem._DEFAULT_QUAD
        out = np.zeros((fine.nelem, quad.nq))
        nodes = (
            self.coarse.interior_nodes
            if interior_only
            else np.arange(self.coarse.nnode)
        )
        for l in nodes:
            ids, vals = self._patches[l]
            lo, hi = ids.min(), ids.max()
            dense = np.zeros(hi - lo + 1)
            dense[ids - lo] = vals
            # elements fully inside the patch: all four corners covered
            emask = np.zeros(fine.nelem, dtype=bool)
            nb = coarse_neighborhood(self.coarse, l)
            emask[nb.fine_elems] = True
            elems = np.where(emask)[0]
            local = dense[fine.conn[elems] - lo]
            ref = fem._reference_tensors(fine, quad)
            g = np.einsum("qda,ea->eqd", ref["grad"], local)
            out[elems] += (g ** 2).sum(axis=2)
        return out


def partition_of_unity(coarse, kappa, mode="multiscale"):
    """Build the chi family for one continuum.

    Parameters
    ----------
    coarse : CoarseGrid
    kappa : scalar or (nelem,) element field on the fine grid
        Frozen conductivity of the continuum; must be positive.
    mode : {"multiscale", "bilinear"}
    """
    fine = coarse.fine
    kappa_e = np.asarray(kappa, dtype=float)
    if kappa_e.ndim == 0:
        kappa_e = np.full(fine.nelem, float(kappa_e))
    if kappa_e.shape != (fine.nelem,):
        raise ValueError("kappa must be scalar or one value per fine element")
    if kappa_e.min() <= 0:
        raise ValueError("kappa must be strictly positive")
    if mode not in ("multiscale", "bilinear"):
        raise ValueError(f"unknown partition-of-unity mode {mode!r}")

    rx, ry = coarse.ratio_x, coarse.ratio_y
    nxc = coarse.nx

    # chi restricted to one coarse element, for all four corners at once:
    # columns follow the local corner order (ll, lr, ur, ul)
    elem_mats = fem.element_matrices(fine, "stiffness", kappa_e)
    per_elem_chi = {}
    for ce in range(coarse.nelem):
        felems = coarse.fine_elems_in(ce)
        cex, cey = ce % nxc, ce // nxc
        xs = np.arange(cex * rx, (cex + 1) * rx + 1)
        ys = np.arange(cey * ry, (cey + 1) * ry + 1)
        XS, YS = np.meshgrid(xs, ys)
        ids = np.sort(fine.node_id(XS.ravel(), YS.ravel()))
        ix, iy = fine.node_xy(ids)
        s = (ix - xs[0]) / rx
        t = (iy - ys[0]) / ry
        hats = np.column_stack(
            [(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t]
        )
        if mode == "bilinear":
            per_elem_chi[ce] = (ids, hats)
            continue
        onb = (ix == xs[0]) | (ix == xs[-1]) | (iy == ys[0]) | (iy == ys[-1])
        vals = np.array(hats)
        if (~onb).any():
            A = fem.assemble_on_subset(fine, elem_mats, felems, ids)
            Aii = A[~onb][:, ~onb].tocsc()
            Aib = A[~onb][:, onb]
            vals[~onb] = spla.splu(Aii).solve(-(Aib @ hats[onb]))
        per_elem_chi[ce] = (ids, vals)

    patches = []
    for j in range(coarse.nnode):
        nb = coarse_neighborhood(coarse, j)
        acc = {}
        for ce in nb.coarse_elems:
            ids, vals = per_elem_chi[ce]
            cex, cey = ce % nxc, ce // nxc
            cx, cy = j % (nxc + 1), j // (nxc + 1)
            corner = {(0, 0): 0, (1, 0): 1, (1, 1): 2, (0, 1): 3}[
                (cx - cex, cy - cey)
            ]
            for nid, v in zip(ids, vals[:, corner]):
                acc[int(nid)] = v
        ids = np.array(sorted(acc))
        patches.append((ids, np.array([acc[i] for i in ids])))
    return PartitionOfUnity(coarse, mode, patches)
