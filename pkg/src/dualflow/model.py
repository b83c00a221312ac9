"""Coefficient models: channelized conductivity fields, the standard test
problem, and pointwise evaluation of the frozen (linearized) coefficients.

Reduced-system conventions: all four convection vectors already include
their scalar prefactors, and the cross blocks carry their signs inside the
vectors, so assembly is always a plain sum of +b.grad(p) terms.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fem, mesh

__all__ = [
    "ChannelFieldSpec",
    "CoefficientModel",
    "FrozenCoefficients",
    "CellCoefficients",
    "DEFAULT_CHANNELS",
    "channelized_field",
    "channel_fraction",
    "test_problem",
    "eval_coefficients",
    "save_raster",
    "load_raster",
]


# Default channel layout, in 1/128 cell units: long thin strips (widths of
# 2-3 cells) crossing many coarse blocks, horizontal and vertical mixed.
# All strips stay at least one coarse block away from the domain boundary;
# channels that touch it are poorly served by interior-node coarse spaces
# and stall the multiscale convergence.
_CELL = 1.0 / 128.0
_DEFAULT_RECTS = tuple(
    (x0 * _CELL, y0 * _CELL, x1 * _CELL, y1 * _CELL)
    for (x0, y0, x1, y1) in [
        (8, 30, 120, 32),
        (16, 64, 104, 67),
        (24, 90, 116, 92),
        (40, 8, 42, 100),
        (76, 40, 79, 120),
        (104, 16, 106, 88),
    ]
)


@dataclass(frozen=True)
class ChannelFieldSpec:
    """Piecewise-constant field: `background` outside the axis-aligned
    `rectangles` (in unit-square coordinates), `channel` inside."""

    background: float
    channel: float
    rectangles: tuple = _DEFAULT_RECTS
    resolution: int = 128

    def __post_init__(self):
        if not self.background > 0:
            raise ValueError("background value must be positive")
        if self.channel < self.background:
            raise ValueError("channel value must be >= background")
        for r in self.rectangles:
            x0, y0, x1, y1 = r
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ValueError(f"rectangle {r} outside the unit square")


DEFAULT_CHANNELS = _DEFAULT_RECTS


def channelized_field(spec, grid=None):
    """Element field on the fine grid from a ChannelFieldSpec.

    Deterministic: an element belongs to a channel iff its center lies in
    one of the rectangles.
    """
    if grid is None:
        grid = mesh.build_fine_grid(spec.resolution)
    centers = grid.element_centers()
    out = np.full(grid.nelem, float(spec.background))
    for x0, y0, x1, y1 in spec.rectangles:
        inside = (
            (centers[:, 0] >= x0)
            & (centers[:, 0] <= x1)
            & (centers[:, 1] >= y0)
            & (centers[:, 1] <= y1)
        )
        out[inside] = spec.channel
    return out


def channel_fraction(spec, grid=None):
    """Area fraction covered by channel elements (for run reports)."""
    f = channelized_field(spec, grid)
    return float((f == spec.channel).sum()) / f.size


@dataclass
class CellCoefficients:
    """Cell-scale coefficients k_j(y, p) and Q_j(y, p1, p2) on the unit
    cell, with optional shape factor zeta (transfer law Q = zeta*k2*(dp))."""

    k1: object
    k2: object
    Q1: object = None
    Q2: object = None
    zeta: float = None

    def __post_init__(self):
        if self.zeta is not None and self.Q1 is None:
            zeta, k2 = self.zeta, self.k2
            self.Q1 = lambda y, p1, p2: zeta * k2(y, p2) * (p2 - p1)
            self.Q2 = lambda y, p1, p2: -zeta * k2(y, p2) * (p2 - p1)


@dataclass
class CoefficientModel:
    """Problem coefficients for the dual-continuum reduced system.

    a1, a2 are element fields (the pressure-free conductivity factors);
    kappa_i(x, p) = a_i(x) * pressure_factor(p). The remaining laws are
    nodal callables of the pressure iterate.
    """

    grid: object
    a1: np.ndarray
    a2: np.ndarray
    pressure_factor: object = field(default=lambda p: 1.0 / (1.0 + np.abs(p)))
    convection_scale: float = 30.0
    transfer_scale: float = 1.0e5
    source_value: float = 1.0
    cell: CellCoefficients = None

    def kappa_bounds(self, p_max):
        """(lower, upper) conductivity bounds for iterates with |p| <= p_max."""
        lo = min(self.a1.min(), self.a2.min()) / (1.0 + float(p_max))
        hi = max(self.a1.max(), self.a2.max())
        return lo, hi

    def source(self, i, t):
        return self.source_value


@dataclass
class FrozenCoefficients:
    """Coefficients evaluated at a fixed iterate, ready for assembly."""

    kappa1: np.ndarray  # (nelem, nq)
    kappa2: np.ndarray
    b11: np.ndarray  # nodal vectors (nnode, 2), prefactors included
    b12: np.ndarray
    b21: np.ndarray
    b22: np.ndarray
    c1: np.ndarray  # nodal (nnode,)
    c2: np.ndarray
    f1: object
    f2: object


def test_problem(nx=128, a1=None, a2=None):
    """Standard channelized test configuration on an nx-by-nx fine grid.

    kappa_i = a_i(x)/(1+|p_i|) with a1 = 10 (background) / 1e5 (channels)
    and a2 = 1 / 10 on a shared channel layout; convection vectors
    30*(p1, p1) on the p1 blocks and 30*(-p2, -p2) on the p2 blocks;
    transfer c_i = 1e5/(1+|p_i|); unit source; zero initial and boundary
    data (imposed by the solver, not stored here).
    """
    grid = mesh.build_fine_grid(nx)
    if a1 is None:
        a1 = channelized_field(
            ChannelFieldSpec(background=10.0, channel=1.0e5, resolution=nx), grid
        )
    if a2 is None:
        a2 = channelized_field(
            ChannelFieldSpec(background=1.0, channel=10.0, resolution=nx), grid
        )
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    if a1.shape != (grid.nelem,) or a2.shape != (grid.nelem,):
        raise ValueError("a1/a2 must hold one value per fine element")
    return CoefficientModel(grid=grid, a1=a1, a2=a2)


def eval_coefficients(model, p1, p2, t=0.0, quad=None):
    """Freeze all coefficients at the iterate (p1, p2).

    kappa_i is evaluated as the element factor a_i times the nodal
    pressure factor interpolated to quadrature points; convection and
    transfer laws are evaluated nodally.
    """
    grid = model.grid
    quad = quad or fem._DEFAULT_QUAD
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != (grid.nnode,) or p2.shape != (grid.nnode,):
        raise ValueError("pressure fields must be nodal on the model grid")
    if not (np.isfinite(p1).all() and np.isfinite(p2).all()):
        raise ValueError("pressure fields contain NaN or infinite entries")

    fac1 = fem.interpolate_to_quad(grid, model.pressure_factor(p1), quad)
    fac2 = fem.interpolate_to_quad(grid, model.pressure_factor(p2), quad)
    kappa1 = model.a1[:, None] * fac1
    kappa2 = model.a2[:, None] * fac2

    s = model.convection_scale
    b_self_1 = s * np.column_stack([p1, p1])
    b_cross = s * np.column_stack([-p2, -p2])
    c1 = model.transfer_scale * model.pressure_factor(p1)
    c2 = model.transfer_scale * model.pressure_factor(p2)

    return FrozenCoefficients(
        kappa1=kappa1,
        kappa2=kappa2,
        b11=b_self_1,
        b12=b_cross,
        b21=b_self_1.copy(),
        b22=b_cross.copy(),
        c1=c1,
        c2=c2,
        f1=model.source(1, t),
        f2=model.source(2, t),
    )


def save_raster(path, values, shape):
    """Write a raster file: header `nx ny`, then nx*ny values row-major
    from the bottom row (the grid's native node/element ordering)."""
    nx, ny = int(shape[0]), int(shape[1])
    values = np.asarray(values, dtype=float).ravel()
    if values.size != nx * ny:
        raise ValueError(f"expected {nx * ny} values, got {values.size}")
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny}\n")
        for iy in range(ny):
            row = values[iy * nx : (iy + 1) * nx]
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_raster(path):
    """Read a raster file; returns (values row-major from bottom, (nx, ny))."""
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing raster header")
    nx, ny = int(tokens[0]), int(tokens[1])
    vals = np.array([float(v) for v in tokens[2:]])
    if vals.size != nx * ny:
        raise ValueError(
            f"{path}: header promises {nx * ny} values, found {vals.size}"
        )
    return vals, (nx, ny)
