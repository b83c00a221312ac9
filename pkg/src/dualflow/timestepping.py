"""Backward-Euler time stepping with Picard linearization for the coupled
dual-continuum system, over the fine space or a projected multiscale space.

Per iteration the frozen-coefficient block system is

    [M/tau + A(k1) + C(b11) + W(c1)      C(b12) - W(c1)    ] [p1]   [M p1_s/tau + F1]
    [      C(b21) - W(c2)         M/tau + A(k2) + C(b22) + W(c2)] [p2] = [M p2_s/tau + F2]

with homogeneous Dirichlet rows eliminated, optionally reduced by a
projection operator R (fine-by-coarse) to R^T B R u = R^T rhs.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem, model as model_mod
from .errors import InsufficientData, PicardNonconvergence

__all__ = [
    "DualPressure",
    "TimeSteppingConfig",
    "PicardTrace",
    "stopping_check",
    "relative_diffs",
    "picard_step",
    "run_simulation",
    "contraction_estimate",
    "relative_l2_error",
    "trace_report",
]


@dataclass
class DualPressure:
    """Nodal pressure heads of both continua at time t."""

    p1: np.ndarray
    p2: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float)
        self.p2 = np.asarray(self.p2, dtype=float)
        if self.p1.shape != self.p2.shape:
            raise ValueError("continua live on the same grid")
        if not (np.isfinite(self.p1).all() and np.isfinite(self.p2).all()):
            raise ValueError("pressure fields must be finite")

    @classmethod
    def zero(cls, grid, t=0.0):
        return cls(np.zeros(grid.nnode), np.zeros(grid.nnode), t)

    def stacked(self):
        return np.concatenate([self.p1, self.p2])

    @classmethod
    def from_stacked(cls, v, t):
        n = v.size // 2
        return cls(v[:n].copy(), v[n:].copy(), t)


@dataclass
class TimeSteppingConfig:
    T: float
    tau: float
    delta0: float = 1.0e-5
    max_iter: int = 50
    initial_guess: str = "previous"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        steps = self.T / self.tau
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ValueError("T must be an integer multiple of tau")
        if self.initial_guess != "previous":
            raise ValueError(f"unknown initial-guess rule {self.initial_guess!r}")

    @property
    def n_steps(self):
        return int(round(self.T / self.tau))


@dataclass
class PicardTrace:
    """Record of one time step's Picard iteration."""

    step: int
    t: float
    alpha: int = 0
    diffs1: list = field(default_factory=list)
    diffs2: list = field(default_factory=list)
    terminal_residual: float = float("nan")
    wall_time: float = 0.0
    converged: bool = False


def relative_diffs(p_new, p_old):
    """Per-continuum relative successive differences in the nodal 2-norm.

    A zero-norm previous iterate gives 0 when the new iterate is also
    zero and inf otherwise (so the stopping rule passes only for
    identically zero updates).
    """
    out = []
    for new, old in ((p_new.p1, p_old.p1), (p_new.p2, p_old.p2)):
        denom = np.linalg.norm(old)
        num = np.linalg.norm(new - old)
        if denom == 0.0:
            out.append(0.0 if num == 0.0 else float("inf"))
        else:
            out.append(num / denom)
    return tuple(out)


def stopping_check(p_new, p_old, delta0):
    """True iff both continua pass the relative successive-difference test."""
    d1, d2 = relative_diffs(p_new, p_old)
    return d1 <= delta0 and d2 <= delta0


def _load_vector(grid, f, quad):
    if np.ndim(f) == 0:
        f = float(f)
    return fem.assemble_load(grid, f, quad)


def _block_system(grid, coeffs, tau, mass, prev, quad):
    A1 = fem.assemble_stiffness(grid, coeffs.kappa1, quad)
    A2 = fem.assemble_stiffness(grid, coeffs.kappa2, quad)
    C11 = fem.assemble_convection(grid, coeffs.b11, quad)
    C12 = fem.assemble_convection(grid, coeffs.b12, quad)
    C21 = fem.assemble_convection(grid, coeffs.b21, quad)
    C22 = fem.assemble_convection(grid, coeffs.b22, quad)
    W1, W1x = fem.assemble_coupling(grid, coeffs.c1, quad)
    W2, W2x = fem.assemble_coupling(grid, coeffs.c2, quad)

    Mt = mass / tau
    B = sp.bmat(
        [
            [Mt + A1 + C11 + W1, C12 + W1x],
            [C21 + W2x, Mt + A2 + C22 + W2],
        ],
        format="csr",
    )
    rhs = np.concatenate(
        [
            mass @ prev.p1 / tau + _load_vector(grid, coeffs.f1, quad),
            mass @ prev.p2 / tau + _load_vector(grid, coeffs.f2, quad),
        ]
    )
    return B, rhs


def _constrained(grid, B, rhs):
    n = grid.nnode
    fixed = np.concatenate([grid.boundary_nodes, grid.boundary_nodes + n])
    return fem.apply_dirichlet(B, fixed, rhs)


def _space_operator(space):
    if space is None:
        return None
    R = getattr(space, "R", space)
    if not sp.issparse(R):
        R = sp.csr_matrix(R)
    return R


def picard_step(state, model, cfg, space=None, quad=None, mass=None):
    """Advance one time step; returns (new DualPressure, PicardTrace).

    `space` is a projection operator mapping reduced DOFs to stacked fine
    DOFs (None solves on the fine grid). Raises PicardNonconvergence,
    carrying the trace, when max_iter is exhausted.
    """
    grid = model.grid
    quad = quad or fem._DEFAULT_QUAD
    if mass is None:
        mass = fem.assemble_mass(grid, 1.0, quad)
    R = _space_operator(space)

    t_new = state.t + cfg.tau
    trace = PicardTrace(step=0, t=t_new)
    tic = time.perf_counter()

    iterate = DualPressure(state.p1.copy(), state.p2.copy(), t_new)
    B = rhs = None
    for n_it in range(1, cfg.max_iter + 1):
        coeffs = model_mod.eval_coefficients(model, iterate.p1, iterate.p2, t_new, quad)
        B, rhs = _block_system(grid, coeffs, cfg.tau, mass, state, quad)
        B, rhs = _constrained(grid, B, rhs)
        if R is None:
            sol = fem.solve_sparse(B, rhs)
        else:
            Bc = (R.T @ (B @ R)).tocsr()
            sol = R @ fem.solve_sparse(Bc, R.T @ rhs)
        new = DualPressure.from_stacked(sol, t_new)
        d1, d2 = relative_diffs(new, iterate)
        trace.diffs1.append(d1)
        trace.diffs2.append(d2)
        iterate = new
        if d1 <= cfg.delta0 and d2 <= cfg.delta0:
            trace.alpha = n_it
            trace.converged = True
            break
    else:
        trace.alpha = cfg.max_iter
        trace.wall_time = time.perf_counter() - tic
        raise PicardNonconvergence(
            f"no convergence in {cfg.max_iter} Picard iterations "
            f"(last diffs {trace.diffs1[-1]:.3e}, {trace.diffs2[-1]:.3e})",
            trace=trace,
        )

    # residual of the fully nonlinear discrete system at the accepted iterate
    coeffs = model_mod.eval_coefficients(model, iterate.p1, iterate.p2, t_new, quad)
    B, rhs = _block_system(grid, coeffs, cfg.tau, mass, state, quad)
    B, rhs = _constrained(grid, B, rhs)
    v = iterate.stacked()
    if R is None:
        res = B @ v - rhs
        scale = np.linalg.norm(rhs)
    else:
        res = R.T @ (B @ v - rhs)
        scale = np.linalg.norm(R.T @ rhs)
    trace.terminal_residual = float(
        np.linalg.norm(res) / scale if scale > 0 else np.linalg.norm(res)
    )
    trace.wall_time = time.perf_counter() - tic
    return iterate, trace


def run_simulation(model, cfg, space=None, quad=None, state=None, callback=None):
    """Run all time steps; returns (DualPressure at T, list of PicardTrace).

    The converged iterate of each step seeds the next one.
    """
    grid = model.grid
    quad = quad or fem._DEFAULT_QUAD
    mass = fem.assemble_mass(grid, 1.0, quad)
    if state is None:
        state = DualPressure.zero(grid)
    traces = []
    for s in range(cfg.n_steps):
        state, trace = picard_step(state, model, cfg, space=space, quad=quad, mass=mass)
        trace.step = s + 1
        traces.append(trace)
        if callback is not None:
            callback(state, trace)
    return state, traces


def contraction_estimate(model, cfg, taus, space=None):
    """Estimated Picard contraction factor for each step size in `taus`.

    Runs the first time step from zero data and takes the geometric mean
    of the successive-difference ratios over the final iterations. A
    terminal difference of (numerically) zero reports 0, the one-solve
    convergence of a linear problem; otherwise at least 3 iterations are
    required.
    """
    grid = model.grid
    out = []
    for tau in taus:
        step_cfg = TimeSteppingConfig(
            T=tau, tau=tau, delta0=cfg.delta0, max_iter=cfg.max_iter
        )
        _, trace = picard_step(DualPressure.zero(grid), model, step_cfg, space=space)
        d = np.maximum(trace.diffs1, trace.diffs2)
        if d[-1] <= 1e-14:
            out.append(0.0)
            continue
        if trace.alpha < 3:
            raise InsufficientData(
                f"tau={tau}: only {trace.alpha} Picard iterations, "
                "need 3 for a contraction estimate"
            )
        d = d[np.isfinite(d) & (d > 0)]  # the first solve from zero data has no scale
        if d.size < 2:
            raise InsufficientData(f"tau={tau}: too few usable difference ratios")
        ratios = d[1:] / d[:-1]
        tail = ratios[-min(3, ratios.size):]
        out.append(float(np.exp(np.mean(np.log(tail)))))
    return out


def relative_l2_error(grid, p, p_ref, quad=None):
    """Relative L2 error in percent between two nodal fields."""
    mass = fem.assemble_mass(grid, 1.0, quad or fem._DEFAULT_QUAD)
    num = fem.mass_norm(mass, np.asarray(p) - np.asarray(p_ref))
    den = fem.mass_norm(mass, np.asarray(p_ref))
    return 100.0 * num / den


def trace_report(traces, header=""):
    """Plain-text run report: one block per step with alpha, the relative
    successive differences and wall time."""
    lines = []
    if header:
        lines.append(header)
    total = 0.0
    for tr in traces:
        total += tr.wall_time
        lines.append(
            f"step {tr.step:3d}  t={tr.t:<8.4g} alpha={tr.alpha:2d}  "
            f"residual={tr.terminal_residual:.3e}  wall={tr.wall_time:.3f}s"
        )
        d1 = " ".join(f"{d:.3e}" for d in tr.diffs1)
        d2 = " ".join(f"{d:.3e}" for d in tr.diffs2)
        lines.append(f"  diff1: {d1}")
        lines.append(f"  diff2: {d2}")
    lines.append(f"total wall time: {total:.3f}s")
    return "\n".join(lines) + "\n"
