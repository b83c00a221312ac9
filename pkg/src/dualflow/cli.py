"""Experiment runner: simulation, error tables, cell-problem utilities,
field generation, and kernel benchmarks.

Heavy imports happen inside the handlers so `--help` stays instant and
`--threads` can cap the BLAS pools before NumPy loads. Exit codes:
0 success, 2 configuration/validation problem, 3 numerical failure.
"""

import argparse
import configparser
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

PAPER_DIMS = (900, 1800, 2700, 3600, 4500)


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    fine_nx: int = 128
    coarse_n: int = 16
    mode: str = "coupled"  # fine | coupled | uncoupled
    dims: tuple = PAPER_DIMS
    T: float = 2.0
    tau: float = 0.1
    delta0: float = 1e-5
    max_iter: int = 50
    out: str = "out"
    a1_file: str = None
    a2_file: str = None
    seed: int = 0  # reserved; nothing stochastic runs by default

    def validate(self):
        if self.mode not in ("fine", "coupled", "uncoupled"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.fine_nx < 2 or self.coarse_n < 2:
            raise ConfigError("grid sizes must be at least 2")
        if self.fine_nx % self.coarse_n:
            raise ConfigError(
                f"coarse grid {self.coarse_n} does not divide fine grid "
                f"{self.fine_nx}"
            )
        if self.T <= 0 or self.tau <= 0 or self.delta0 <= 0:
            raise ConfigError("T, tau, delta0 must be positive")
        for f in (self.a1_file, self.a2_file):
            if f is not None and not os.path.exists(f):
                raise ConfigError(f"field file not found: {f}")
        if self.mode != "fine" and not self.dims:
            raise ConfigError("multiscale runs need at least one dim")
        return self


_CONFIG_KEYS = {
    "grid": {"fine", "coarse"},
    "time": {"t", "tau", "delta0", "max_iter"},
    "run": {"mode", "dims", "out", "seed"},
    "model": {"a1", "a2"},
}


def load_config(path, overrides=None):
    """INI-style config: sections [grid], [time], [run], [model]."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in cp.sections():
        if section not in _CONFIG_KEYS:
            raise ConfigError(
                f"unknown section [{section}] in {path}; expected one of "
                + ", ".join(f"[{s}]" for s in _CONFIG_KEYS)
            )
        for key in cp.options(section):
            if key not in _CONFIG_KEYS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}] of {path}"
                )
    cfg = ExperimentConfig()
    try:
        if cp.has_section("grid"):
            cfg.fine_nx = cp.getint("grid", "fine", fallback=cfg.fine_nx)
            cfg.coarse_n = cp.getint("grid", "coarse", fallback=cfg.coarse_n)
        if cp.has_section("time"):
            cfg.T = cp.getfloat("time", "T", fallback=cfg.T)
            cfg.tau = cp.getfloat("time", "tau", fallback=cfg.tau)
            cfg.delta0 = cp.getfloat("time", "delta0", fallback=cfg.delta0)
            cfg.max_iter = cp.getint("time", "max_iter", fallback=cfg.max_iter)
        if cp.has_section("run"):
            cfg.mode = cp.get("run", "mode", fallback=cfg.mode)
            dims = cp.get("run", "dims", fallback=None)
            if dims is not None:
                cfg.dims = tuple(int(d) for d in dims.replace(",", " ").split())
            cfg.out = cp.get("run", "out", fallback=cfg.out)
            cfg.seed = cp.getint("run", "seed", fallback=cfg.seed)
        if cp.has_section("model"):
            cfg.a1_file = cp.get("model", "a1", fallback=None)
            cfg.a2_file = cp.get("model", "a2", fallback=None)
    except ValueError as exc:
        raise ConfigError(f"bad value in {path}: {exc}") from exc
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg.validate()


@dataclass
class ReportRow:
    mode: str
    dim: int
    err_p1_percent: float
    err_p2_percent: float
    iterations: list
    wall_time: float


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)

    def to_csv(self, path):
        """Deterministic CSV: wall time stays out (it lives in the
        manifest), everything else is formatted with fixed precision."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "dim", "err_p1_percent", "err_p2_percent",
                        "picard_iterations"])
            for r in self.rows:
                w.writerow([
                    r.mode, r.dim,
                    f"{r.err_p1_percent:.6f}", f"{r.err_p2_percent:.6f}",
                    ";".join(str(a) for a in r.iterations),
                ])


def relative_l2_error(grid, p_ms, p_ref):
    """Percent relative L2 (mass-norm) error per continuum for stacked or
    per-continuum nodal fields."""
    from . import timestepping as ts
    return (
        ts.relative_l2_error(grid, p_ms.p1, p_ref.p1),
        ts.relative_l2_error(grid, p_ms.p2, p_ref.p2),
    )


def export_field(values, path, fmt="raster-text", shape=None, spacing=None,
                 name="field"):
    """Write a nodal/element scalar field.

    raster-text: the plain-text raster format (header "nx ny", rows from
    the bottom). legacy-structured-points: ASCII VTK volume readable by
    standard viewers. Both use repr-exact floats, so identical data gives
    identical bytes.
    """
    from . import model as mdl
    if shape is None:
        raise ConfigError("export_field needs the field shape (nx, ny)")
    nx, ny = int(shape[0]), int(shape[1])
    if fmt == "raster-text":
        mdl.save_raster(path, values, (nx, ny))
        return path
    if fmt == "legacy-structured-points":
        import numpy as np
        vals = np.asarray(values, dtype=float).ravel()
        if vals.size != nx * ny:
            raise ConfigError(f"expected {nx * ny} values, got {vals.size}")
        sx, sy = spacing if spacing is not None else (1.0, 1.0)
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write(f"{name}\n")
            fh.write("ASCII\n")
            fh.write("DATASET STRUCTURED_POINTS\n")
            fh.write(f"DIMENSIONS {nx} {ny} 1\n")
            fh.write("ORIGIN 0 0 0\n")
            fh.write(f"SPACING {sx:.17g} {sy:.17g} 1\n")
            fh.write(f"POINT_DATA {nx * ny}\n")
            fh.write(f"SCALARS {name} double 1\n")
            fh.write("LOOKUP_TABLE default\n")
            for v in vals:
                fh.write(f"{v:.17g}\n")
        return path
    raise ConfigError(f"unknown export format {fmt!r}")


def _dim_to_bpn(dim, n_nodes, components):
    per = n_nodes * components
    if dim % per:
        raise ConfigError(
            f"dim {dim} is not a multiple of nodes*components = {per}"
        )
    bpn = dim // per
    if bpn < 1:
        raise ConfigError(f"dim {dim} keeps no basis functions per node")
    return bpn


def _build_model(cfg):
    from . import model as mdl
    a1 = a2 = None
    if cfg.a1_file:
        vals, shape = mdl.load_raster(cfg.a1_file)
        if shape != (cfg.fine_nx, cfg.fine_nx):
            raise ConfigError(
                f"{cfg.a1_file}: raster {shape} does not match the "
                f"{cfg.fine_nx}^2 element grid"
            )
        a1 = vals
    if cfg.a2_file:
        vals, shape = mdl.load_raster(cfg.a2_file)
        if shape != (cfg.fine_nx, cfg.fine_nx):
            raise ConfigError(
                f"{cfg.a2_file}: raster {shape} does not match the "
                f"{cfg.fine_nx}^2 element grid"
            )
        a2 = vals
    return mdl.test_problem(nx=cfg.fine_nx, a1=a1, a2=a2)


def run_experiment(cfg, log=print):
    """Fine reference once, then every requested multiscale configuration.

    Writes report.csv, final-state rasters, and manifest.json into
    cfg.out; returns the ErrorReport.
    """
    import numpy as np
    from . import gmsfem, mesh, timestepping as ts

    os.makedirs(cfg.out, exist_ok=True)
    model = _build_model(cfg)
    grid = model.grid
    tcfg = ts.TimeSteppingConfig(T=cfg.T, tau=cfg.tau, delta0=cfg.delta0,
                                 max_iter=cfg.max_iter)
    report = ErrorReport()
    manifest = {"config": asdict(cfg), "stages": []}
    nshape = (grid.nx + 1, grid.ny + 1)

    def stage(name, fn):
        t0 = time.perf_counter()
        log(f"[{name}] ...")
        out = fn()
        dt = time.perf_counter() - t0
        manifest["stages"].append({"name": name, "seconds": round(dt, 3)})
        log(f"[{name}] done in {dt:.1f}s")
        return out, dt

    (p_fine, fine_traces), fine_wall = stage(
        "fine", lambda: ts.run_simulation(model, tcfg)
    )
    n_int = int((~grid.boundary_mask).sum())
    report.rows.append(ReportRow(
        mode="fine", dim=2 * n_int, err_p1_percent=0.0, err_p2_percent=0.0,
        iterations=[tr.alpha for tr in fine_traces], wall_time=fine_wall,
    ))
    export_field(p_fine.p1, os.path.join(cfg.out, "p1_fine.txt"),
                 shape=nshape)
    export_field(p_fine.p2, os.path.join(cfg.out, "p2_fine.txt"),
                 shape=nshape)

    if cfg.mode != "fine":
        coarse = mesh.build_coarse_grid(grid, cfg.coarse_n)
        probe = (cfg.coarse_n - 1) ** 2
        components = 1 if cfg.mode == "coupled" else 2
        bpns = [_dim_to_bpn(d, probe, components) for d in cfg.dims]
        space_full, _ = stage(
            f"offline-{cfg.mode}",
            lambda: gmsfem.build_multiscale_space(
                model, coarse, cfg.mode, max(bpns)
            ),
        )
        for dim, bpn in zip(cfg.dims, bpns):
            space = space_full.select(bpn)
            if space.dim != dim:
                raise ConfigError(
                    f"requested dim {dim} but the offline space provides "
                    f"{space.dim} (rank-deficient neighborhoods?)"
                )
            (pair, traces), wall = stage(
                f"{cfg.mode}-{dim}",
                lambda space=space: ts.run_simulation(model, tcfg, space=space),
            )
            e1, e2 = relative_l2_error(grid, pair, p_fine)
            report.rows.append(ReportRow(
                mode=cfg.mode, dim=dim, err_p1_percent=e1, err_p2_percent=e2,
                iterations=[tr.alpha for tr in traces], wall_time=wall,
            ))
            export_field(
                pair.p1, os.path.join(cfg.out, f"p1_{cfg.mode}_{dim}.txt"),
                shape=nshape)
            export_field(
                pair.p2, os.path.join(cfg.out, f"p2_{cfg.mode}_{dim}.txt"),
                shape=nshape)
            log(f"  dim {dim}: p1 {e1:.3f}%  p2 {e2:.3f}%")

    report.to_csv(os.path.join(cfg.out, "report.csv"))
    from . import __version__, kernels
    manifest["package_version"] = __version__
    manifest["kernel_backend"] = kernels.BACKEND
    manifest["rows"] = [asdict(r) for r in report.rows]
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return report


def _apply_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _cmd_simulate(args):
    overrides = {
        "mode": args.mode,
        "out": args.out,
        "dims": tuple(args.dims) if args.dims else None,
    }
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = ExperimentConfig()
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        cfg.validate()
    run_experiment(cfg)
    return EXIT_OK


def _cmd_table(args):
    """Error-table study: fine reference plus coupled and uncoupled sweeps,
    with the trend/band checks (digit-level table values are out of scope
    because the conductivity layout is a modeling choice)."""
    out = args.out or "table_out"
    dims = tuple(args.dims) if args.dims else PAPER_DIMS
    base = load_config(args.config, {}) if args.config else \
        ExperimentConfig().validate()
    rows = {}
    for mode in ("coupled", "uncoupled"):
        cfg = ExperimentConfig(**{**asdict(base), "mode": mode,
                                  "dims": dims,
                                  "out": os.path.join(out, mode)})
        cfg.validate()
        rep = run_experiment(cfg)
        rows[mode] = [r for r in rep.rows if r.mode == mode]

    print(f"\n{'mode':<10} {'dim':>6} {'err p1 %':>10} {'err p2 %':>10}")
    for mode in ("coupled", "uncoupled"):
        for r in rows[mode]:
            print(f"{r.mode:<10} {r.dim:>6} {r.err_p1_percent:>10.3f} "
                  f"{r.err_p2_percent:>10.3f}")

    checks = []
    cp = rows["coupled"]
    up = {r.dim: r for r in rows["uncoupled"]}
    dec = all(
        cp[i + 1].err_p1_percent < cp[i].err_p1_percent
        and cp[i + 1].err_p2_percent < cp[i].err_p2_percent
        for i in range(len(cp) - 1)
    )
    checks.append(("coupled errors strictly decrease with dim", dec))
    if set(up) >= {r.dim for r in cp}:
        cmp_ok = all(
            r.err_p1_percent <= up[r.dim].err_p1_percent
            and r.err_p2_percent <= up[r.dim].err_p2_percent
            for r in cp if r.dim >= 1800
        )
        checks.append(("coupled <= uncoupled for dim >= 1800", cmp_ok))
    last = max(r.dim for r in cp)
    band = (
        max(cp[-1].err_p1_percent, cp[-1].err_p2_percent) <= 0.7
        and max(up[last].err_p1_percent, up[last].err_p2_percent) <= 1.2
    )
    checks.append((f"error bands at dim {last} (0.7% / 1.2%)", band))
    ok = True
    for label, passed in checks:
        print(f"[{'PASS' if passed else 'FAIL'}] {label}")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_SOLVER


def _cmd_gen_field(args):
    from . import model as mdl
    rects = []
    if args.rects:
        for part in args.rects.split(";"):
            vals = tuple(float(v) for v in part.replace(",", " ").split())
            if len(vals) != 4:
                raise ConfigError(f"rectangle needs 4 numbers, got {part!r}")
            rects.append(vals)
    kwargs = {"rectangles": tuple(rects)} if rects else {}
    spec = mdl.ChannelFieldSpec(
        background=args.background, channel=args.channel,
        resolution=args.resolution, **kwargs,
    )
    vals = mdl.channelized_field(spec)
    mdl.save_raster(args.out, vals, (args.resolution, args.resolution))
    frac = mdl.channel_fraction(spec)
    print(f"wrote {args.out} ({args.resolution}x{args.resolution} elements, "
          f"channel fraction {frac:.4f})")
    return EXIT_OK


def _cmd_homogenize(args):
    import numpy as np
    from . import homogenize as hz, model as mdl

    cell = hz.UnitCellMesh(args.cell_n)
    if args.kind == "laminate":
        k1 = k2 = hz.laminate_coefficient(args.k_low, args.k_high)
        kp1 = lambda y, p: k1(y) / (1.0 + abs(p))
        kp2 = lambda y, p: k2(y) / (1.0 + abs(p))
    else:
        ks = hz.sine_coefficient()
        kp1 = lambda y, p: ks(y) / (1.0 + abs(p))
        kp2 = lambda y, p: 2.0 * ks(y) / (1.0 + abs(p))
    coeffs = mdl.CellCoefficients(k1=kp1, k2=kp2, zeta=args.zeta)

    points = []
    for part in args.points.split(";"):
        vals = tuple(float(v) for v in part.replace(",", " ").split())
        if len(vals) != 2:
            raise ConfigError(f"macro point needs 2 numbers, got {part!r}")
        points.append(vals)
    records = []
    for p in points:
        rec = hz.homogenized_coefficients(
            cell, coeffs, p, mean_correct=True,
            p_range=(args.p_min, args.p_max),
        )
        records.append(rec)
        print(f"p = {p}: K1 diag {rec.K1[0,0]:.6g}/{rec.K1[1,1]:.6g}  "
              f"K2 diag {rec.K2[0,0]:.6g}/{rec.K2[1,1]:.6g}  "
              f"c {rec.c1:.4g}/{rec.c2:.4g}")
    if args.out:
        hz.write_coefficient_table(args.out, records)
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_hier_bench(args):
    import numpy as np
    from . import hier

    # pressure modulates only the oscillation, so correctors move with p
    def kp(y, p):
        y = np.atleast_2d(y)
        return 2.0 + np.sin(2 * np.pi * y[:, 0]) / (1.0 + p)

    print(f"{'L':>2} {'level':>5} {'points':>7} {'space dim':>9} "
          f"{'max err':>12} {'dof hier':>9} {'dof full':>9} {'wall s':>7}")
    for L in args.levels:
        t0 = time.perf_counter()
        hh = hier.build_hierarchy(args.p_min, args.p_max, L)
        ladder = hier.build_ladder(L)
        tab = hier.hierarchical_cell_solve(kp, hh, ladder, kind="N",
                                           direction=1)
        ref = hier.full_reference_table(kp, hh, ladder, kind="N", direction=1)
        rep = hier.convergence_report(tab, ref, ladder)
        wall = time.perf_counter() - t0
        dhier = hier.dof_count(hh, ladder, "hierarchical", 1)
        dfull = hier.dof_count(hh, ladder, "full", 1)
        sizes = hh.level_sizes(1)
        for l, err in zip(rep["levels"], rep["max_error"]):
            dim = 4 ** (L + 1 - l)
            print(f"{L:>2} {l:>5} {sizes[l-1]:>7} {dim:>9} {err:>12.4e} "
                  f"{dhier:>9} {dfull:>9} {wall:>7.2f}")
        print(f"   fitted C = {rep['fitted_C']:.4f}")
    return EXIT_OK


def _cmd_bench_kernels(args):
    import numpy as np
    from . import fem, kernels, mesh

    grid = mesh.StructuredGrid(args.n, args.n)
    quad = fem.QuadratureRule.gauss(2)
    ref = fem._reference_tensors(grid, quad)
    rng = np.random.default_rng(0)
    kq = rng.uniform(1.0, 2.0, (grid.nelem, quad.nq))
    bq = rng.uniform(-1.0, 1.0, (grid.nelem, quad.nq, 2))
    names = kernels.available_backends()
    print(f"element kernels on {args.n}x{args.n} grid "
          f"({grid.nelem} elements), best of {args.repeat}")
    for op, call in (
        ("stiffness", lambda b: b.stiffness_elems(kq, ref["gg"])),
        ("mass", lambda b: b.mass_elems(kq, ref["mm"])),
        ("convection", lambda b: b.convection_elems(bq, ref["cd"])),
    ):
        line = f"{op:<11}"
        base = None
        for name in names:
            backend = kernels.get_backend(name)
            best = min(
                _timed(call, backend) for _ in range(args.repeat)
            )
            if name == "numpy":
                base = best
            line += f"  {name} {best * 1e3:8.2f} ms"
            out_a = call(kernels.get_backend(names[0]))
            out_b = call(backend)
            assert np.allclose(out_a, out_b, rtol=1e-12, atol=1e-14)
        if base and len(names) > 1:
            line += f"  speedup x{base / best:.2f}"
        print(line)
    print(f"active backend: {kernels.BACKEND}")
    return EXIT_OK


def _timed(call, backend):
    t0 = time.perf_counter()
    call(backend)
    return time.perf_counter() - t0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dualflow",
        description="Dual-continuum multiscale flow experiments",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP thread pools")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="fine or multiscale run")
    ps.add_argument("--config", help="INI config file")
    ps.add_argument("--mode", choices=("fine", "coupled", "uncoupled"))
    ps.add_argument("--dims", type=int, nargs="+")
    ps.add_argument("--out")
    ps.set_defaults(fn=_cmd_simulate)

    pt = sub.add_parser("table", help="error tables for both modes, "
                        "with trend and band checks")
    pt.add_argument("--config")
    pt.add_argument("--dims", type=int, nargs="+")
    pt.add_argument("--out")
    pt.set_defaults(fn=_cmd_table)

    pg = sub.add_parser("gen-field", help="channelized conductivity raster")
    pg.add_argument("--background", type=float, default=10.0)
    pg.add_argument("--channel", type=float, default=1e5)
    pg.add_argument("--rects", help="x0,y0,x1,y1;... (unit-square coords); "
                    "omit for the shipped layout")
    pg.add_argument("--resolution", type=int, default=128)
    pg.add_argument("--out", required=True)
    pg.set_defaults(fn=_cmd_gen_field)

    ph = sub.add_parser("homogenize", help="cell problems and effective "
                        "coefficients at macro points")
    ph.add_argument("--cell-n", type=int, default=64)
    ph.add_argument("--kind", choices=("sine", "laminate"), default="sine")
    ph.add_argument("--k-low", type=float, default=1.0)
    ph.add_argument("--k-high", type=float, default=4.0)
    ph.add_argument("--zeta", type=float, default=0.5)
    ph.add_argument("--points", default="0.3,0.7")
    ph.add_argument("--p-min", type=float, default=0.0)
    ph.add_argument("--p-max", type=float, default=1.0)
    ph.add_argument("--out")
    ph.set_defaults(fn=_cmd_homogenize)

    pb = sub.add_parser("hier-bench", help="hierarchical cell-solve "
                        "benchmark over macrogrid depths")
    pb.add_argument("--levels", type=int, nargs="+", default=[3, 4, 5])
    pb.add_argument("--p-min", type=float, default=0.0)
    pb.add_argument("--p-max", type=float, default=1.0)
    pb.set_defaults(fn=_cmd_hier_bench)

    pk = sub.add_parser("bench-kernels", help="compare element-kernel "
                        "backends")
    pk.add_argument("--n", type=int, default=256)
    pk.add_argument("--repeat", type=int, default=5)
    pk.set_defaults(fn=_cmd_bench_kernels)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary: map to exit codes
        from .errors import (
            DecompositionFailure, PicardNonconvergence, SolverFailure,
            InsufficientData,
        )
        if isinstance(exc, (SolverFailure, PicardNonconvergence,
                            DecompositionFailure, InsufficientData)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        if isinstance(exc, (ValueError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
