"""Command-line interface.

Subcommands ``make-mesh``, ``micro``, ``macro`` and ``check``.  Exit codes: 0 success,
1 configuration or mesh error, 2 non-convergence, 3 failed check.  Strains are given
as ``e11,e22,e12`` with engineering shear ``e12 = 2 E12``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, io
from .fem import MaterialError, plane_strain_tensor, voigt_to_tensor
from .macrosolver import FULL, METHODS, IterationRecord, two_scale_solve
from .mesh import GeometryError, MeshError, PairingError, generate_cell_ring, generate_cell_slit
from .microsolver import ContactError, NonConvergenceError, build_cell_context, new_micro_state, solve_local_contact

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("microcontact")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1); 2 is reserved for non-convergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _strain(text: str) -> np.ndarray:
    parts = text.split(",")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError:
        raise argparse.ArgumentTypeError(f"strain must be three numbers e11,e22,e12, got {text!r}") from None
    if vals.shape != (3,) or not np.isfinite(vals).all():
        raise argparse.ArgumentTypeError(f"strain must be three finite numbers e11,e22,e12, got {text!r}")
    return vals


def _gamma(text: str) -> int:
    try:
        return io._gamma_value(text)
    except io.ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _cell_mesh(spec: str, args):
    if spec == "slit":
        return generate_cell_slit(args.slit_width, args.slit_gap, args.edge_length)
    if spec == "ring":
        return generate_cell_ring(args.hole_radius, args.inclusion_radius, args.edge_length)
    if Path(spec).exists():
        return io.read_cell_mesh(spec)
    raise MeshError(f"cell must be slit, ring or an existing mesh file, got {spec!r}")


def _geometry_flags(p):
    g = p.add_argument_group("cell geometry")
    g.add_argument("--edge-length", type=float, default=0.05, help="target edge length (cell units)")
    g.add_argument("--slit-width", type=float, default=0.6)
    g.add_argument("--slit-gap", type=float, default=0.02)
    g.add_argument("--hole-radius", type=float, default=0.35)
    g.add_argument("--inclusion-radius", type=float, default=0.335)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="microcontact", description="Two-scale solver for porous solids "
                     "with frictionless pore contact.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-mesh", help="generate a cell mesh file")
    p.add_argument("--cell", choices=("slit", "ring"), required=True)
    p.add_argument("--out", default=None, help="output directory (default ./out)")
    _geometry_flags(p)

    p = sub.add_parser("micro", help="solve one cell contact problem")
    p.add_argument("--cell", required=True, help="slit, ring or a cellmesh file")
    p.add_argument("--strain", type=_strain, required=True, help="e11,e22,e12 (engineering shear)")
    p.add_argument("--E", type=float, default=2.3, help="Young's modulus, GPa")
    p.add_argument("--nu", type=float, default=0.3, help="Poisson ratio")
    p.add_argument("--deform-scale", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    _geometry_flags(p)

    p = sub.add_parser("macro", help="run a two-scale scenario")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(io.PRESETS))
    src.add_argument("--config", help="JSON configuration file")
    p.add_argument("--method", choices=METHODS, default=None, help="overrides the configured method")
    p.add_argument("--gamma", type=_gamma, default=None, help="neighbourhood hops or 'full'")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("check", help="run the oracle and property suites")
    p.add_argument("--suite", choices=("micro", "homog", "macro", "all"), default="all")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--inject-fault", default=None, help="enable a deliberate fault (h-sign)")
    return parser


def cmd_make_mesh(args) -> int:
    mesh = _cell_mesh(args.cell, args)
    d = io.output_dir(args.out)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{args.cell}.mesh"
    io.write_cell_mesh(mesh, path)
    print(f"wrote {path} ({mesh.n_nodes} nodes, {mesh.elements.shape[0]} triangles)")
    return EXIT_OK


def cmd_micro(args) -> int:
    checks.inject_fault(args.inject_fault)
    D = plane_strain_tensor(args.E, args.nu)
    ctx = build_cell_context(_cell_mesh(args.cell, args), D)
    d = io.output_dir(args.out)
    d.mkdir(parents=True, exist_ok=True)
    conv = d / "convergence.csv"
    conv.unlink(missing_ok=True)
    st = new_micro_state(ctx)
    sol = solve_local_contact(st, voigt_to_tensor(args.strain), ctx)
    lam_norm = float(np.abs(sol.lam).max(initial=0.0))
    for k, res in enumerate(sol.report.history, start=1):
        io.append_convergence(conv, (1, k, "micro", 0.0, float(res), lam_norm, int(sol.active.size)))
    if not sol.report.history:
        io.append_convergence(conv, (1, 0, "micro", 0.0, 0.0, 0.0, 0))
    io.export_micro_vtk(ctx, st, d / "micro.vtk", args.deform_scale)
    io.write_cell_mesh(ctx.mesh, d / "cell.mesh")
    if ctx.n_records:
        io.write_record_table(ctx, st, d / "records.csv")
    s = sol.sigma_eff
    print(f"active records: {sol.active.size} of {ctx.n_records}")
    print(f"macro stress (11, 22, 12), GPa: {s[0]:.6e} {s[1]:.6e} {s[2]:.6e}")
    print(f"output: {d}")
    return EXIT_OK


def cmd_macro(args) -> int:
    checks.inject_fault(args.inject_fault)
    cfg = io.preset(args.preset) if args.preset else io.load_config(args.config)
    if args.method:
        cfg.solver.method = args.method
    if args.gamma is not None:
        cfg.solver.gamma = "full" if args.gamma == FULL else args.gamma
    cfg.validate()
    d = io.output_dir(args.out, cfg.output.directory)
    d.mkdir(parents=True, exist_ok=True)
    conv = d / "convergence.csv"
    conv.unlink(missing_ok=True)
    problem = io.build_problem(cfg)
    settings = io.solver_settings(cfg, threads=max(1, args.threads))

    def record(rec: IterationRecord):
        io.append_convergence(conv, rec)
        log.info("step %d iter %d: |r| %.3e |du| %.3e |lambda| %.3e active %d", rec.step, rec.outer_iter,
                 rec.norm_r, rec.norm_du, rec.norm_lambda, rec.n_active_total)

    result = two_scale_solve(problem, settings, on_record=record)
    io.save_config(cfg, d / "config.json")
    io.export_fields(result.state, problem, d, cfg.output.micro_points, cfg.output.deform_scale)
    last = result.history[-1]
    print(f"{cfg.name} / {settings.method}: {result.status} after {last.outer_iter} outer iterations, "
          f"relative residual {last.norm_r:.3e}, contact records {int(result.state.n_contact.sum())}")
    print(f"output: {d}")
    return EXIT_OK


def cmd_check(args) -> int:
    checks.inject_fault(args.inject_fault)
    try:
        names = ("micro", "homog", "macro") if args.suite == "all" else (args.suite,)
        results = checks.run_suites(names)
    finally:
        checks.inject_fault(None)
    print(checks.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"make-mesh": cmd_make_mesh, "micro": cmd_micro, "macro": cmd_macro, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonConvergenceError as exc:
        print(f"error: no convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except (io.ConfigError, MeshError, GeometryError, PairingError, MaterialError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        checks.inject_fault(None)


if __name__ == "__main__":
    sys.exit(main())
