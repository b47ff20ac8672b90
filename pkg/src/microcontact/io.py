"""Configuration, mesh files, field export and convergence logs.

Configuration is JSON; field output is legacy-VTK ASCII; convergence logs are CSV.
Every output file has a single writer.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import element_strains, plane_strain_tensor
from .mesh import (MacroMesh, MeshError, PeriodicCellMesh, PeriodicPairs, generate_cell_ring,
                   generate_cell_slit, generate_macro_mesh)

__all__ = [
    "ConfigError",
    "ConfigWarning",
    "MaterialConfig",
    "CellConfig",
    "MacroConfig",
    "SolverConfig",
    "OutputConfig",
    "ProblemConfig",
    "PRESETS",
    "preset",
    "load_config",
    "save_config",
    "build_cell_mesh",
    "build_problem",
    "solver_settings",
    "output_dir",
    "write_cell_mesh",
    "read_cell_mesh",
    "write_macro_mesh",
    "read_macro_mesh",
    "export_fields",
    "export_macro_vtk",
    "export_micro_vtk",
    "read_legacy_vtk",
    "write_record_table",
    "append_convergence",
    "CONVERGENCE_HEADER",
]

CONVERGENCE_HEADER = ("step", "outer_iter", "method", "norm_du", "norm_r", "norm_lambda", "n_active_total")
ENV_OUT = "MICROCONTACT_OUT"


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


class ConfigWarning(UserWarning):
    """Non-fatal configuration issue such as an unknown key."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class MaterialConfig:
    E: float = 2.3
    nu: float = 0.3


@dataclass
class CellConfig:
    """Cell geometry.  ``kind`` is ``slit``, ``ring`` or ``file`` (then ``path`` is used)."""

    kind: str = "slit"
    slit_width: float = 0.6
    slit_gap: float = 0.02
    hole_radius: float = 0.35
    inclusion_radius: float = 0.335
    target_edge_length: float = 0.05
    path: str | None = None


@dataclass
class MacroConfig:
    """Macro mesh and loading.

    ``fixed`` items are ``[edge, component, value]``, ``tied`` items ``[edge, component]``
    and ``tractions`` items ``[edge, [t1, t2]]`` in GPa.
    """

    nx: int = 2
    ny: int = 1
    size: list = field(default_factory=lambda: [1.0, 1.0])
    fixed: list = field(default_factory=list)
    tied: list = field(default_factory=list)
    tractions: list = field(default_factory=list)
    load_steps: int = 1


@dataclass
class SolverConfig:
    method: str = "ml"
    gamma: int | str = 1
    tol_outer: float = 1e-12
    max_outer: int = 40
    tol_inner: float = 1e-10
    max_inner: int = 100000
    newton_tol: float = 1e-12
    beta0: float | None = None
    micro_tol: float = 1e-10
    micro_max_iter: int = 50
    tol_stall: float = 1e-6
    stall_window: int = 3


@dataclass
class OutputConfig:
    """``micro_points`` lists quadrature points exported as cell files (empty: the
    point with most contact)."""

    directory: str = "out"
    formats: list = field(default_factory=lambda: ["vtk", "csv"])
    deform_scale: float = 1.0
    micro_points: list = field(default_factory=list)


@dataclass
class ProblemConfig:
    material: MaterialConfig = field(default_factory=MaterialConfig)
    cell: CellConfig = field(default_factory=CellConfig)
    macro: MacroConfig = field(default_factory=MacroConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    name: str = "custom"

    def validate(self) -> "ProblemConfig":
        m = self.material
        if not (math.isfinite(m.E) and m.E > 0):
            raise ConfigError(f"material.E must be positive, got {m.E}")
        if not (-1.0 < m.nu < 0.5):
            raise ConfigError(f"material.nu must lie in (-1, 0.5), got {m.nu}")
        if self.cell.kind not in ("slit", "ring", "file"):
            raise ConfigError(f"cell.kind must be slit, ring or file, got {self.cell.kind!r}")
        if self.cell.kind == "file" and not self.cell.path:
            raise ConfigError("cell.kind 'file' needs cell.path")
        s = self.solver
        if s.method not in ("ml", "mc-uzawa", "mc-newton"):
            raise ConfigError(f"solver.method must be ml, mc-uzawa or mc-newton, got {s.method!r}")
        for name in ("tol_outer", "tol_inner", "newton_tol", "micro_tol", "tol_stall"):
            v = getattr(s, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"solver.{name} must be a positive number, got {v!r}")
        for name in ("max_outer", "max_inner", "micro_max_iter", "stall_window"):
            if int(getattr(s, name)) < 1:
                raise ConfigError(f"solver.{name} must be at least 1")
        if s.beta0 is not None and not s.beta0 > 0:
            raise ConfigError("solver.beta0 must be positive when given")
        _gamma_value(s.gamma)
        mc = self.macro
        if mc.nx < 1 or mc.ny < 1 or mc.load_steps < 1:
            raise ConfigError("macro.nx, macro.ny and macro.load_steps must be at least 1")
        for item in mc.tractions:
            t = np.asarray(item[1], dtype=float)
            if t.shape != (2,) or not np.isfinite(t).all():
                raise ConfigError(f"traction on {item[0]!r} must be two finite numbers")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>") -> "ProblemConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")
        kwargs = {}
        sections = {"material": MaterialConfig, "cell": CellConfig, "macro": MacroConfig,
                    "solver": SolverConfig, "output": OutputConfig}
        for key, value in data.items():
            if key == "name":
                kwargs["name"] = str(value)
            elif key in sections:
                kwargs[key] = _section(sections[key], value, f"{source}: {key}")
            else:
                warnings.warn(f"{source}: unknown key {key!r} ignored", ConfigWarning, stacklevel=3)
        return cls(**kwargs).validate()


def _section(kind, value, where):
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(kind)}
    known = {}
    for k, v in value.items():
        if k in names:
            known[k] = v
        else:
            warnings.warn(f"{where}: unknown key {k!r} ignored", ConfigWarning, stacklevel=4)
    try:
        return kind(**known)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _gamma_value(gamma) -> int:
    from .macrosolver import FULL
    if isinstance(gamma, str):
        if gamma.lower() == "full":
            return FULL
        try:
            gamma = int(gamma)
        except ValueError as exc:
            raise ConfigError(f"gamma must be a non-negative integer or 'full', got {gamma!r}") from exc
    if isinstance(gamma, bool) or not isinstance(gamma, (int, np.integer)) or (gamma < 0 and gamma != FULL):
        raise ConfigError(f"gamma must be a non-negative integer or 'full', got {gamma!r}")
    return int(gamma)


def _uniaxial() -> ProblemConfig:
    return ProblemConfig(
        name="uniaxial",
        cell=CellConfig(kind="slit"),
        macro=MacroConfig(nx=2, ny=1, fixed=[["left", 0, 0.0], ["bottom", 1, 0.0]],
                          tied=[["right", 0], ["top", 1]], tractions=[["top", [0.0, -0.1]]]),
        solver=SolverConfig(method="mc-newton"),
    )


def _bending() -> ProblemConfig:
    return ProblemConfig(
        name="bending",
        cell=CellConfig(kind="ring"),
        macro=MacroConfig(nx=4, ny=4, fixed=[["bottom", 0, 0.0], ["bottom", 1, 0.0]],
                          tractions=[["top", [0.01, 0.0]]]),
        solver=SolverConfig(method="ml"),
    )


PRESETS = {"uniaxial": _uniaxial, "bending": _bending}


def preset(name: str) -> ProblemConfig:
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_config(path_or_preset) -> ProblemConfig:
    """Load a JSON configuration file, or a preset when given a preset name."""
    if str(path_or_preset) in PRESETS and not Path(path_or_preset).exists():
        return preset(str(path_or_preset))
    path = Path(path_or_preset)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if isinstance(data, dict) and "preset" in data:
        base = preset(data.pop("preset")).to_dict()
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                base[key].update(value)
            else:
                base[key] = value
        data = base
    return ProblemConfig.from_dict(data, str(path))


def save_config(cfg: ProblemConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def build_cell_mesh(cell: CellConfig) -> PeriodicCellMesh:
    if cell.kind == "slit":
        return generate_cell_slit(cell.slit_width, cell.slit_gap, cell.target_edge_length)
    if cell.kind == "ring":
        return generate_cell_ring(cell.hole_radius, cell.inclusion_radius, cell.target_edge_length)
    return read_cell_mesh(cell.path)


def build_problem(cfg: ProblemConfig, ctx=None):
    """Macro problem for a configuration (reusing ``ctx`` when given)."""
    from .macrosolver import BoundaryConditions, MacroProblem
    from .microsolver import build_cell_context

    if ctx is None:
        D = plane_strain_tensor(cfg.material.E, cfg.material.nu)
        ctx = build_cell_context(build_cell_mesh(cfg.cell), D)
    mc = cfg.macro
    mesh = generate_macro_mesh(mc.nx, mc.ny, tuple(mc.size))
    bc = BoundaryConditions(
        fixed=tuple((str(e), int(c), float(v)) for e, c, v in mc.fixed),
        tied=tuple((str(e), int(c)) for e, c in mc.tied),
        tractions=tuple((str(e), tuple(float(x) for x in t)) for e, t in mc.tractions),
    )
    return MacroProblem(mesh, ctx, bc)


def solver_settings(cfg: ProblemConfig, threads: int = 1):
    from .macrosolver import SolverSettings

    s = cfg.solver
    return SolverSettings(method=s.method, gamma=_gamma_value(s.gamma), tol_outer=s.tol_outer,
                          max_outer=s.max_outer, tol_inner=s.tol_inner, max_inner=s.max_inner,
                          newton_tol=s.newton_tol, beta0=s.beta0, micro_tol=s.micro_tol,
                          micro_max_iter=s.micro_max_iter, load_steps=cfg.macro.load_steps,
                          threads=threads, tol_stall=s.tol_stall, stall_window=s.stall_window)


def output_dir(explicit=None, configured: str | None = None) -> Path:
    """Output directory: explicit flag, then ``MICROCONTACT_OUT``, then the config value."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(ENV_OUT)
    if env:
        return Path(env)
    return Path(configured or "out")


# ---------------------------------------------------------------------------
# mesh files
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_cell_mesh(mesh: PeriodicCellMesh, path) -> None:
    """Write a cell mesh in the ``cellmesh v1`` text format."""
    lines = ["cellmesh v1", f"cell_size {_fmt(mesh.cell_size[0])} {_fmt(mesh.cell_size[1])}",
             f"nodes {mesh.n_nodes}"]
    lines += [f"{_fmt(x)} {_fmt(y)}" for x, y in mesh.nodes]
    lines.append(f"elements {mesh.elements.shape[0]}")
    lines += [" ".join(map(str, e)) for e in mesh.elements.tolist()]
    for key in sorted(mesh.boundary_edges):
        edges = mesh.boundary_edges[key]
        lines.append(f"edges {key} {edges.shape[0]}")
        lines += [f"{a} {b}" for a, b in edges.tolist()]
    pp = mesh.periodic_pairs
    lines.append(f"periodic {len(pp)}")
    lines += [f"{m} {s} {_fmt(a)} {_fmt(b)}" for m, s, (a, b) in zip(pp.master.tolist(), pp.slave.tolist(), pp.shift)]
    lines.append(f"rigid {mesh.rigid_nodes.size}")
    if mesh.rigid_nodes.size:
        lines.append(" ".join(map(str, mesh.rigid_nodes.tolist())))
    Path(path).write_text("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, path, magic):
        self.path = str(path)
        try:
            self.lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise MeshError(f"cannot read {path}: {exc}") from exc
        self.i = 0
        if not self.lines or self.lines[0].strip() != magic:
            raise MeshError(f"{path}: line 1: expected header {magic!r}")
        self.i = 1

    def fail(self, msg):
        raise MeshError(f"{self.path}: line {self.i}: {msg}")

    def next(self) -> list[str]:
        while self.i < len(self.lines):
            self.i += 1
            tok = self.lines[self.i - 1].split()
            if tok:
                return tok
        self.fail("unexpected end of file")

    def block(self, n, width, dtype):
        rows = []
        for _ in range(n):
            tok = self.next()
            if width is not None and len(tok) != width:
                self.fail(f"expected {width} values, got {len(tok)}")
            try:
                rows.append([dtype(t) for t in tok])
            except ValueError:
                self.fail(f"malformed number in {' '.join(tok)!r}")
        return rows

    def done(self):
        return all(not ln.strip() for ln in self.lines[self.i:])


def read_cell_mesh(path) -> PeriodicCellMesh:
    """Read a ``cellmesh v1`` file; raises :class:`MeshError` with the line on errors."""
    rd = _Reader(path, "cellmesh v1")
    size = (1.0, 1.0)
    nodes = elements = None
    edges, pairs, rigid = {}, None, np.zeros(0, dtype=np.int64)
    while not rd.done():
        tok = rd.next()
        key = tok[0]
        try:
            if key == "cell_size":
                size = (float(tok[1]), float(tok[2]))
            elif key == "nodes":
                nodes = np.array(rd.block(int(tok[1]), 2, float), dtype=float).reshape(-1, 2)
            elif key == "elements":
                elements = np.array(rd.block(int(tok[1]), 3, int), dtype=np.int64).reshape(-1, 3)
            elif key == "edges":
                edges[tok[1]] = np.array(rd.block(int(tok[2]), 2, int), dtype=np.int64).reshape(-1, 2)
            elif key == "periodic":
                rows = rd.block(int(tok[1]), 4, float)
                arr = np.array(rows, dtype=float).reshape(-1, 4)
                pairs = PeriodicPairs(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2:])
            elif key == "rigid":
                n = int(tok[1])
                vals = rd.next() if n else []
                if len(vals) != n:
                    rd.fail(f"expected {n} rigid node ids")
                rigid = np.array([int(v) for v in vals], dtype=np.int64)
            else:
                rd.fail(f"unknown section {key!r}")
        except (IndexError, ValueError):
            rd.fail(f"malformed section header {' '.join(tok)!r}")
    if nodes is None or elements is None:
        raise MeshError(f"{path}: missing nodes or elements section")
    if elements.size and (elements.min() < 0 or elements.max() >= nodes.shape[0]):
        raise MeshError(f"{path}: element references a node outside 0..{nodes.shape[0] - 1}")
    if pairs is None:
        pairs = PeriodicPairs(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)))
    mesh = PeriodicCellMesh(nodes, elements, edges, pairs, rigid, size)
    mesh.validate()
    return mesh


def write_macro_mesh(mesh: MacroMesh, path) -> None:
    """Write a macro mesh in the ``macromesh v1`` text format."""
    lines = ["macromesh v1", f"nodes {mesh.nodes.shape[0]}"]
    lines += [f"{_fmt(x)} {_fmt(y)}" for x, y in mesh.nodes]
    lines.append(f"quads {mesh.quads.shape[0]}")
    lines += [" ".join(map(str, q)) for q in np.asarray(mesh.quads).tolist()]
    for key in sorted(mesh.boundary):
        edges = np.asarray(mesh.boundary[key]).reshape(-1, 2)
        lines.append(f"boundary {key} {edges.shape[0]}")
        lines += [f"{a} {b}" for a, b in edges.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_macro_mesh(path) -> MacroMesh:
    rd = _Reader(path, "macromesh v1")
    nodes = quads = None
    boundary = {}
    while not rd.done():
        tok = rd.next()
        try:
            if tok[0] == "nodes":
                nodes = np.array(rd.block(int(tok[1]), 2, float), dtype=float).reshape(-1, 2)
            elif tok[0] == "quads":
                quads = np.array(rd.block(int(tok[1]), 4, int), dtype=np.int64).reshape(-1, 4)
            elif tok[0] == "boundary":
                boundary[tok[1]] = [tuple(e) for e in rd.block(int(tok[2]), 2, int)]
            else:
                rd.fail(f"unknown section {tok[0]!r}")
        except (IndexError, ValueError):
            rd.fail(f"malformed section header {' '.join(tok)!r}")
    if nodes is None or quads is None:
        raise MeshError(f"{path}: missing nodes or quads section")
    return MacroMesh(nodes, quads, boundary)


# ---------------------------------------------------------------------------
# legacy VTK
# ---------------------------------------------------------------------------

VTK_TRIANGLE = 5
VTK_QUAD = 9


def _check_finite(name, arr):
    if not np.isfinite(np.asarray(arr, dtype=float)).all():
        raise ValueError(f"refusing to export non-finite values in {name}")


def _vtk_grid(title, points, cells, cell_type):
    pts = np.column_stack([points, np.zeros(points.shape[0])])
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {pts.shape[0]} double"]
    out += [" ".join(_fmt(v) for v in p) for p in pts]
    k = cells.shape[1]
    out.append(f"CELLS {cells.shape[0]} {cells.shape[0] * (k + 1)}")
    out += [f"{k} " + " ".join(map(str, c)) for c in cells.tolist()]
    out.append(f"CELL_TYPES {cells.shape[0]}")
    out += [str(cell_type)] * cells.shape[0]
    return out


def _scalars(name, values, kind="double"):
    fmt = (lambda v: str(int(v))) if kind == "int" else _fmt
    return [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"] + [fmt(v) for v in values]


def _vectors(name, values):
    v = np.column_stack([np.asarray(values, dtype=float).reshape(-1, 2), np.zeros(len(values))])
    return [f"VECTORS {name} double"] + [" ".join(_fmt(x) for x in row) for row in v]


def export_macro_vtk(state, problem, path) -> None:
    """Macro mesh with nodal displacement, cell stresses and per-cell contact counts."""
    mesh = problem.mesh
    u = np.asarray(state.u0, dtype=float).reshape(-1, 2)
    sig = state.stresses().reshape(-1, 4, 3).mean(axis=1)
    n_contact = state.n_contact.reshape(-1, 4).sum(axis=1)
    _check_finite("displacement", u)
    _check_finite("stress", sig)
    out = _vtk_grid("microcontact macro", mesh.nodes, np.asarray(mesh.quads), VTK_QUAD)
    out.append(f"POINT_DATA {mesh.nodes.shape[0]}")
    out += _vectors("displacement", u)
    out.append(f"CELL_DATA {mesh.quads.shape[0]}")
    for k, name in enumerate(("sigma_11", "sigma_22", "sigma_12")):
        out += _scalars(name, sig[:, k])
    out += _scalars("n_contact", n_contact, "int")
    Path(path).write_text("\n".join(out) + "\n")


def record_anchor_nodes(pairing) -> np.ndarray:
    """Node carrying each record (its own side of the contact boundary)."""
    return np.array([r.plus_node if r.family == "plus" else r.minus_node for r in pairing.records],
                    dtype=np.int64)


def export_micro_vtk(ctx, micro, path, deform_scale: float = 1.0) -> None:
    """Deformed cell with displacement, element stresses and contact forces on the nodes."""
    mesh = ctx.mesh
    u = np.asarray(micro.u_mic, dtype=float).reshape(-1, 2)
    stress = ctx.D.stress(element_strains(mesh, u))
    lam_nodes = np.zeros(mesh.n_nodes)
    gap_nodes = np.zeros(mesh.n_nodes)
    if ctx.n_records:
        anchors = record_anchor_nodes(ctx.pairing)
        np.add.at(lam_nodes, anchors, np.asarray(micro.lam, dtype=float))
        np.add.at(gap_nodes, anchors, np.asarray(micro.gap, dtype=float))
    for name, arr in (("displacement", u), ("stress", stress), ("lambda", lam_nodes)):
        _check_finite(name, arr)
    out = _vtk_grid("microcontact cell", mesh.nodes + deform_scale * u, mesh.elements, VTK_TRIANGLE)
    out.append(f"POINT_DATA {mesh.n_nodes}")
    out += _vectors("displacement", u)
    out += _scalars("lambda", lam_nodes)
    out += _scalars("gap", gap_nodes)
    out.append(f"CELL_DATA {mesh.elements.shape[0]}")
    for k, name in enumerate(("sigma_11", "sigma_22", "sigma_12")):
        out += _scalars(name, stress[:, k])
    Path(path).write_text("\n".join(out) + "\n")


def write_record_table(ctx, micro, path) -> None:
    """Per-record CSV: index, t, family, lambda, gap, active flag."""
    active = np.zeros(ctx.n_records, dtype=bool)
    active[np.asarray(micro.active, dtype=np.int64)] = True
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "t", "family", "lambda", "gap", "active"])
        for i, rec in enumerate(ctx.pairing.records if ctx.n_records else ()):
            w.writerow([i, _fmt(rec.t), rec.family, _fmt(micro.lam[i]), _fmt(micro.gap[i]), int(active[i])])


def export_fields(state, problem, directory, micro_points=None, deform_scale: float = 1.0) -> list[Path]:
    """Write the macro VTK file, cell files for selected points and the cell mesh.

    Returns the written paths.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = [d / "macro.vtk", d / "cell.mesh"]
    export_macro_vtk(state, problem, written[0])
    write_cell_mesh(problem.ctx.mesh, written[1])
    pts = list(micro_points or [])
    if not pts:
        pts = [int(np.argmax(state.n_contact))]
    for q in pts:
        if not 0 <= q < len(state.micro):
            raise ValueError(f"quadrature point {q} out of range")
        p = d / f"micro_qp{q:03d}.vtk"
        export_micro_vtk(problem.ctx, state.micro[q], p, deform_scale)
        written.append(p)
    return written


def read_legacy_vtk(path) -> dict:
    """Minimal reader for the ASCII unstructured grids written here.

    Returns ``{"points", "cells", "cell_types", "point_data", "cell_data"}``.
    """
    tokens = Path(path).read_text().split("\n")
    if not tokens[0].startswith("# vtk DataFile"):
        raise ValueError(f"{path}: not a legacy VTK file")
    if tokens[2].strip() != "ASCII" or tokens[3].strip() != "DATASET UNSTRUCTURED_GRID":
        raise ValueError(f"{path}: expected an ASCII unstructured grid")
    words = " ".join(tokens[4:]).split()
    i = 0
    out = {"point_data": {}, "cell_data": {}}
    target = None
    while i < len(words):
        w = words[i]
        if w == "POINTS":
            n = int(words[i + 1])
            out["points"] = np.array(words[i + 3:i + 3 + 3 * n], dtype=float).reshape(n, 3)
            i += 3 + 3 * n
        elif w == "CELLS":
            n, size = int(words[i + 1]), int(words[i + 2])
            flat = np.array(words[i + 3:i + 3 + size], dtype=np.int64)
            cells, j = [], 0
            while j < flat.size:
                cells.append(flat[j + 1:j + 1 + flat[j]])
                j += flat[j] + 1
            if len(cells) != n:
                raise ValueError(f"{path}: cell count mismatch")
            out["cells"] = cells
            i += 3 + size
        elif w == "CELL_TYPES":
            n = int(words[i + 1])
            out["cell_types"] = np.array(words[i + 2:i + 2 + n], dtype=np.int64)
            i += 2 + n
        elif w in ("POINT_DATA", "CELL_DATA"):
            target = (out["point_data"] if w == "POINT_DATA" else out["cell_data"], int(words[i + 1]))
            i += 2
        elif w == "SCALARS":
            name, n = words[i + 1], target[1]
            start = i + 4
            if start < len(words) and words[start] == "LOOKUP_TABLE":
                start += 2
            target[0][name] = np.array(words[start:start + n], dtype=float)
            i = start + n
        elif w == "VECTORS":
            name, n = words[i + 1], target[1]
            target[0][name] = np.array(words[i + 3:i + 3 + 3 * n], dtype=float).reshape(n, 3)
            i += 3 + 3 * n
        else:
            raise ValueError(f"{path}: unexpected token {w!r}")
    return out


# ---------------------------------------------------------------------------
# convergence log
# ---------------------------------------------------------------------------

def append_convergence(path, record) -> None:
    """Append one convergence row, writing the header first if the file is new.

    ``record`` is an object with ``as_row()`` or a sequence in header order.  A file
    must have a single writer; concurrent appends may interleave lines.
    """
    path = Path(path)
    row = record.as_row() if hasattr(record, "as_row") else list(record)
    if len(row) != len(CONVERGENCE_HEADER):
        raise ValueError(f"convergence row needs {len(CONVERGENCE_HEADER)} fields, got {len(row)}")
    new = not path.exists() or path.stat().st_size == 0
    cells = [v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else _fmt(v))
             for v in row]
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CONVERGENCE_HEADER)
        w.writerow(cells)
        fh.flush()
