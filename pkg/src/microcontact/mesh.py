"""Periodic cell meshes, macroscopic quad meshes and contact collocation pairing.

Cell meshes use 3-node triangles on ``[0, ybar1] x [0, ybar2]``; the macro body uses
4-node quadrilaterals with 2x2 Gauss quadrature.  All mesh objects are immutable
after construction (arrays are flagged read-only) and can be shared across threads.

Contact surfaces are split into a *plus* side and a *minus* side.  Normals stored
on the pairing always point from the minus side towards the plus side, so that for
a reference position ``x`` the jump ``n . (x+ - x-)`` is the (non-negative)
reference gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "GeometryError",
    "MeshError",
    "PairingError",
    "PeriodicPairs",
    "PeriodicCellMesh",
    "ContactRecord",
    "ContactPairing",
    "MacroMesh",
    "generate_cell_slit",
    "generate_cell_ring",
    "generate_full_cell",
    "generate_macro_mesh",
    "match_periodic_pairs",
    "build_contact_pairing",
    "polyline_chains",
    "triangle_areas",
]


class GeometryError(ValueError):
    """Raised when cell geometry parameters cannot produce a valid mesh."""


class MeshError(ValueError):
    """Raised when a mesh violates its structural invariants."""


class PairingError(ValueError):
    """Raised when the contact collocation pairing cannot be constructed."""


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def triangle_areas(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Signed areas of 3-node triangles (positive for counter-clockwise)."""
    p0, p1, p2 = (nodes[elements[:, k]] for k in range(3))
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


class PeriodicPairs(NamedTuple):
    """Master/slave node identification with lattice shifts ``x_slave = x_master + shift``."""

    master: np.ndarray
    slave: np.ndarray
    shift: np.ndarray

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.master.shape[0])


@dataclass(frozen=True)
class PeriodicCellMesh:
    """Triangulated periodic cell.

    Attributes
    ----------
    nodes : (N, 2) coordinates in cell units.
    elements : (M, 3) counter-clockwise triangle connectivity.
    boundary_edges : dict with keys ``plus``, ``minus``, ``exterior``; each an (k, 2)
        array of node pairs.  ``plus``/``minus`` are the two sides of the contact
        boundary, ``exterior`` the pore surface excluded from contact.
    periodic_pairs : master/slave identification across opposite cell faces.
    rigid_nodes : nodes of the rigid inclusion (may be empty).
    cell_size : (ybar1, ybar2).
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: dict
    periodic_pairs: PeriodicPairs
    rigid_nodes: np.ndarray
    cell_size: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float))
        object.__setattr__(self, "elements", _frozen(self.elements, np.int64))
        edges = {k: _frozen(np.asarray(v, dtype=np.int64).reshape(-1, 2))
                 for k, v in self.boundary_edges.items()}
        for key in ("plus", "minus", "exterior"):
            edges.setdefault(key, _frozen(np.zeros((0, 2), dtype=np.int64)))
        object.__setattr__(self, "boundary_edges", edges)
        pp = self.periodic_pairs
        object.__setattr__(self, "periodic_pairs", PeriodicPairs(
            _frozen(pp.master, np.int64), _frozen(pp.slave, np.int64),
            _frozen(np.asarray(pp.shift, float).reshape(-1, 2))))
        object.__setattr__(self, "rigid_nodes", _frozen(np.unique(self.rigid_nodes).astype(np.int64)))
        object.__setattr__(self, "cell_size", (float(self.cell_size[0]), float(self.cell_size[1])))

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def cell_area(self) -> float:
        return self.cell_size[0] * self.cell_size[1]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * np.asarray(self.cell_size)

    def element_areas(self) -> np.ndarray:
        return triangle_areas(self.nodes, self.elements)

    def plus_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges["plus"])

    def minus_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges["minus"])

    def validate(self, tol: float = 1e-9) -> None:
        """Check the structural invariants; raise :class:`MeshError` on violation."""
        areas = self.element_areas()
        if areas.size and areas.min() <= 0.0:
            bad = int(np.argmin(areas))
            raise MeshError(f"element {bad} has non-positive area {areas[bad]:.3e}")
        pp = self.periodic_pairs
        if len(pp):
            mis = self.nodes[pp.slave] - self.nodes[pp.master] - pp.shift
            if np.abs(mis).max() > tol:
                raise MeshError(f"periodic shift identity violated by {np.abs(mis).max():.3e}")
            y1, y2 = self.cell_size
            allowed = {(a, b) for a in (-y1, 0.0, y1) for b in (-y2, 0.0, y2)} - {(0.0, 0.0)}
            for s in pp.shift:
                if not any(abs(s[0] - a) <= tol and abs(s[1] - b) <= tol for a, b in allowed):
                    raise MeshError(f"shift {tuple(s)} is not a lattice vector")
        plus = {tuple(sorted(e)) for e in self.boundary_edges["plus"].tolist()}
        minus = {tuple(sorted(e)) for e in self.boundary_edges["minus"].tolist()}
        if plus & minus:
            raise MeshError("plus and minus contact edges overlap")
        if self.rigid_nodes.size:
            on_periodic = np.intersect1d(self.rigid_nodes, np.concatenate([pp.master, pp.slave]))
            if on_periodic.size:
                raise MeshError(f"rigid nodes {on_periodic.tolist()} lie on the cell boundary")
            x = self.nodes[self.rigid_nodes]
            y1, y2 = self.cell_size
            if (x[:, 0] <= tol).any() or (x[:, 0] >= y1 - tol).any() \
                    or (x[:, 1] <= tol).any() or (x[:, 1] >= y2 - tol).any():
                raise MeshError("rigid inclusion touches the cell boundary")


# ---------------------------------------------------------------------------
# periodic matching
# ---------------------------------------------------------------------------

def match_periodic_pairs(nodes: np.ndarray, cell_size=(1.0, 1.0), tol: float = 1e-9) -> PeriodicPairs:
    """Identify slave nodes on the right/top faces with masters on the left/bottom faces.

    Corners are all slaved to the corner at the origin.  Raises :class:`MeshError`
    listing the coordinates of any boundary node without a periodic image.
    """
    nodes = np.asarray(nodes, dtype=float)
    y1, y2 = float(cell_size[0]), float(cell_size[1])
    x, y = nodes[:, 0], nodes[:, 1]
    left = np.abs(x) <= tol
    right = np.abs(x - y1) <= tol
    bottom = np.abs(y) <= tol
    top = np.abs(y - y2) <= tol
    tree = cKDTree(nodes)

    masters, slaves, shifts, unmatched = [], [], [], []

    def find(target):
        d, j = tree.query(target)
        return int(j) if d <= tol else None

    corner0 = np.flatnonzero(left & bottom)
    corner_slaves = {
        (y1, 0.0): np.flatnonzero(right & bottom),
        (0.0, y2): np.flatnonzero(left & top),
        (y1, y2): np.flatnonzero(right & top),
    }
    if corner0.size:
        c0 = int(corner0[0])
        for shift, cand in corner_slaves.items():
            if cand.size:
                masters.append(c0)
                slaves.append(int(cand[0]))
                shifts.append(shift)
            else:
                unmatched.append(tuple(nodes[c0] + np.array(shift)))
    elif any(c.size for c in corner_slaves.values()):
        unmatched.append((0.0, 0.0))

    corners = (left | right) & (bottom | top)
    for i in np.flatnonzero(left & ~corners):
        j = find(nodes[i] + (y1, 0.0))
        if j is None:
            unmatched.append(tuple(nodes[i]))
        else:
            masters.append(int(i)); slaves.append(j); shifts.append((y1, 0.0))
    for i in np.flatnonzero(bottom & ~corners):
        j = find(nodes[i] + (0.0, y2))
        if j is None:
            unmatched.append(tuple(nodes[i]))
        else:
            masters.append(int(i)); slaves.append(j); shifts.append((0.0, y2))
    # every right/top node must have been claimed as a slave
    claimed = set(slaves)
    for i in np.flatnonzero((right | top) & ~corners):
        if int(i) not in claimed:
            unmatched.append(tuple(nodes[i]))
    if unmatched:
        pts = ", ".join(f"({a:.6g}, {b:.6g})" for a, b in unmatched[:10])
        raise MeshError(f"{len(unmatched)} boundary node(s) without periodic image: {pts}")
    return PeriodicPairs(np.array(masters, dtype=np.int64), np.array(slaves, dtype=np.int64),
                         np.array(shifts, dtype=float).reshape(-1, 2))


def _snap_periodic(nodes: np.ndarray, pairs: PeriodicPairs) -> np.ndarray:
    nodes = nodes.copy()
    nodes[pairs.slave] = nodes[pairs.master] + pairs.shift
    return nodes


def _compact(nodes, elements, *node_sets):
    used = np.unique(np.concatenate([elements.ravel()] + [np.asarray(s, dtype=np.int64).ravel()
                                                          for s in node_sets]))
    remap = -np.ones(nodes.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    return nodes[used], remap


def _orient(nodes, tris):
    tris = np.asarray(tris, dtype=np.int64)
    neg = triangle_areas(nodes, tris) < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


# ---------------------------------------------------------------------------
# cell generators
# ---------------------------------------------------------------------------

def _breaks(points, h):
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil((b - a) / h - 1e-9)))
        out.extend(a + (b - a) * np.arange(1, n + 1) / n)
    out[-1] = points[-1]
    return np.asarray(out)


def _grid_cell(xs, ys, hole):
    """Structured triangulation of a tensor grid minus the cells flagged by ``hole(i, j)``.

    The diagonal of each quad is mirrored about the cell centre so the mesh is
    symmetric under ``x -> 1 - x`` and ``y -> 1 - y``.
    """
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(nx, ny)
    xc0, yc0 = 0.5 * (xs[0] + xs[-1]), 0.5 * (ys[0] + ys[-1])
    tris, extra = [], []
    for i in range(nx - 1):
        for j in range(ny - 1):
            if hole(i, j):
                continue
            p00, p10, p11, p01 = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            xc, yc = 0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])
            if abs(xc - xc0) < 1e-12 or abs(yc - yc0) < 1e-12:
                # quads on a symmetry line get a centre node (crossed diagonals)
                pc = len(extra) + nodes.shape[0]
                extra.append((xc, yc))
                tris += [(p00, p10, pc), (p10, p11, pc), (p11, p01, pc), (p01, p00, pc)]
            elif (xc - xc0) * (yc - yc0) > 0.0:
                tris += [(p00, p10, p11), (p00, p11, p01)]
            else:
                tris += [(p00, p10, p01), (p10, p11, p01)]
    if extra:
        nodes = np.vstack([nodes, np.array(extra)])
    return nodes, np.array(tris, dtype=np.int64), idx


def generate_full_cell(target_edge_length: float = 0.1) -> PeriodicCellMesh:
    """Pore-free unit cell (used for patch tests and as a homogeneous reference)."""
    xs = _breaks([0.0, 1.0], target_edge_length)
    nodes, tris, _ = _grid_cell(xs, xs, lambda i, j: False)
    pairs = match_periodic_pairs(nodes)
    nodes = _snap_periodic(nodes, pairs)
    mesh = PeriodicCellMesh(nodes, _orient(nodes, tris), {}, pairs, np.zeros(0, dtype=np.int64))
    mesh.validate()
    return mesh


def generate_cell_slit(slit_width: float = 0.6, slit_gap: float = 0.02,
                       target_edge_length: float = 0.05) -> PeriodicCellMesh:
    """Unit cell with a centred horizontal slit with flat parallel faces.

    Parameters
    ----------
    slit_width : slit length as a fraction of ybar1.
    slit_gap : slit opening as a fraction of ybar2.
    target_edge_length : nominal element size (cell units).

    The upper slit face is the plus side, the lower face the minus side; the two
    short slit ends are non-contact pore surface.
    """
    h = float(target_edge_length)
    if not h > 0.0:
        raise GeometryError(f"target_edge_length must be positive, got {h}")
    if not 0.0 < slit_width < 1.0:
        raise GeometryError(f"slit_width must lie in (0, 1), got {slit_width}")
    if not 0.0 < slit_gap < 0.25:
        raise GeometryError(f"slit_gap must lie in (0, 0.25), got {slit_gap}")
    margin = 0.5 * (1.0 - slit_width)
    if margin < 0.1 * min(h, slit_gap):
        raise GeometryError(
            f"slit_width={slit_width} leaves a ligament of {margin:.3g} to the cell boundary; "
            "the slit reaches the cell boundary")
    a, b = 0.5 - 0.5 * slit_width, 0.5 + 0.5 * slit_width
    c, d = 0.5 - 0.5 * slit_gap, 0.5 + 0.5 * slit_gap
    xs = _breaks([0.0, a, b, 1.0], h)
    ys = _breaks([0.0, c, d, 1.0], h)
    ia, ib = int(np.argmin(abs(xs - a))), int(np.argmin(abs(xs - b)))
    jc, jd = int(np.argmin(abs(ys - c))), int(np.argmin(abs(ys - d)))
    nodes, tris, idx = _grid_cell(xs, ys, lambda i, j: ia <= i < ib and jc <= j < jd)

    plus = [(idx[i, jd], idx[i + 1, jd]) for i in range(ia, ib)]
    minus = [(idx[i, jc], idx[i + 1, jc]) for i in range(ia, ib)]
    exterior = [(idx[ia, j], idx[ia, j + 1]) for j in range(jc, jd)] \
        + [(idx[ib, j], idx[ib, j + 1]) for j in range(jc, jd)]

    keep, remap = _compact(nodes, tris)
    tris = remap[tris]
    plus, minus, exterior = (remap[np.array(e, dtype=np.int64)] for e in (plus, minus, exterior))
    areas = triangle_areas(keep, tris)
    if areas.min() <= 1e-14:
        raise GeometryError(f"degenerate triangles for slit_gap={slit_gap}, "
                            f"target_edge_length={h}")
    pairs = match_periodic_pairs(keep)
    keep = _snap_periodic(keep, pairs)
    mesh = PeriodicCellMesh(keep, _orient(keep, tris),
                            {"plus": plus, "minus": minus, "exterior": exterior},
                            pairs, np.zeros(0, dtype=np.int64))
    mesh.validate()
    return mesh


def generate_cell_ring(hole_radius: float = 0.35, inclusion_radius: float = 0.30,
                       target_edge_length: float = 0.05,
                       ligament_divisions: int = 1) -> PeriodicCellMesh:
    """Unit cell with a circular hole holding a concentric rigid disc.

    The disc is tied to the skeleton by two short radial ligaments at angles 0 and
    pi (each ``2 * ligament_divisions`` angular divisions wide); without them the
    inclusion would float and the cell stiffness would be singular.  The hole
    surface between the ligaments is the plus side, the facing disc surface the
    minus side.  The disc itself carries no elements: its surface nodes and its
    centre node form ``rigid_nodes``.
    """
    R, r, h = float(hole_radius), float(inclusion_radius), float(target_edge_length)
    if not h > 0.0:
        raise GeometryError(f"target_edge_length must be positive, got {h}")
    if not 0.0 < r < R < 0.5:
        raise GeometryError(
            f"need 0 < inclusion_radius < hole_radius < 0.5, got r={r}, R={R}")
    if 0.5 - R < 0.05 * h:
        raise GeometryError(f"hole_radius={R} too close to the cell boundary")
    n = max(16, 8 * int(math.ceil(2.0 * math.pi * R / (8.0 * h))))
    nl = int(ligament_divisions)
    if nl < 1 or 2 * nl >= n // 4:
        raise GeometryError(f"ligament_divisions={nl} incompatible with {n} angular divisions")
    theta = 2.0 * math.pi * np.arange(n) / n
    direc = np.column_stack([np.cos(theta), np.sin(theta)])
    # exact axis values avoid round-off on the symmetry lines
    direc[np.abs(direc) < 1e-15] = 0.0
    ctr = np.array([0.5, 0.5])

    n_out = max(2, int(math.ceil((0.5 * (1.0 + math.sqrt(2.0)) / 2.0 - R) / h)))
    n_gap = max(1, int(round((R - r) / h)))

    pts = [ctr]
    center = 0
    incl = np.arange(1, n + 1)
    pts.extend(ctr + r * direc)
    # outer rings j = 0 (hole surface) .. n_out (cell boundary)
    rho_b = 0.5 / np.maximum(np.abs(direc[:, 0]), np.abs(direc[:, 1]))
    outer = np.zeros((n_out + 1, n), dtype=np.int64)
    for j in range(n_out + 1):
        s = j / n_out
        ring = ctr + (R + s * (rho_b - R))[:, None] * direc
        if j == n_out:
            ring = _snap_square(ring, direc)
        outer[j] = np.arange(len(pts), len(pts) + n)
        pts.extend(ring)

    lig_k = sorted({(k0 + m) % n for k0 in (0, n // 2) for m in range(-nl, nl + 1)})
    gap_layers = {}
    for jj in range(1, n_gap):
        rho = r + (R - r) * jj / n_gap
        for k in lig_k:
            gap_layers[(jj, k)] = len(pts)
            pts.append(ctr + rho * direc[k])
    nodes = np.array(pts)

    def gap_node(jj, k):
        if jj == 0:
            return incl[k]
        if jj == n_gap:
            return outer[0, k]
        return gap_layers[(jj, k)]

    tris = []

    def quad(a, b, c, d, mid_angle):
        # a,b at inner radius (k, k+1); c,d at outer radius (k+1, k)
        if math.sin(2.0 * mid_angle) >= 0.0:
            tris.extend([(a, b, c), (a, c, d)])
        else:
            tris.extend([(a, b, d), (b, c, d)])

    for j in range(n_out):
        for k in range(n):
            k1 = (k + 1) % n
            quad(outer[j, k], outer[j, k1], outer[j + 1, k1], outer[j + 1, k],
                 theta[k] + math.pi / n)
    for k0 in (0, n // 2):
        for m in range(-nl, nl):
            k, k1 = (k0 + m) % n, (k0 + m + 1) % n
            for jj in range(n_gap):
                quad(gap_node(jj, k), gap_node(jj, k1), gap_node(jj + 1, k1), gap_node(jj + 1, k),
                     theta[k] + math.pi / n)
    tris = _orient(nodes, np.array(tris, dtype=np.int64))

    upper = [(k0 + nl + i) % n for k0 in (0,) for i in range(n // 2 - 2 * nl + 1)]
    lower = [(n // 2 + nl + i) % n for i in range(n // 2 - 2 * nl + 1)]
    plus, minus = [], []
    for arc in (upper, lower):
        plus += [(outer[0, a], outer[0, b]) for a, b in zip(arc[:-1], arc[1:])]
        minus += [(incl[a], incl[b]) for a, b in zip(arc[:-1], arc[1:])]
    exterior = []
    for k in (nl, -nl, n // 2 + nl, n // 2 - nl):
        k %= n
        exterior += [(gap_node(jj, k), gap_node(jj + 1, k)) for jj in range(n_gap)]

    areas = triangle_areas(nodes, tris)
    if areas.min() <= 1e-14:
        raise GeometryError(f"degenerate triangles for hole_radius={R}, inclusion_radius={r}")
    pairs = match_periodic_pairs(nodes)
    nodes = _snap_periodic(nodes, pairs)
    rigid = np.concatenate([[center], incl])
    mesh = PeriodicCellMesh(nodes, tris,
                            {"plus": plus, "minus": minus, "exterior": exterior},
                            pairs, rigid)
    mesh.validate()
    return mesh


def _snap_square(ring, direc):
    ring = ring.copy()
    horiz = np.abs(direc[:, 0]) >= np.abs(direc[:, 1]) - 1e-14
    vert = np.abs(direc[:, 1]) >= np.abs(direc[:, 0]) - 1e-14
    ring[horiz, 0] = np.where(direc[horiz, 0] > 0, 1.0, 0.0)
    ring[vert, 1] = np.where(direc[vert, 1] > 0, 1.0, 0.0)
    # mirror-image boundary points get bitwise identical free coordinates
    ring[:, 0] = np.where(vert & ~horiz, 0.5 + np.sign(ring[:, 0] - 0.5)
                          * np.round(np.abs(ring[:, 0] - 0.5), 15), ring[:, 0])
    ring[:, 1] = np.where(horiz & ~vert, 0.5 + np.sign(ring[:, 1] - 0.5)
                          * np.round(np.abs(ring[:, 1] - 0.5), 15), ring[:, 1])
    return ring


# ---------------------------------------------------------------------------
# contact pairing
# ---------------------------------------------------------------------------

def polyline_chains(edges: np.ndarray) -> list[np.ndarray]:
    """Order an unordered edge list into node chains (open or closed polylines).

    Open chains start at their lowest-numbered end node; closed chains at their
    lowest node.  Raises :class:`MeshError` on branching.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    adj: dict[int, list[int]] = {}
    for a, b in edges.tolist():
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(v) > 2 for v in adj.values()):
        raise MeshError("contact surface edges branch")
    seen: set[int] = set()
    chains = []
    ends = sorted(k for k, v in adj.items() if len(v) == 1)
    starts = ends + sorted(k for k, v in adj.items() if len(v) == 2)
    for s in starts:
        if s in seen:
            continue
        chain, prev, cur = [s], -1, s
        seen.add(s)
        while True:
            nxt = [v for v in adj[cur] if v != prev and v not in seen]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            chain.append(cur)
            seen.add(cur)
        chains.append(np.array(chain, dtype=np.int64))
    return chains


@dataclass(frozen=True)
class ContactRecord:
    """One collocation point of the symmetric gap approximation.

    The gap row is ``0.5 * [n_plus.(u(y+) - u(y~-)) + n_minus.(u(y~+) - u(y-))]``
    and is stored as a nodal stencil ``(nodes, coeffs)``.

    Attributes
    ----------
    t : position along the contact parametrisation, in [0, 1].
    family : ``"plus"`` or ``"minus"`` -- which side supplies the master node.
    plus_node, minus_node : master node on the respective side (-1 if that side's
        point is interpolated).
    slave_segment : (edge id on the opposite side, barycentric weight) hit by the
        projection of the master node.
    normal : unit normal at the minus point (minus -> plus).
    normal_plus : unit normal at the plus point (minus -> plus).
    ref_gap : reference gap, the gap row applied to the reference coordinates.
    delta_tensor : symmetric 2x2 tensor ``P0`` with ``row(E y) = P0 : E``.
    chain : index of the plus-side chain the record is parametrised on.
    """

    t: float
    family: str
    plus_node: int
    minus_node: int
    slave_segment: tuple[int, float]
    normal: np.ndarray
    normal_plus: np.ndarray
    ref_gap: float
    nodes: np.ndarray
    coeffs: np.ndarray
    delta_tensor: np.ndarray
    chain: int

    @property
    def minus_segment(self) -> tuple[int, float]:
        return self.slave_segment


@dataclass(frozen=True)
class ContactPairing:
    """Collocation records plus the neighbour structure along the contact surface.

    ``chains`` lists, per (family, plus chain), the record indices in increasing
    ``t``; neighbours for the active-set boundary are taken within a chain.
    ``closed`` flags chains that wrap around (last and first records are neighbours).
    """

    records: tuple
    chains: tuple = field(default=())
    closed: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.records)

    @property
    def t(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def normals(self) -> np.ndarray:
        return np.array([r.normal for r in self.records]).reshape(-1, 2)

    @property
    def ref_gaps(self) -> np.ndarray:
        return np.array([r.ref_gap for r in self.records])

    @property
    def families(self) -> np.ndarray:
        return np.array([r.family for r in self.records])

    def validate(self) -> None:
        for i, rec in enumerate(self.records):
            if abs(np.linalg.norm(rec.normal) - 1.0) > 1e-12:
                raise PairingError(f"record {i}: normal not unit length")
            if rec.ref_gap < -1e-12:
                raise PairingError(f"record {i}: negative reference gap {rec.ref_gap:.3e}")
        for chain in self.chains:
            t = np.array([self.records[i].t for i in chain])
            if t.size > 1 and np.any(np.diff(t) <= 0.0):
                raise PairingError("t not strictly increasing within a record family")


def _segment_normals(nodes, chain, other_nodes, toward_other: bool):
    """Unit normals per node of a chain, averaged from adjacent segment normals."""
    p = nodes[chain]
    tangents = p[1:] - p[:-1]
    seg_n = np.column_stack([-tangents[:, 1], tangents[:, 0]])
    seg_n /= np.linalg.norm(seg_n, axis=1)[:, None]
    mids = 0.5 * (p[1:] + p[:-1])
    tree = cKDTree(other_nodes)
    _, j = tree.query(mids)
    to_other = other_nodes[j] - mids
    sgn = np.sign(np.einsum("ij,ij->i", seg_n, to_other))
    sgn[sgn == 0] = 1.0
    if not toward_other:
        sgn = -sgn
    seg_n *= sgn[:, None]
    node_n = np.zeros_like(p)
    node_n[:-1] += seg_n
    node_n[1:] += seg_n
    node_n /= np.linalg.norm(node_n, axis=1)[:, None]
    if seg_n.shape[0] >= 2:
        # chain ends: continue the turning rate of the first/last two segments
        lengths = np.linalg.norm(tangents, axis=1)
        for end, (a, b) in ((0, (0, 1)), (-1, (-1, -2))):
            turn = np.arctan2(seg_n[a, 0] * seg_n[b, 1] - seg_n[a, 1] * seg_n[b, 0], seg_n[a] @ seg_n[b])
            phi = -turn * lengths[a] / (lengths[a] + lengths[b])
            c, s_ = np.cos(phi), np.sin(phi)
            node_n[end] = [c * seg_n[a, 0] - s_ * seg_n[a, 1], s_ * seg_n[a, 0] + c * seg_n[a, 1]]
    return node_n


def _ray_hit(origin, direction, seg_a, seg_b, tol=1e-9):
    """First intersection of a ray with a set of segments: (segment idx, weight, distance)."""
    e = seg_b - seg_a
    det = -direction[0] * e[:, 1] + direction[1] * e[:, 0]
    ok = np.abs(det) > 1e-14
    rhs = seg_a - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = (-rhs[:, 0] * e[:, 1] + rhs[:, 1] * e[:, 0]) / det
        w = (direction[0] * rhs[:, 1] - direction[1] * rhs[:, 0]) / det
    scale = max(1.0, float(np.abs(e).max(initial=0.0)))
    valid = ok & (w >= -tol) & (w <= 1.0 + tol) & (xi >= -tol * scale)
    # closest point, used when the ray slips past the end of an open chain
    ee = np.einsum("ij,ij->i", e, e)
    wc = np.clip(np.einsum("ij,ij->i", origin - seg_a, e) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
    dc = np.linalg.norm(seg_a + wc[:, None] * e - origin, axis=1)
    kc = int(np.argmin(dc))
    if valid.any():
        cand = np.flatnonzero(valid)
        best = cand[np.argmin(xi[cand])]
        if xi[best] <= 1.5 * dc[kc] + tol * scale:
            return int(best), float(np.clip(w[best], 0.0, 1.0)), float(xi[best])
    if dc[kc] <= 1.0:
        return kc, float(wc[kc]), float(dc[kc])
    return None


def build_contact_pairing(mesh: PeriodicCellMesh) -> ContactPairing:
    """Pair homologous points across the pore for the symmetric gap approximation.

    One record is emitted per plus-side node and one per minus-side node.  Normals
    come from the reference configuration.  Raises :class:`PairingError` when the
    projection of some node misses the opposite surface.
    """
    pe, me = mesh.boundary_edges["plus"], mesh.boundary_edges["minus"]
    if pe.shape[0] == 0 or me.shape[0] == 0:
        raise PairingError("mesh has no plus/minus contact edges")
    X = mesh.nodes
    plus_chains = polyline_chains(pe)
    minus_chains = polyline_chains(me)
    pn_all, mn_all = np.unique(pe), np.unique(me)

    # node normals (minus -> plus orientation on both sides)
    normal = {}
    for ch in plus_chains:
        for node, nv in zip(ch, _segment_normals(X, ch, X[mn_all], toward_other=False)):
            normal[int(node)] = nv
    for ch in minus_chains:
        for node, nv in zip(ch, _segment_normals(X, ch, X[pn_all], toward_other=True)):
            normal[int(node)] = nv

    # arclength parameter on plus chains; a closed chain includes its closing segment
    n_ch = len(plus_chains)
    plus_edges = {frozenset(e) for e in pe.tolist()}
    closed = [ch.size > 2 and frozenset((int(ch[-1]), int(ch[0]))) in plus_edges for ch in plus_chains]
    plus_param = {}
    for c, ch in enumerate(plus_chains):
        pts = np.vstack([X[ch], X[ch[:1]]]) if closed[c] else X[ch]
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        s = s / (s[-1] if s[-1] > 0 else 1.0)
        for node, si in zip(ch, s):
            plus_param[int(node)] = (c, (c + si) / n_ch)

    def wrapped_param(a, b):
        # parameters of an edge's end nodes, continuous across the closing segment
        (ca, ta), (_, tb) = plus_param[a], plus_param[b]
        ch = plus_chains[ca]
        if closed[ca] and {a, b} == {int(ch[0]), int(ch[-1])}:
            if a == int(ch[0]):
                ta = (ca + 1.0) / n_ch
            else:
                tb = (ca + 1.0) / n_ch
        return ca, ta, tb

    def surface(edges):
        return X[edges[:, 0]], X[edges[:, 1]]

    pa, pb = surface(pe)
    ma, mb = surface(me)

    def point(edges, k, w):
        a, b = int(edges[k, 0]), int(edges[k, 1])
        return ((a, 1.0 - w), (b, w)), (1.0 - w) * X[a] + w * X[b], \
            _unit((1.0 - w) * normal[a] + w * normal[b])

    def node_point(i):
        return ((int(i), 1.0),), X[i], normal[int(i)]

    def record(family, master, y_plus, y_minus, slave_seg):
        (sp_plus, xp, n_p), (sp_minus, xm, n_m) = y_plus, y_minus
        hit = _ray_hit(xp, -n_p, ma, mb)
        if hit is None:
            raise PairingError(f"projection of plus point of node {master} misses the minus side")
        sp_minus_t, xm_t, _ = point(me, hit[0], hit[1])
        hit = _ray_hit(xm, n_m, pa, pb)
        if hit is None:
            raise PairingError(f"projection of minus point of node {master} misses the plus side")
        sp_plus_t, xp_t, _ = point(pe, hit[0], hit[1])
        stencil: dict[int, np.ndarray] = {}

        def add(sp, vec):
            for node, w in sp:
                if w != 0.0:
                    stencil[node] = stencil.get(node, np.zeros(2)) + w * vec

        add(sp_plus, 0.5 * n_p)
        add(sp_minus_t, -0.5 * n_p)
        add(sp_plus_t, 0.5 * n_m)
        add(sp_minus, -0.5 * n_m)
        nodes = np.array(sorted(stencil), dtype=np.int64)
        coeffs = np.array([stencil[k] for k in nodes])
        ref_gap = float(np.sum(coeffs * X[nodes]))
        P0 = 0.5 * (np.outer(n_p, xp - xm_t) + np.outer(n_m, xp_t - xm))
        return dict(family=family, normal=n_m, normal_plus=n_p, ref_gap=ref_gap,
                    nodes=nodes, coeffs=coeffs, delta_tensor=0.5 * (P0 + P0.T),
                    slave_segment=slave_seg)

    plus_records, minus_records = [], []
    for ch in plus_chains:
        for node in ch:
            hit = _ray_hit(X[node], -normal[int(node)], ma, mb)
            if hit is None:
                raise PairingError(f"plus node {int(node)}: projection misses the minus side")
            y_minus = point(me, hit[0], hit[1])
            rec = record("plus", int(node), node_point(node), y_minus, (hit[0], hit[1]))
            c, t = plus_param[int(node)]
            plus_records.append(ContactRecord(t=t, plus_node=int(node), minus_node=-1,
                                              chain=c, **rec))
    for node in mn_all:
        hit = _ray_hit(X[node], normal[int(node)], pa, pb)
        if hit is None:
            raise PairingError(f"minus node {int(node)}: projection misses the plus side")
        y_plus = point(pe, hit[0], hit[1])
        a, b = int(pe[hit[0], 0]), int(pe[hit[0], 1])
        ca, ta, tb = wrapped_param(a, b)
        t = (1.0 - hit[1]) * ta + hit[1] * tb
        rec = record("minus", int(node), y_plus, node_point(node), (hit[0], hit[1]))
        minus_records.append(ContactRecord(t=t, plus_node=-1, minus_node=int(node),
                                           chain=ca, **rec))
    minus_records.sort(key=lambda r: r.t)
    records = tuple(plus_records + minus_records)

    chains, chain_closed = [], []
    offset = 0
    for fam in (plus_records, minus_records):
        for c in range(n_ch):
            idx = [offset + i for i, r in enumerate(fam) if r.chain == c]
            if idx:
                chains.append(np.array(idx, dtype=np.int64))
                chain_closed.append(bool(closed[c]))
        offset += len(fam)
    pairing = ContactPairing(records, tuple(chains), tuple(chain_closed))
    pairing.validate()
    return pairing


def _unit(v):
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# macro mesh
# ---------------------------------------------------------------------------

_GP = 1.0 / math.sqrt(3.0)
GAUSS_2x2 = np.array([[-_GP, -_GP], [_GP, -_GP], [_GP, _GP], [-_GP, _GP]])


@dataclass(frozen=True)
class MacroMesh:
    """4-node quadrilateral mesh of the macroscopic body with 2x2 Gauss quadrature.

    ``boundary`` maps ``left/right/top/bottom`` to (k, 2) edge arrays; the edge sets
    partition the boundary.  Quadrature point ``q`` of element ``e`` has global id
    ``4 * e + q``.
    """

    nodes: np.ndarray
    quads: np.ndarray
    boundary: dict

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float))
        object.__setattr__(self, "quads", _frozen(self.quads, np.int64))
        object.__setattr__(self, "boundary", {k: _frozen(np.asarray(v, np.int64).reshape(-1, 2))
                                              for k, v in self.boundary.items()})
        B, w, xq = self._quadrature()
        object.__setattr__(self, "_B", _frozen(B))
        object.__setattr__(self, "_w", _frozen(w))
        object.__setattr__(self, "_xq", _frozen(xq))
        if w.min() <= 0.0:
            raise MeshError("non-positive Jacobian at a quadrature point")

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_qp(self) -> int:
        return 4 * int(self.quads.shape[0])

    @property
    def qp_B(self) -> np.ndarray:
        """(n_qp, 3, 8) strain-displacement matrices, Voigt (11, 22, 12) engineering shear."""
        return self._B

    @property
    def qp_weights(self) -> np.ndarray:
        return self._w

    @property
    def qp_coords(self) -> np.ndarray:
        return self._xq

    def qp_element(self) -> np.ndarray:
        return np.repeat(np.arange(self.quads.shape[0]), 4)

    def element_dofs(self) -> np.ndarray:
        q = self.quads
        return np.stack([2 * q, 2 * q + 1], axis=2).reshape(q.shape[0], 8)

    def boundary_nodes(self, tag: str) -> np.ndarray:
        return np.unique(self.boundary[tag])

    def _quadrature(self):
        ne = self.quads.shape[0]
        B = np.zeros((4 * ne, 3, 8))
        w = np.zeros(4 * ne)
        xq = np.zeros((4 * ne, 2))
        for e, quad in enumerate(self.quads):
            xe = self.nodes[quad]
            for q, (xi, eta) in enumerate(GAUSS_2x2):
                N = 0.25 * np.array([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                                     (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)])
                dN = 0.25 * np.array([[-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
                                      [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)]])
                J = dN @ xe
                detJ = np.linalg.det(J)
                dNx = np.linalg.solve(J, dN)
                k = 4 * e + q
                B[k, 0, 0::2] = dNx[0]
                B[k, 1, 1::2] = dNx[1]
                B[k, 2, 0::2] = dNx[1]
                B[k, 2, 1::2] = dNx[0]
                w[k] = detJ
                xq[k] = N @ xe
        return B, w, xq


def generate_macro_mesh(nx: int, ny: int, size=(1.0, 1.0)) -> MacroMesh:
    """Structured ``nx x ny`` quad mesh of ``[0, Lx] x [0, Ly]``."""
    if nx < 1 or ny < 1:
        raise MeshError("macro mesh needs at least one element per direction")
    xs = np.linspace(0.0, size[0], nx + 1)
    ys = np.linspace(0.0, size[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    quads = [(idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1])
             for j in range(ny) for i in range(nx)]
    boundary = {
        "bottom": [(idx[i, 0], idx[i + 1, 0]) for i in range(nx)],
        "right": [(idx[nx, j], idx[nx, j + 1]) for j in range(ny)],
        "top": [(idx[i + 1, ny], idx[i, ny]) for i in range(nx)],
        "left": [(idx[0, j + 1], idx[0, j]) for j in range(ny)],
    }
    return MacroMesh(nodes, np.array(quads), boundary)
