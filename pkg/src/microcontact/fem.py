"""Plane-strain linear elasticity on the periodic cell.

Voigt convention throughout: strain ``(e11, e22, 2 e12)`` (engineering shear),
stress ``(s11, s22, s12)``, so that ``s = D @ e`` and ``s . e`` is the energy
density.  Cell integrals are divided by the cell area ``|Y|``.

The reduced cell space ("CellField") holds the fluctuation: periodic slave DOFs are
eliminated, rigid-inclusion nodes are condensed to ``(tx, ty, theta)`` about the
centroid of the rigid nodes, and two Lagrange multipliers fixing the mean of each
displacement component over the solid part are appended last.  The resulting
bordered operator ``A`` is symmetric, indefinite and nonsingular.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import PeriodicCellMesh, triangle_areas

__all__ = [
    "MaterialError",
    "AssemblyError",
    "FactorizationError",
    "ElasticTensor",
    "plane_strain_tensor",
    "voigt_to_tensor",
    "tensor_to_voigt",
    "triangle_B",
    "CellDofMap",
    "build_dof_map",
    "CellStiffness",
    "assemble_full_stiffness",
    "assemble_cell_stiffness",
    "affine_field",
    "macro_field",
    "element_strains",
    "stress_load",
    "average_stress",
    "Factorization",
    "factorize",
    "solve",
]


class MaterialError(ValueError):
    """Inadmissible elastic constants."""


class AssemblyError(RuntimeError):
    """The reduced cell system is singular or inconsistent."""


class FactorizationError(RuntimeError):
    """Sparse factorization failed or is numerically singular."""


@dataclass(frozen=True)
class ElasticTensor:
    """Plane-strain elasticity in Voigt form ``(11, 22, 12)``, engineering shear.

    Attributes
    ----------
    voigt : (3, 3) symmetric positive definite matrix, GPa.
    E, nu : Young's modulus (GPa) and Poisson ratio it was built from.
    """

    voigt: np.ndarray
    E: float = float("nan")
    nu: float = float("nan")

    def __post_init__(self):
        v = np.array(self.voigt, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "voigt", v)

    def stress(self, strain_voigt: np.ndarray) -> np.ndarray:
        return np.asarray(strain_voigt) @ self.voigt.T


def plane_strain_tensor(E: float, nu: float) -> ElasticTensor:
    """Isotropic plane-strain Hooke law."""
    if not E > 0.0:
        raise MaterialError(f"Young's modulus must be positive, got {E}")
    if nu >= 0.5:
        raise MaterialError(f"nu={nu} >= 0.5: incompressible material not supported")
    if nu <= -1.0:
        raise MaterialError(f"nu={nu} <= -1 is not admissible")
    c = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    D = np.array([[c * (1.0 - nu), c * nu, 0.0],
                  [c * nu, c * (1.0 - nu), 0.0],
                  [0.0, 0.0, mu]])
    return ElasticTensor(D, float(E), float(nu))


def voigt_to_tensor(v, shear: str = "strain") -> np.ndarray:
    """Voigt 3-vector to symmetric 2x2; ``shear='strain'`` halves the engineering shear."""
    v = np.asarray(v, dtype=float)
    s = 0.5 * v[..., 2] if shear == "strain" else v[..., 2]
    out = np.empty(v.shape[:-1] + (2, 2))
    out[..., 0, 0] = v[..., 0]
    out[..., 1, 1] = v[..., 1]
    out[..., 0, 1] = out[..., 1, 0] = s
    return out


def tensor_to_voigt(t, shear: str = "strain") -> np.ndarray:
    """Symmetric 2x2 to Voigt; ``shear='strain'`` doubles the off-diagonal."""
    t = np.asarray(t, dtype=float)
    f = 2.0 if shear == "strain" else 1.0
    return np.stack([t[..., 0, 0], t[..., 1, 1], f * 0.5 * (t[..., 0, 1] + t[..., 1, 0])], axis=-1)


def triangle_B(nodes: np.ndarray, elements: np.ndarray):
    """Constant strain-displacement matrices of linear triangles.

    Returns ``(B, area)`` with ``B`` of shape (M, 3, 6) acting on
    ``(u1x, u1y, u2x, u2y, u3x, u3y)``.
    """
    x = nodes[elements]
    area = triangle_areas(nodes, elements)
    b = np.stack([x[:, 1, 1] - x[:, 2, 1], x[:, 2, 1] - x[:, 0, 1], x[:, 0, 1] - x[:, 1, 1]], axis=1)
    c = np.stack([x[:, 2, 0] - x[:, 1, 0], x[:, 0, 0] - x[:, 2, 0], x[:, 1, 0] - x[:, 0, 0]], axis=1)
    b = b / (2.0 * area)[:, None]
    c = c / (2.0 * area)[:, None]
    B = np.zeros((elements.shape[0], 3, 6))
    B[:, 0, 0::2] = b
    B[:, 1, 1::2] = c
    B[:, 2, 0::2] = c
    B[:, 2, 1::2] = b
    return B, area


def _element_dofs(elements):
    return np.stack([2 * elements, 2 * elements + 1], axis=2).reshape(elements.shape[0], 6)


@dataclass(frozen=True)
class CellDofMap:
    """Map between the reduced fluctuation space and full nodal DOFs.

    Attributes
    ----------
    T : (2N, n_red) sparse expansion; full = T @ q.
    mean_rows : (2, n_red) rows giving the mean of each component over the solid part.
    n_red : number of displacement unknowns (multipliers excluded).
    rigid_center : centroid the rigid rotation DOF refers to (None without inclusion).
    rigid_dofs : indices of (tx, ty, theta) in the reduced vector (empty without inclusion).
    node_weights : lumped solid-area weight per node.
    """

    T: sp.csr_matrix
    mean_rows: np.ndarray
    n_red: int
    rigid_center: np.ndarray | None
    rigid_dofs: np.ndarray
    node_weights: np.ndarray

    @property
    def n(self) -> int:
        """Size of the bordered system (displacements plus two multipliers)."""
        return self.n_red + 2

    def expand(self, q: np.ndarray) -> np.ndarray:
        """Reduced vector (with or without multipliers) to an (N, 2) nodal field."""
        q = np.asarray(q)
        return (self.T @ q[: self.n_red]).reshape(-1, 2)

    def pad(self, v: np.ndarray) -> np.ndarray:
        """Append zero multiplier entries to a displacement-space vector."""
        return np.concatenate([v, np.zeros(2)])


def build_dof_map(mesh: PeriodicCellMesh) -> CellDofMap:
    """Eliminate periodic slaves and condense rigid nodes."""
    N = mesh.n_nodes
    owner = np.arange(N)
    pp = mesh.periodic_pairs
    owner[pp.slave] = pp.master
    rigid = np.zeros(N, dtype=bool)
    rigid[mesh.rigid_nodes] = True
    free_nodes = np.flatnonzero((owner == np.arange(N)) & ~rigid)
    node_col = -np.ones(N, dtype=np.int64)
    node_col[free_nodes] = 2 * np.arange(free_nodes.size)
    n_red = 2 * free_nodes.size
    rows, cols, vals = [], [], []
    for i in range(N):
        if rigid[i]:
            continue
        c = node_col[owner[i]]
        rows += [2 * i, 2 * i + 1]
        cols += [c, c + 1]
        vals += [1.0, 1.0]
    center = None
    rigid_dofs = np.zeros(0, dtype=np.int64)
    if mesh.rigid_nodes.size:
        center = mesh.nodes[mesh.rigid_nodes].mean(axis=0)
        rigid_dofs = np.arange(n_red, n_red + 3)
        for i in mesh.rigid_nodes:
            dx, dy = mesh.nodes[i] - center
            rows += [2 * i, 2 * i, 2 * i + 1, 2 * i + 1]
            cols += [n_red, n_red + 2, n_red + 1, n_red + 2]
            vals += [1.0, -dy, 1.0, dx]
        n_red += 3
    T = sp.csr_matrix((vals, (rows, cols)), shape=(2 * N, n_red))
    areas = triangle_areas(mesh.nodes, mesh.elements)
    w = np.zeros(N)
    np.add.at(w, mesh.elements.ravel(), np.repeat(areas / 3.0, 3))
    wfull = np.zeros((2, 2 * N))
    wfull[0, 0::2] = w / w.sum()
    wfull[1, 1::2] = w / w.sum()
    mean_rows = np.asarray((T.T @ wfull.T).T)
    return CellDofMap(T, mean_rows, n_red, center, rigid_dofs, w)


def assemble_full_stiffness(mesh: PeriodicCellMesh, D: ElasticTensor) -> sp.csr_matrix:
    """Unreduced (2N x 2N) stiffness divided by the cell area."""
    B, area = triangle_B(mesh.nodes, mesh.elements)
    ke = np.einsum("eji,jk,ekl->eil", B, D.voigt, B) * (area / mesh.cell_area)[:, None, None]
    dofs = _element_dofs(mesh.elements)
    r = np.repeat(dofs, 6, axis=1).ravel()
    c = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.n_nodes
    K = sp.coo_matrix((ke.ravel(), (r, c)), shape=(n, n)).tocsr()
    return (0.5 * (K + K.T)).tocsr()


@dataclass(frozen=True)
class CellStiffness:
    """Bordered reduced stiffness ``A = [[T'KT, M'], [M, 0]]`` with its ingredients."""

    A: sp.csc_matrix
    K_full: sp.csr_matrix
    dofs: CellDofMap
    D: ElasticTensor


def assemble_cell_stiffness(mesh: PeriodicCellMesh, D: ElasticTensor) -> CellStiffness:
    """Assemble the bordered operator on the reduced fluctuation space."""
    dofs = build_dof_map(mesh)
    K = assemble_full_stiffness(mesh, D)
    Kr = (dofs.T.T @ K @ dofs.T).tocsr()
    Kr = 0.5 * (Kr + Kr.T)
    M = sp.csr_matrix(dofs.mean_rows)
    A = sp.bmat([[Kr, M.T], [M, None]], format="csc")
    return CellStiffness(A, K, dofs, D)


def _solid_barycenter(mesh: PeriodicCellMesh) -> np.ndarray:
    areas = triangle_areas(mesh.nodes, mesh.elements)
    cent = mesh.nodes[mesh.elements].mean(axis=1)
    return (areas[:, None] * cent).sum(axis=0) / areas.sum()


def affine_field(E_macro, mesh: PeriodicCellMesh) -> np.ndarray:
    """Nodal values ``E @ (y - y_bar)`` with ``y_bar`` the barycenter of the solid part."""
    E = np.asarray(E_macro, dtype=float)
    yhat = mesh.nodes - _solid_barycenter(mesh)
    return yhat @ E.T


def macro_field(E_macro, mesh: PeriodicCellMesh) -> np.ndarray:
    """Affine field ``E y_hat`` with the rigid-inclusion nodes set to zero.

    The cell's total field is ``macro_field(E) + T q``; on rigid nodes it is then the
    rigid motion carried by ``q``, elsewhere the affine part plus a periodic
    fluctuation.  Without an inclusion this equals :func:`affine_field`.
    """
    u = affine_field(E_macro, mesh)
    if mesh.rigid_nodes.size:
        u[mesh.rigid_nodes] = 0.0
    return u


def element_strains(mesh: PeriodicCellMesh, u_full: np.ndarray) -> np.ndarray:
    """Engineering Voigt strain per triangle for a nodal field of shape (N, 2)."""
    B, _ = triangle_B(mesh.nodes, mesh.elements)
    ue = np.asarray(u_full).reshape(-1, 2)[mesh.elements].reshape(-1, 6)
    return np.einsum("eij,ej->ei", B, ue)


def stress_load(cell: CellStiffness, u_full: np.ndarray) -> np.ndarray:
    """Right-hand side ``-T' K u`` in the bordered space (multiplier rows zero)."""
    f = cell.K_full @ np.asarray(u_full, dtype=float).ravel()
    return cell.dofs.pad(-(cell.dofs.T.T @ f))


def average_stress(mesh: PeriodicCellMesh, D: ElasticTensor, u_full: np.ndarray) -> np.ndarray:
    """Cell-averaged stress tensor ``|Y|^-1 sum area * D e(u)``."""
    eps = element_strains(mesh, u_full)
    area = triangle_areas(mesh.nodes, mesh.elements)
    s = (area[:, None] * D.stress(eps)).sum(axis=0) / mesh.cell_area
    return voigt_to_tensor(s, shear="stress")


class Factorization:
    """Sparse LU factorization of a reduced cell operator, reused for many solves.

    Solves are serialised by an internal lock, so one instance may be shared by any
    number of threads.
    """

    def __init__(self, A, check_tol: float = 1e-8):
        A = sp.csc_matrix(A)
        self.shape = A.shape
        try:
            self._lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}") from exc
        self._lock = threading.Lock()
        x0 = np.random.default_rng(0).standard_normal(A.shape[0])
        x = self.solve(A @ x0)
        err = np.linalg.norm(x - x0) / np.linalg.norm(x0)
        if not np.isfinite(err) or err > check_tol:
            raise FactorizationError(f"operator numerically singular (round-trip error {err:.2e})")

    @property
    def n(self) -> int:
        return self.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.shape[0]:
            raise ValueError(f"rhs has {rhs.shape[0]} rows, operator has {self.shape[0]}")
        with self._lock:
            return self._lu.solve(np.ascontiguousarray(rhs))


def factorize(A) -> Factorization:
    return Factorization(A)


def solve(F: Factorization, rhs: np.ndarray) -> np.ndarray:
    return F.solve(rhs)
