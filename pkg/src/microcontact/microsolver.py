"""Dual contact solve on the periodic cell.

Sign convention: for a record ``i`` with jump row ``J_i`` (normal from the minus to
the plus side) the physical gap is

    g_i(u) = -J_i(u) - ref_i,      g <= 0 feasible, lambda >= 0, lambda * g = 0,

where ``u`` is the total micro field ``u_mic = E y_hat + u1``.  With ``b`` the stress
load of the current ``u_mic`` and ``A`` the bordered cell operator, an increment
``dq = A^-1 (b + G' lambda)`` gives ``g = h - C lambda`` with ``C = G A^-1 G'`` and
``h`` the gap at ``lambda = 0``.  The complementarity problem is therefore
``min(C lambda - h, lambda) = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import (CellStiffness, ElasticTensor, Factorization, assemble_cell_stiffness,
                  average_stress, factorize, macro_field, stress_load)
from .mesh import ContactPairing, PeriodicCellMesh, build_contact_pairing

__all__ = [
    "ContactError",
    "NonConvergenceError",
    "CyclingError",
    "StepSizeError",
    "GapOperator",
    "SolveReport",
    "MicroSolution",
    "MicroState",
    "CellContext",
    "assemble_gap_operator",
    "assemble_schur",
    "compute_h",
    "semismooth_newton_cp",
    "uzawa_local",
    "estimate_norm",
    "recover_fluctuation",
    "extract_active_set",
    "build_cell_context",
    "new_micro_state",
    "solve_local_contact",
    "effective_stress",
    "unit_mode",
]

log = logging.getLogger(__name__)

# Deliberate faults for exercising the check harness; never set in normal use.
_FAULTS: set[str] = set()


class ContactError(RuntimeError):
    """Base class for contact solver failures."""


class NonConvergenceError(ContactError):
    """Iteration limit reached; ``history`` holds the residuals."""

    def __init__(self, msg: str, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class CyclingError(NonConvergenceError):
    """The active set revisited an earlier set without converging."""


class StepSizeError(NonConvergenceError):
    """Projected iteration diverges; the step size is too large."""


@dataclass(frozen=True)
class GapOperator:
    """Linearised symmetric gap rows.

    Attributes
    ----------
    G_full : (n_rec, 2N) jump rows on full nodal DOFs.
    G : (n_rec, n) the same rows on the bordered reduced space (zero multiplier columns).
    ref_offset : jump of the reference coordinates, the initial opening (>= 0).
    """

    G_full: sp.csr_matrix
    G: sp.csr_matrix
    ref_offset: np.ndarray

    @property
    def n_records(self) -> int:
        return int(self.G.shape[0])

    def jump(self, u_full: np.ndarray) -> np.ndarray:
        return self.G_full @ np.asarray(u_full, dtype=float).ravel()

    def gap(self, u_full: np.ndarray) -> np.ndarray:
        """Physical gap of a total nodal field (<= 0 feasible)."""
        return -self.jump(u_full) - self.ref_offset


def assemble_gap_operator(pairing: ContactPairing, mesh: PeriodicCellMesh,
                          T: sp.spmatrix | None = None) -> GapOperator:
    """Assemble the jump rows; ``T`` maps reduced DOFs to nodal DOFs."""
    rows, cols, vals = [], [], []
    N = mesh.n_nodes
    for i, rec in enumerate(pairing.records):
        if rec.nodes.size and (rec.nodes.min() < 0 or rec.nodes.max() >= N):
            raise ContactError(f"record {i} references a node outside the mesh")
        for node, (cx, cy) in zip(rec.nodes, rec.coeffs):
            rows += [i, i]
            cols += [2 * node, 2 * node + 1]
            vals += [cx, cy]
    G_full = sp.csr_matrix((vals, (rows, cols)), shape=(len(pairing), 2 * N))
    ref = G_full @ mesh.nodes.ravel()
    if T is None:
        G = G_full
    else:
        G = sp.hstack([G_full @ T, sp.csr_matrix((len(pairing), 2))], format="csr")
    return GapOperator(G_full, G.tocsr(), ref)


def assemble_schur(G: sp.spmatrix, F: Factorization, return_solves: bool = False):
    """Dense ``C = G A^-1 G'``; optionally also ``A^-1 G'``."""
    if G.shape[1] != F.n:
        raise ValueError(f"gap operator has {G.shape[1]} columns, factorization {F.n}")
    X = F.solve(np.asarray(G.T.todense()))
    X = X.reshape(F.n, -1)
    C = np.asarray(G @ X)
    scale = max(np.abs(C).max(initial=0.0), 1e-300)
    asym = np.abs(C - C.T).max(initial=0.0)
    if asym > 1e-9 * scale:
        raise ContactError(f"Schur complement asymmetric ({asym:.2e})")
    C = 0.5 * (C + C.T)
    return (C, X) if return_solves else C


def compute_h(F: Factorization, gap_op: GapOperator, stress_rhs: np.ndarray,
              u_mic_full: np.ndarray | None = None) -> np.ndarray:
    """Gap at zero multiplier: ``g(u_mic) - G A^-1 b``."""
    base = -gap_op.ref_offset if u_mic_full is None else gap_op.gap(u_mic_full)
    h = base - gap_op.G @ F.solve(stress_rhs)
    if "h-sign" in _FAULTS:
        h = -h
    return h


@dataclass
class SolveReport:
    """Diagnostics of a complementarity solve."""

    iterations: int = 0
    residual: float = 0.0
    history: list = field(default_factory=list)
    regularization: str = "none"
    n_active: int = 0


def semismooth_newton_cp(C: np.ndarray, h: np.ndarray, tol: float = 1e-10, max_iter: int = 50):
    """Solve ``min(C lam + h, lam) = 0`` by semi-smooth Newton (active-set form).

    Rows with ``(C lam + h)_i <= lam_i`` take the row of ``C`` (ties included), the
    others the identity row.  Each step solves the selected linear piece exactly;
    singular ``C_AA`` (duplicate records) is handled by the minimum-norm solution.

    Returns ``(lam, iterations, history)``; see :func:`semismooth_newton_report`.
    """
    lam, report = semismooth_newton_report(C, h, tol, max_iter)
    return lam, report.iterations, report.history


def semismooth_newton_report(C: np.ndarray, h: np.ndarray, tol: float = 1e-10, max_iter: int = 50):
    C = np.atleast_2d(np.asarray(C, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    n = h.size
    lam = np.zeros(n)
    history: list[float] = []
    seen: set[bytes] = set()
    report = SolveReport()
    for it in range(max_iter + 1):
        w = C @ lam + h
        res = float(np.abs(np.minimum(w, lam)).max(initial=0.0))
        history.append(res)
        if res <= tol:
            lam = np.maximum(lam, 0.0)
            report.iterations, report.residual, report.history = it, res, history
            report.n_active = int(np.count_nonzero(lam > 0))
            return lam, report
        if it == max_iter:
            break
        act = w <= lam
        key = act.tobytes()
        if key in seen:
            raise CyclingError(f"active set cycling after {it} iterations (residual {res:.3e})", history)
        seen.add(key)
        new = np.zeros(n)
        idx = np.flatnonzero(act)
        if idx.size:
            Caa = C[np.ix_(idx, idx)]
            sol, _, rank, _ = np.linalg.lstsq(Caa, -h[idx], rcond=1e-13)
            if rank < idx.size:
                report.regularization = "min-norm"
            new[idx] = sol
        lam = new
    raise NonConvergenceError(f"semi-smooth Newton did not converge in {max_iter} iterations "
                              f"(residual {history[-1]:.3e})", history)


def estimate_norm(C: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Spectral norm of a symmetric matrix by power iteration."""
    C = np.atleast_2d(C)
    x = np.random.default_rng(seed).standard_normal(C.shape[0])
    nrm = 0.0
    for _ in range(iters):
        y = C @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(ny - nrm) <= 1e-12 * ny:
            nrm = ny
            break
        nrm = ny
    return float(nrm)


def uzawa_local(C: np.ndarray, h: np.ndarray, beta: float | None = None, tol: float = 1e-10,
                max_iter: int = 100000, lam0: np.ndarray | None = None) -> np.ndarray:
    """Projected gradient fixed point ``lam = max(0, lam - beta (C lam + h))``.

    Raises :class:`StepSizeError` if the residual grows for 10 consecutive steps.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if beta is None:
        beta = 1.0 / max(estimate_norm(C), 1e-300)
    lam = np.zeros(h.size) if lam0 is None else np.array(lam0, dtype=float)
    history: list[float] = []
    growth = 0
    for _ in range(max_iter):
        res = float(np.abs(np.minimum(C @ lam + h, lam)).max(initial=0.0))
        if history and res > history[-1]:
            growth += 1
            if growth >= 10:
                raise StepSizeError(f"local Uzawa diverges with beta={beta:.3e}", history + [res])
        else:
            growth = 0
        history.append(res)
        if res <= tol:
            return lam
        lam = np.maximum(0.0, lam - beta * (C @ lam + h))
    raise NonConvergenceError(f"local Uzawa did not converge in {max_iter} iterations", history)


def recover_fluctuation(F: Factorization, G: sp.spmatrix, lam: np.ndarray,
                        stress_rhs: np.ndarray) -> np.ndarray:
    """Fluctuation increment ``A^-1 (b + G' lam)``."""
    return F.solve(stress_rhs + G.T @ lam)


def extract_active_set(lam, gap, eps_lambda: float = 1e-10, eps_gap: float = 1e-10) -> np.ndarray:
    """Records with positive pressure or (numerically) closed gap."""
    lam = np.asarray(lam)
    gap = np.asarray(gap)
    return np.flatnonzero((lam > eps_lambda) | (np.abs(gap) <= eps_gap))


@dataclass(frozen=True)
class CellContext:
    """Everything about a cell that is shared by all macroscopic quadrature points.

    Attributes
    ----------
    mesh, pairing, D : geometry, contact records and material.
    stiffness : bordered reduced operator and DOF map.
    F : factorization of ``stiffness.A``.
    gap : gap operator (full and reduced rows).
    C : dense Schur complement ``G A^-1 G'``.
    AinvGt : ``A^-1 G'`` (n x n_records), reused by the constrained solves.
    modes : (3, N, 2) macro fields of the unit Voigt strain modes.
    mode_loads : (3, n) stress loads of the unit modes.
    mode_forces : (3, 2N) ``K @ mode``, so that ``a(u, mode_k) = mode_forces[k] . u``.
    mode_jumps : (n_records, 3) jump rows applied to the unit modes.
    """

    mesh: PeriodicCellMesh
    pairing: ContactPairing | None
    D: ElasticTensor
    stiffness: CellStiffness
    F: Factorization
    gap: GapOperator
    C: np.ndarray
    AinvGt: np.ndarray
    modes: np.ndarray
    mode_loads: np.ndarray
    mode_forces: np.ndarray
    mode_jumps: np.ndarray

    @property
    def dofs(self):
        return self.stiffness.dofs

    @property
    def n_records(self) -> int:
        return self.gap.n_records


def unit_mode(k: int) -> np.ndarray:
    """Strain tensor of the unit engineering Voigt mode ``k``."""
    E = np.zeros((2, 2))
    if k < 2:
        E[k, k] = 1.0
    else:
        E[0, 1] = E[1, 0] = 0.5
    return E


def build_cell_context(mesh: PeriodicCellMesh, D: ElasticTensor,
                       pairing: ContactPairing | None = None) -> CellContext:
    """Assemble, factorize and build the gap operator and Schur complement once."""
    if pairing is None and mesh.boundary_edges["plus"].shape[0]:
        pairing = build_contact_pairing(mesh)
    stiff = assemble_cell_stiffness(mesh, D)
    F = factorize(stiff.A)
    if pairing is not None and len(pairing):
        gap = assemble_gap_operator(pairing, mesh, stiff.dofs.T)
        C, X = assemble_schur(gap.G, F, return_solves=True)
    else:
        n = stiff.dofs.n
        gap = GapOperator(sp.csr_matrix((0, 2 * mesh.n_nodes)), sp.csr_matrix((0, n)), np.zeros(0))
        C, X = np.zeros((0, 0)), np.zeros((n, 0))
    modes = np.array([macro_field(unit_mode(k), mesh) for k in range(3)])
    loads = np.array([stress_load(stiff, m) for m in modes])
    forces = np.array([stiff.K_full @ m.ravel() for m in modes])
    jumps = np.column_stack([gap.jump(m) for m in modes]).reshape(gap.n_records, 3)
    for a in (C, X, modes, loads, forces, jumps):
        a.setflags(write=False)
    return CellContext(mesh, pairing, D, stiff, F, gap, C, X, modes, loads, forces, jumps)


def effective_stress(ctx: CellContext, u_mic: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Energy-consistent macro stress (Voigt) ``a(u, mode_k) - lam . J(mode_k)``.

    The second term carries contact forces across the pore through the reference
    gap; without it the stress is not the derivative of the cell energy.
    """
    s = ctx.mode_forces @ np.asarray(u_mic, dtype=float).ravel()
    if ctx.n_records:
        s = s - ctx.mode_jumps.T @ lam
    return s


@dataclass
class MicroSolution:
    """Result of one local contact solve."""

    u1: np.ndarray
    lam: np.ndarray
    gap: np.ndarray
    active: np.ndarray
    u_mic: np.ndarray
    sigma: np.ndarray
    sigma_eff: np.ndarray
    report: SolveReport


@dataclass
class MicroState:
    """Mutable per-quadrature-point state, owned by a single macro point.

    Attributes
    ----------
    u1 : reduced fluctuation (bordered vector, multipliers last).
    u_mic : (N, 2) total micro field ``E y_hat + u1``.
    sigma : averaged micro stress over the solid part (2x2).
    sigma_eff : energy-consistent macro stress (Voigt), the derivative of the cell energy.
    lam, gap, active : contact multipliers, gaps and active set of the last solve.
    E : macro strain of the last solve.
    tangent, sensitivity : cached homogenized tangent and contact sensitivities.
    """

    u1: np.ndarray
    u_mic: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    gap: np.ndarray
    active: np.ndarray
    E: np.ndarray
    sigma_eff: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tangent: object = None
    sensitivity: object = None
    report: SolveReport | None = None

    def copy(self) -> "MicroState":
        return MicroState(self.u1.copy(), self.u_mic.copy(), self.sigma.copy(), self.lam.copy(),
                          self.gap.copy(), self.active.copy(), self.E.copy(), self.sigma_eff.copy(),
                          self.tangent, self.sensitivity, self.report)


def new_micro_state(ctx: CellContext) -> MicroState:
    """Virgin state: zero fluctuation, open reference gaps."""
    n_rec = ctx.n_records
    return MicroState(u1=np.zeros(ctx.dofs.n), u_mic=np.zeros((ctx.mesh.n_nodes, 2)),
                      sigma=np.zeros((2, 2)), lam=np.zeros(n_rec), gap=-ctx.gap.ref_offset.copy(),
                      active=np.zeros(0, dtype=np.int64), E=np.zeros((2, 2)))


def solve_local_contact(state: MicroState, E_macro, ctx: CellContext, tol: float = 1e-10,
                        max_iter: int = 50, eps: float = 1e-10, where: str = "") -> MicroSolution:
    """Solve the cell contact problem for macro strain ``E_macro`` and update ``state``."""
    E = np.asarray(E_macro, dtype=float)
    aff = macro_field(E, ctx.mesh)
    u_mic0 = aff + ctx.dofs.expand(state.u1)
    b = stress_load(ctx.stiffness, u_mic0)
    if ctx.n_records:
        h = compute_h(ctx.F, ctx.gap, b, u_mic0)
        try:
            lam, report = semismooth_newton_report(ctx.C, -h, tol=tol, max_iter=max_iter)
        except NonConvergenceError as exc:
            raise type(exc)(f"{where}: {exc}" if where else str(exc), exc.history) from exc
        dq = ctx.F.solve(b) + ctx.AinvGt @ lam
    else:
        lam, report = np.zeros(0), SolveReport()
        dq = ctx.F.solve(b)
    u1 = state.u1 + dq
    u_mic = aff + ctx.dofs.expand(u1)
    gap = ctx.gap.gap(u_mic)
    active = extract_active_set(lam, gap, eps, eps)
    sigma = average_stress(ctx.mesh, ctx.D, u_mic)
    sigma_eff = effective_stress(ctx, u_mic, lam)
    report.n_active = int(active.size)
    state.u1, state.u_mic, state.sigma, state.sigma_eff = u1, u_mic, sigma, sigma_eff
    state.lam, state.gap, state.active, state.E = lam, gap, active, E.copy()
    state.tangent = state.sensitivity = None
    state.report = report
    return MicroSolution(u1, lam, gap, active, u_mic, sigma, sigma_eff, report)
