"""Two-scale incremental driver and the three macroscopic step methods.

``ml``         linear macro step with the tangent of the full active sets.
``mc-uzawa``   macro contact step, multipliers by projected (Uzawa) iteration.
``mc-newton``  macro contact step, semi-smooth Newton (primal-dual active set).

The macro contact step solves, in reduced macro DOFs ``v``,

    K dv + M' lam = r + M' lam0,   lam >= 0,   g = M dv + s - C (lam - lam0) <= 0,   lam . g = 0,

where each row of ``M`` is ``w_q p_e B_q`` for a monitored record ``e`` at quadrature
point ``q`` (``p_e`` the gap sensitivity, ``w_q`` the quadrature weight),
``s_e = w_q s~_e`` its weighted current gap, ``lam0`` the record's current micro
contact force and ``C`` the weighted block-diagonal compliance of the monitored
records with the reduced active set held bilateral.  ``lam`` is therefore the total
contact force on a monitored record, which may drop to zero (unloading).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import voigt_to_tensor
from .homog import HomogenizedTangent, contact_sensitivity, entry_compliance, tangent_for
from .mesh import MacroMesh
from .microsolver import (CellContext, CyclingError, MicroState, NonConvergenceError, estimate_norm,
                          new_micro_state, solve_local_contact)

__all__ = [
    "METHODS",
    "FULL",
    "BoundaryConditions",
    "MacroProblem",
    "SolverSettings",
    "SigmaGammaSet",
    "MacroState",
    "IterationRecord",
    "TwoScaleResult",
    "MacroSolveError",
    "assemble_macro_tangent",
    "out_of_balance",
    "boundary_set",
    "build_sigma_gamma",
    "ml_increment",
    "mc_uzawa_solve",
    "mc_nonsmooth_solve",
    "two_scale_solve",
]

log = logging.getLogger(__name__)

METHODS = ("ml", "mc-uzawa", "mc-newton")
FULL = -1  # gamma sentinel: monitor every inactive record


class MacroSolveError(NonConvergenceError):
    """Failure of the macro iteration, annotated with load step and outer iteration."""


@dataclass(frozen=True)
class BoundaryConditions:
    """Macro boundary data on tagged edges.

    Attributes
    ----------
    fixed : (tag, component, value) prescribed displacements.
    tied : (tag, component) groups whose DOFs share one unknown.
    tractions : (tag, (tx, ty)) constant tractions, GPa.
    """

    fixed: tuple = ()
    tied: tuple = ()
    tractions: tuple = ()


class MacroProblem:
    """Macro mesh, shared cell context and boundary data with the derived reductions.

    Full DOFs are ``u = u_D + T v``; ``T`` eliminates prescribed DOFs and merges tied
    groups into one column each.
    """

    def __init__(self, mesh: MacroMesh, ctx: CellContext, bc: BoundaryConditions):
        self.mesh = mesh
        self.ctx = ctx
        self.bc = bc
        n = 2 * mesh.n_nodes
        self.n_full = n
        prescribed = {}
        for tag, comp, val in bc.fixed:
            for node in mesh.boundary_nodes(tag):
                prescribed[2 * int(node) + int(comp)] = float(val)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for tag, comp in bc.tied:
            dofs = [2 * int(nd) + int(comp) for nd in mesh.boundary_nodes(tag)]
            dofs = [d for d in dofs if d not in prescribed]
            for d in dofs[1:]:
                parent[find(d)] = find(dofs[0])
        free = [d for d in range(n) if d not in prescribed]
        roots = sorted({find(d) for d in free})
        col = {r: k for k, r in enumerate(roots)}
        T = sp.csr_matrix((np.ones(len(free)), (free, [col[find(d)] for d in free])),
                          shape=(n, len(roots)))
        self.T = T
        self.n_red = len(roots)
        self.prescribed = prescribed
        uD = np.zeros(n)
        for d, v in prescribed.items():
            uD[d] = v
        self.u_D = uD
        f = np.zeros(n)
        for tag, t in bc.tractions:
            for a, b in mesh.boundary[tag]:
                L = float(np.linalg.norm(mesh.nodes[b] - mesh.nodes[a]))
                for node in (a, b):
                    f[2 * node: 2 * node + 2] += 0.5 * L * np.asarray(t, dtype=float)
        self.f_ext = f
        self.edofs = mesh.element_dofs()
        self.qp_dofs = np.repeat(self.edofs, 4, axis=0)

    def strains(self, u_full: np.ndarray) -> np.ndarray:
        """(n_qp, 3) engineering Voigt strains."""
        return np.einsum("qij,qj->qi", self.mesh.qp_B, u_full[self.qp_dofs])

    def reduce_vector(self, r_full: np.ndarray) -> np.ndarray:
        return self.T.T @ r_full

    def reduce_matrix(self, K: sp.spmatrix) -> sp.csc_matrix:
        return (self.T.T @ K @ self.T).tocsc()


def assemble_macro_tangent(mesh: MacroMesh, DH) -> sp.csr_matrix:
    """Full (pre-BC) stiffness with one Voigt tangent per quadrature point."""
    DH = np.asarray(DH, dtype=float)
    if DH.shape != (mesh.n_qp, 3, 3):
        raise ValueError(f"need {mesh.n_qp} tangents of shape (3, 3), got {DH.shape}")
    B, w = mesh.qp_B, mesh.qp_weights
    kq = np.einsum("qji,qjk,qkl->qil", B, DH, B) * w[:, None, None]
    ke = kq.reshape(-1, 4, 8, 8).sum(axis=1)
    dofs = mesh.element_dofs()
    r = np.repeat(dofs, 8, axis=1).ravel()
    c = np.tile(dofs, (1, 8)).ravel()
    n = 2 * mesh.n_nodes
    K = sp.coo_matrix((ke.ravel(), (r, c)), shape=(n, n)).tocsr()
    return (0.5 * (K + K.T)).tocsr()


def out_of_balance(mesh: MacroMesh, f_ext: np.ndarray, sigma, dirichlet=None) -> np.ndarray:
    """``f - sum_q w_q B_q' sigma_q`` (Voigt stresses), prescribed rows zeroed."""
    sigma = np.asarray(sigma, dtype=float).reshape(mesh.n_qp, 3)
    fq = np.einsum("qji,qj->qi", mesh.qp_B, sigma) * mesh.qp_weights[:, None]
    r = np.array(f_ext, dtype=float)
    np.add.at(r, np.repeat(mesh.element_dofs(), 4, axis=0), -fq)
    if dirichlet is not None:
        r[list(dirichlet)] = 0.0
    return r


# ---------------------------------------------------------------------------
# two-scale contact set
# ---------------------------------------------------------------------------

def boundary_set(active_mask: np.ndarray, chains, gamma: int, closed=()) -> np.ndarray:
    """Records within ``gamma`` hops of a change of activity along the chains.

    Activity boundaries sit halfway between neighbours of different status; a record
    at chain position ``i`` belongs to the set if it is within ``gamma`` hops of a
    boundary between positions ``k`` and ``k + 1``.  ``closed[j]`` marks chain ``j``
    as cyclic, so that its last and first records are neighbours.
    """
    out = []
    for j, chain in enumerate(chains):
        cyclic = bool(closed[j]) if j < len(closed) else False
        a = active_mask[chain]
        n = chain.size
        nxt = np.roll(a, -1) if cyclic else a[1:]
        ks = np.flatnonzero(a[: nxt.size] != nxt)
        if ks.size == 0:
            continue
        d = np.arange(n)[:, None] - (ks[None, :] + 0.5)
        if cyclic:
            d = (d + 0.5 * n) % n - 0.5 * n
        near = (np.abs(d) <= gamma + 1e-12).any(axis=1)
        out.append(chain[near])
    if not out:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(out))


@dataclass
class SigmaGammaSet:
    """Discrete two-scale contact set.

    Attributes
    ----------
    qp, record : quadrature point and record of each entry.
    P : (k, 3) gap sensitivity rows; ``s`` : (k,) current gaps.
    gamma : neighbourhood radius in hops (``FULL`` for every inactive record).
    reduced_active : per quadrature point, records held bilateral in the tangent.
    lam0 : (k,) current micro contact forces of the entries.
    compliance : per quadrature point with entries, the entries' compliance block.
    """

    qp: np.ndarray
    record: np.ndarray
    P: np.ndarray
    s: np.ndarray
    gamma: int
    reduced_active: list = field(default_factory=list)
    lam0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    compliance: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.qp.size)


def monitored_records(ctx: CellContext, active: np.ndarray, gamma: int):
    """Monitored records and the reduced active set for one quadrature point."""
    n = ctx.n_records
    mask = np.zeros(n, dtype=bool)
    mask[active] = True
    if gamma < 0:
        return np.flatnonzero(~mask), np.asarray(active, dtype=np.int64)
    chains = ctx.pairing.chains if ctx.pairing is not None else ()
    closed = ctx.pairing.closed if ctx.pairing is not None else ()
    entries = boundary_set(mask, chains, gamma, closed)
    return entries, np.setdiff1d(active, entries)


def build_sigma_gamma(micro: list, ctx: CellContext, gamma: int, threads: int = 1,
                      cache: dict | None = None):
    """Entries of the two-scale contact set plus per-point tangents on the reduced active set.

    Returns ``(SigmaGammaSet, tangents)``; tangents are cached by reduced active set.
    """
    per_qp = [monitored_records(ctx, st.active, gamma) for st in micro]
    tangents = _tangents(ctx, [red for _, red in per_qp], threads, cache)
    qp, rec, P, s, lam0, comp = [], [], [], [], [], []
    for q, ((entries, red), st, tg) in enumerate(zip(per_qp, micro, tangents)):
        if entries.size == 0:
            continue
        sens = contact_sensitivity(tg.correctors, ctx, entries, st.u_mic)
        st.sensitivity = sens
        qp.append(np.full(entries.size, q))
        rec.append(entries)
        P.append(sens.P)
        s.append(sens.s)
        lam0.append(st.lam[entries] if st.lam is not None else np.zeros(entries.size))
        comp.append(entry_compliance(ctx, entries, red))
    reduced = [red for _, red in per_qp]
    if qp:
        sg = SigmaGammaSet(np.concatenate(qp), np.concatenate(rec), np.vstack(P), np.concatenate(s),
                           gamma, reduced, np.concatenate(lam0), comp)
    else:
        sg = SigmaGammaSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                           np.zeros((0, 3)), np.zeros(0), gamma, reduced)
    return sg, tangents


def _tangents(ctx, sets, threads, cache) -> list[HomogenizedTangent]:
    cache = {} if cache is None else cache
    keys = [np.asarray(a, dtype=np.int64).tobytes() for a in sets]
    todo = {k: a for k, a in zip(keys, sets) if k not in cache}
    items = list(todo.items())
    if items:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            results = list(ex.map(lambda kv: tangent_for(ctx, kv[1]), items))
        for (k, _), tg in zip(items, results):
            cache[k] = tg
    return [cache[k] for k in keys]


# ---------------------------------------------------------------------------
# macro step methods
# ---------------------------------------------------------------------------

def ml_increment(K: sp.spmatrix, r: np.ndarray) -> np.ndarray:
    """Linear step ``K dv = r``."""
    try:
        lu = spla.splu(sp.csc_matrix(K))
    except RuntimeError as exc:
        raise MacroSolveError(f"singular macro stiffness: {exc}") from exc
    return lu.solve(r)


def _prepare(K, M):
    lu = spla.splu(sp.csc_matrix(K))
    Mt = M.T.toarray() if sp.issparse(M) else np.asarray(M).T
    Z = lu.solve(np.ascontiguousarray(Mt)) if Mt.size else np.zeros((K.shape[0], 0))
    return lu, Mt, Z.reshape(K.shape[0], -1)


def _compliance(C, m: int) -> np.ndarray:
    if C is None:
        return np.zeros((m, m))
    C = C.toarray() if sp.issparse(C) else np.asarray(C, dtype=float)
    if C.shape != (m, m):
        raise ValueError(f"compliance must be {m}x{m}, got {C.shape}")
    return C


def _dual_scale(Mt, Z, C=None) -> float:
    S = Mt.T @ Z
    if C is not None:
        S = S + C
    return 1.0 / max(estimate_norm(0.5 * (S + S.T)), 1e-300)


def mc_uzawa_solve(K, r, M, s, beta0: float | None = None, tol: float = 1e-10,
                   max_iter: int = 100000, C=None):
    """Uzawa iteration for the macro contact step.

    Solves ``K dv + M' lam = r``, ``lam >= 0``, ``g = M dv + s - C lam <= 0``,
    ``lam . g = 0`` (``C`` positive semidefinite, zero if omitted).  Starts from
    ``lam = 0``; ``lam <- max(0, lam + beta g)``.  Stops when the multiplier update
    and its nodal force, both divided by ``beta``, are below ``tol``.  ``beta`` is
    halved whenever the dual objective fails to increase.  Returns ``(dv, lam, history)``.
    """
    lu, Mt, Z = _prepare(K, M)
    u_r = lu.solve(r)
    m = Mt.shape[1]
    if m == 0:
        return u_r, np.zeros(0), [0.0]
    C = _compliance(C, m)
    beta = float(beta0) if beta0 is not None else _dual_scale(Mt, Z, C)
    lam = np.zeros(m)
    history: list[float] = []

    def dual(l):
        du = u_r - Z @ l
        return -0.5 * du @ (r - Mt @ l) + l @ s - 0.5 * l @ (C @ l), du

    d_old, du = dual(lam)
    for it in range(max_iter):
        g = Mt.T @ du + s - C @ lam
        new = np.maximum(0.0, lam + beta * g)
        d_new, du_new = dual(new)
        if d_new < d_old - 1e-14 * max(1.0, abs(d_old)):
            beta *= 0.5
            continue
        step = new - lam
        dl = float(np.abs(step).max()) / beta
        df = float(np.abs(Mt @ step).max()) / beta
        history.append(max(dl, df))
        lam, du, d_old = new, du_new, d_new
        if dl <= tol and df <= tol:
            return du, lam, history
    raise MacroSolveError(f"Uzawa did not converge in {max_iter} iterations "
                          f"(last update {history[-1] if history else float('nan'):.3e})", history)


def mc_nonsmooth_solve(K, r, M, s, tol: float = 1e-12, max_iter: int = 50, C=None):
    """Semi-smooth Newton on ``K dv + M' lam = r``, ``max(-lam, M dv + s - C lam) = 0``.

    Rows with ``c g_e >= -lam_e`` are treated as active (ties included),
    ``c = 1 / ||M K^-1 M' + C||`` balancing the units of multipliers and gaps.  Each
    step solves the selected KKT system exactly (minimum-norm multipliers when rows
    are dependent).  Returns ``(dv, lam, history)``.
    """
    lu, Mt, Z = _prepare(K, M)
    u_r = lu.solve(r)
    m = Mt.shape[1]
    if m == 0:
        return u_r, np.zeros(0), [0.0]
    C = _compliance(C, m)
    c = _dual_scale(Mt, Z, C)
    lam = np.zeros(m)
    du = u_r.copy()
    history: list[float] = []
    seen: set[bytes] = set()
    scale = max(1.0, float(np.abs(r).max(initial=0.0)))
    for it in range(max_iter + 1):
        g = Mt.T @ du + s - C @ lam
        Ru = K @ du + Mt @ lam - r
        Rl = np.maximum(-lam, g)
        res = max(float(np.abs(Ru).max(initial=0.0)) / scale, float(np.abs(Rl).max(initial=0.0)))
        history.append(res)
        if res <= tol:
            return du, np.maximum(lam, 0.0), history
        if it == max_iter:
            break
        act = c * g >= -lam
        key = act.tobytes()
        if key in seen:
            raise CyclingError(f"macro active set cycling after {it} iterations", history)
        seen.add(key)
        idx = np.flatnonzero(act)
        lam = np.zeros(m)
        if idx.size:
            S = Mt[:, idx].T @ Z[:, idx] + C[np.ix_(idx, idx)]
            lam[idx] = np.linalg.lstsq(S, Mt[:, idx].T @ u_r + s[idx], rcond=1e-13)[0]
        du = u_r - Z @ lam
    raise MacroSolveError(f"macro Newton did not converge in {max_iter} iterations", history)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class SolverSettings:
    """Macro iteration controls.

    ``tol_outer`` is on ``||r||_inf / ||f||_inf``.  A run whose relative residual is
    below ``tol_stall`` and has stopped decreasing for ``stall_window`` iterations is
    reported as converged on a plateau (the Uzawa variant cannot go below its inner
    tolerance).
    """

    method: str = "ml"
    gamma: int = 1
    tol_outer: float = 1e-12
    max_outer: int = 40
    tol_inner: float = 1e-10
    max_inner: int = 100000
    newton_tol: float = 1e-12
    beta0: float | None = None
    micro_tol: float = 1e-10
    micro_max_iter: int = 50
    load_steps: int = 1
    threads: int = 1
    tol_stall: float = 1e-6
    stall_window: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")


@dataclass
class IterationRecord:
    step: int
    outer_iter: int
    method: str
    norm_du: float
    norm_r: float
    norm_lambda: float
    n_active_total: int

    def as_row(self) -> list:
        return [self.step, self.outer_iter, self.method, self.norm_du, self.norm_r,
                self.norm_lambda, self.n_active_total]


@dataclass
class MacroState:
    """Macro displacement, per-point micro states and the macro multipliers."""

    u0: np.ndarray
    micro: list
    lambda_macro: np.ndarray
    load_factor: float = 0.0
    sigma_gamma: SigmaGammaSet | None = None

    def copy(self) -> "MacroState":
        return MacroState(self.u0.copy(), [m.copy() for m in self.micro], self.lambda_macro.copy(),
                          self.load_factor, self.sigma_gamma)

    @property
    def n_contact(self) -> np.ndarray:
        return np.array([m.active.size for m in self.micro])

    def stresses(self) -> np.ndarray:
        """(n_qp, 3) energy-consistent macro stresses (Voigt)."""
        return np.array([m.sigma_eff for m in self.micro])


@dataclass
class TwoScaleResult:
    state: MacroState
    steps: list
    history: list
    converged: bool
    status: str


def _solve_micro(problem: MacroProblem, state: MacroState, settings: SolverSettings, step: int, it: int):
    eps = problem.strains(state.u0)
    Es = voigt_to_tensor(eps)
    ctx = problem.ctx

    def one(q):
        return solve_local_contact(state.micro[q], Es[q], ctx, tol=settings.micro_tol,
                                   max_iter=settings.micro_max_iter,
                                   where=f"step {step}, outer {it}, quadrature point {q}")

    with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as ex:
        list(ex.map(one, range(len(state.micro))))


def two_scale_solve(problem: MacroProblem, settings: SolverSettings, on_record=None,
                    state: MacroState | None = None) -> TwoScaleResult:
    """Incremental two-scale solve; ``on_record`` receives each :class:`IterationRecord`."""
    mesh, ctx = problem.mesh, problem.ctx
    if state is None:
        state = MacroState(u0=np.zeros(problem.n_full),
                           micro=[new_micro_state(ctx) for _ in range(mesh.n_qp)],
                           lambda_macro=np.zeros(0))
    history: list[IterationRecord] = []
    steps: list[MacroState] = []
    cache: dict = {}
    status = "converged"
    n_steps = max(1, int(settings.load_steps))
    for step in range(1, n_steps + 1):
        factor = step / n_steps
        state.load_factor = factor
        state.u0 = problem.u_D * factor + _free_part(problem, state.u0)
        f = problem.f_ext * factor
        f_red = problem.reduce_vector(f)
        f_norm = float(np.abs(f_red).max(initial=0.0))
        norms: list[float] = []
        converged = False
        for it in range(1, settings.max_outer + 1):
            try:
                _solve_micro(problem, state, settings, step, it)
                if settings.method == "ml":
                    sets = [st.active for st in state.micro]
                    tangents = _tangents(ctx, sets, settings.threads, cache)
                    sg = None
                else:
                    sg, tangents = build_sigma_gamma(state.micro, ctx, settings.gamma,
                                                     settings.threads, cache)
                for st, tg in zip(state.micro, tangents):
                    st.tangent = tg
                r_full = out_of_balance(mesh, f, state.stresses())
                r = problem.reduce_vector(r_full)
                norm_r = float(np.abs(r).max(initial=0.0)) / (f_norm if f_norm > 0 else 1.0)
                n_act = int(sum(st.active.size for st in state.micro))
                stalled = (len(norms) >= settings.stall_window and norm_r <= settings.tol_stall
                           and norm_r >= 0.5 * min(norms[-settings.stall_window:]))
                if norm_r <= settings.tol_outer or stalled:
                    rec = IterationRecord(step, it, settings.method, 0.0, norm_r, 0.0, n_act)
                    history.append(rec)
                    if on_record:
                        on_record(rec)
                    converged = True
                    status = "converged" if norm_r <= settings.tol_outer else "plateau"
                    state.sigma_gamma = sg
                    break
                norms.append(norm_r)
                K = problem.reduce_matrix(assemble_macro_tangent(mesh, np.array([t.DH for t in tangents])))
                if settings.method == "ml":
                    dv, lam = ml_increment(K, r), np.zeros(0)
                else:
                    M, s, C, lam0 = _constraint_rows(problem, sg)
                    rt = r + M.T @ lam0
                    st_ = s + C @ lam0
                    if settings.method == "mc-uzawa":
                        dv, lam, _ = mc_uzawa_solve(K, rt, M, st_, settings.beta0, settings.tol_inner,
                                                    settings.max_inner, C)
                    else:
                        dv, lam, _ = mc_nonsmooth_solve(K, rt, M, st_, settings.newton_tol,
                                                        settings.micro_max_iter, C)
                    if lam.size and lam.min() < 0.0:
                        raise MacroSolveError("negative macro multiplier")
                du = problem.T @ dv
                state.u0 = state.u0 + du
                state.lambda_macro = lam
                state.sigma_gamma = sg
                rec = IterationRecord(step, it, settings.method, float(np.abs(du).max(initial=0.0)),
                                      norm_r, float(np.abs(lam).max(initial=0.0)), n_act)
                history.append(rec)
                if on_record:
                    on_record(rec)
            except NonConvergenceError as exc:
                if isinstance(exc, MacroSolveError) and str(exc).startswith("step "):
                    raise
                raise MacroSolveError(f"step {step}, outer iteration {it}: {exc}",
                                      getattr(exc, "history", [])) from exc
        steps.append(state.copy())
        if not converged:
            raise MacroSolveError(f"step {step}: no convergence in {settings.max_outer} outer iterations "
                                  f"(last relative residual {norms[-1] if norms else float('nan'):.3e})",
                                  [h.norm_r for h in history])
    return TwoScaleResult(state, steps, history, True, status)


def _free_part(problem: MacroProblem, u0: np.ndarray) -> np.ndarray:
    out = np.array(u0, dtype=float)
    out[list(problem.prescribed)] = 0.0
    return out


def _constraint_rows(problem: MacroProblem, sg: SigmaGammaSet):
    mesh = problem.mesh
    if sg is None or len(sg) == 0:
        return sp.csr_matrix((0, problem.n_red)), np.zeros(0), sp.csr_matrix((0, 0)), np.zeros(0)
    B, w = mesh.qp_B, mesh.qp_weights
    vals = np.einsum("ei,eij->ej", sg.P, B[sg.qp]) * w[sg.qp][:, None]
    rows = np.repeat(np.arange(len(sg)), 8)
    cols = problem.qp_dofs[sg.qp].ravel()
    M = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(len(sg), problem.n_full)) @ problem.T
    qps = np.unique(sg.qp)
    C = sp.block_diag([w[q] * blk for q, blk in zip(qps, sg.compliance)], format="csr")
    return M.tocsr(), sg.s * w[sg.qp], C, sg.lam0
