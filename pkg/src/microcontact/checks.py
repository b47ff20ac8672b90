"""Oracles and property suites behind ``microcontact check`` and the acceptance tests.

The oracles deliberately avoid the production code paths they validate:

* :func:`brute_force_contact` enumerates every active set of the primal contact
  problem and solves each KKT system densely (no Schur complement, no Newton).
* :func:`classical_homogenization` assembles its own stiffness, imposes periodicity
  by explicit node elimination and pins one node instead of the mean constraints.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import microsolver
from .fem import ElasticTensor, affine_field, macro_field, plane_strain_tensor, stress_load, voigt_to_tensor
from .homog import effective_stress_tangent_check, open_tangent, tangent_for
from .mesh import PeriodicCellMesh, generate_cell_ring, generate_cell_slit, generate_macro_mesh
from .microsolver import CellContext, build_cell_context, new_micro_state, solve_local_contact

__all__ = [
    "CheckResult",
    "SUITES",
    "E_A",
    "E_B",
    "RING_SCENARIO",
    "material",
    "slit_context",
    "ring_context",
    "coarse_slit_context",
    "brute_force_contact",
    "classical_homogenization",
    "run_suites",
    "format_table",
    "inject_fault",
]

E_A = np.array([0.014, -0.04, 0.0])   # 0.04 diag(0.35, -1), engineering Voigt
E_B = np.array([0.0, 0.0, 0.05])      # engineering shear 0.05
RING_SCENARIO = dict(hole_radius=0.35, inclusion_radius=0.335, target_edge_length=0.05)


def material() -> ElasticTensor:
    return plane_strain_tensor(2.3, 0.3)


@lru_cache(maxsize=None)
def slit_context() -> CellContext:
    return build_cell_context(generate_cell_slit(0.6, 0.02, 0.05), material())


@lru_cache(maxsize=None)
def ring_context() -> CellContext:
    return build_cell_context(generate_cell_ring(**RING_SCENARIO), material())


@lru_cache(maxsize=None)
def coarse_slit_context() -> CellContext:
    return build_cell_context(generate_cell_slit(0.6, 0.02, 0.125), material())


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def brute_force_contact(ctx: CellContext, E_voigt, gap_tol: float = 1e-10, lam_tol: float = 1e-10):
    """Primal contact solution by enumeration of all active sets.

    Records whose gap rows and reference gaps coincide describe the same half-space
    and are grouped first; every subset ``S`` of groups is then tried.  For each, the
    equality-constrained problem (groups in ``S`` closed) is solved from its full KKT
    system with a dense least-squares solve, and the group force is shared equally by
    its records (the minimum-norm split).  Feasible points have ``lam >= 0`` and all
    gaps ``<= 0``.  The primal field is unique; the largest feasible set is returned.
    Returns ``(u_mic, lam, active)``.
    """
    E = voigt_to_tensor(np.asarray(E_voigt, dtype=float))
    aff = macro_field(E, ctx.mesh)
    A = ctx.stiffness.A.toarray()
    b = stress_load(ctx.stiffness, aff)
    G = ctx.gap.G.toarray()
    base = ctx.gap.gap(aff)
    n, m = A.shape[0], G.shape[0]
    groups: list[list[int]] = []
    for i in range(m):
        for grp in groups:
            j = grp[0]
            if np.abs(G[i] - G[j]).max() <= 1e-12 and abs(base[i] - base[j]) <= 1e-12:
                grp.append(i)
                break
        else:
            groups.append([i])
    reps = [g[0] for g in groups]
    best = None
    for k in range(len(groups), -1, -1):
        for S in itertools.combinations(range(len(groups)), k):
            rows = [reps[g] for g in S]
            K = np.zeros((n + k, n + k))
            K[:n, :n] = A
            K[:n, n:] = -G[rows].T
            K[n:, :n] = -G[rows]
            rhs = np.concatenate([b, -base[rows]])
            sol = np.linalg.lstsq(K, rhs, rcond=1e-12)[0]
            if np.abs(K @ sol - rhs).max() > 1e-9 * max(1.0, np.abs(rhs).max()):
                continue
            dq, lamS = sol[:n], sol[n:]
            gaps = base - G @ dq
            if lamS.size and lamS.min() < -lam_tol:
                continue
            if gaps.max(initial=-np.inf) > gap_tol:
                continue
            lam = np.zeros(m)
            active = []
            for g, f in zip(S, lamS):
                lam[groups[g]] = f / len(groups[g])
                active += groups[g]
            best = (aff + ctx.dofs.expand(dq), lam, np.array(sorted(active), dtype=np.int64))
            break
        if best is not None:
            break
    if best is None:
        raise RuntimeError("no feasible KKT point found")
    return best


def _own_stiffness(mesh: PeriodicCellMesh, D: ElasticTensor) -> np.ndarray:
    N = mesh.n_nodes
    K = np.zeros((2 * N, 2 * N))
    Dm = np.asarray(D.voigt)
    for tri in mesh.elements:
        x = mesh.nodes[tri]
        J = np.array([x[1] - x[0], x[2] - x[0]]).T
        area = 0.5 * np.linalg.det(J)
        grads = np.linalg.solve(J.T, np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]]))
        B = np.zeros((3, 6))
        B[0, 0::2] = grads[0]
        B[1, 1::2] = grads[1]
        B[2, 0::2] = grads[1]
        B[2, 1::2] = grads[0]
        dofs = np.ravel([[2 * a, 2 * a + 1] for a in tri])
        K[np.ix_(dofs, dofs)] += area * B.T @ Dm @ B
    return K


def classical_homogenization(mesh: PeriodicCellMesh, D: ElasticTensor) -> np.ndarray:
    """Periodic homogenization without any contact machinery, by dense energy minimization.

    A rigid inclusion moves as a free rigid body. Returns the (3, 3) Voigt tangent.
    """
    N = mesh.n_nodes
    K = _own_stiffness(mesh, D)
    rigid = np.zeros(N, dtype=bool)
    rigid[mesh.rigid_nodes] = True
    master = np.arange(N)
    pp = mesh.periodic_pairs
    master[pp.slave] = pp.master
    used = [i for i in np.unique(master[~rigid])]
    col = {node: j for j, node in enumerate(used)}
    n_rigid = 3 if rigid.any() else 0
    Q = np.zeros((2 * N, 2 * len(used) + n_rigid))
    c = mesh.nodes[rigid].mean(axis=0) if n_rigid else np.zeros(2)
    off = 2 * len(used)
    for i in range(N):
        if rigid[i]:
            d = mesh.nodes[i] - c
            Q[2 * i, off:off + 3] = [1.0, 0.0, -d[1]]
            Q[2 * i + 1, off:off + 3] = [0.0, 1.0, d[0]]
        else:
            j = col[master[i]]
            Q[2 * i, 2 * j] = 1.0
            Q[2 * i + 1, 2 * j + 1] = 1.0
    Kq = Q.T @ K @ Q
    keep = np.arange(2, Kq.shape[0])  # pin the first independent node
    fields = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        aff = mesh.nodes @ voigt_to_tensor(e).T
        aff[rigid] = 0.0
        aff = aff.ravel()
        rhs = -(Q.T @ (K @ aff))
        z = np.zeros(Kq.shape[0])
        z[keep] = np.linalg.solve(Kq[np.ix_(keep, keep)], rhs[keep])
        fields.append(aff + Q @ z)
    F = np.array(fields)
    return F @ K @ F.T / mesh.cell_area


# ---------------------------------------------------------------------------
# property suites
# ---------------------------------------------------------------------------

def _kkt(ctx: CellContext, E_voigt):
    st = new_micro_state(ctx)
    sol = solve_local_contact(st, voigt_to_tensor(E_voigt), ctx, tol=1e-10, max_iter=30)
    lam, gap = sol.lam, sol.gap
    comp = float(np.abs(np.minimum(lam, -gap)).max(initial=0.0))
    return sol, comp


def _kkt_property(ctx_fn, E, need_contact=True):
    def run():
        sol, comp = _kkt(ctx_fn(), E)
        ok = (comp <= 1e-10 and sol.lam.min(initial=0.0) >= 0.0 and sol.gap.max(initial=-1.0) <= 1e-9
              and sol.report.iterations <= 30 and (sol.active.size > 0 or not need_contact))
        return ok, (f"iterations={sol.report.iterations} complementarity={comp:.2e} "
                    f"max_gap={sol.gap.max(initial=0.0):.2e} active={sol.active.size}")
    return run


def _oracle_property():
    ctx = coarse_slit_context()
    sol, _ = _kkt(ctx, E_A)
    u_ref, lam_ref, _ = brute_force_contact(ctx, E_A)
    du = float(np.abs(sol.u_mic - u_ref).max())
    dl = float(np.abs(sol.lam - lam_ref).max())
    return du <= 1e-8 and dl <= 1e-8, f"|du|={du:.2e} |dlam|={dl:.2e} records={ctx.n_records}"


def _gap_constants():
    worst = 0.0
    for ctx in (slit_context(), ring_context()):
        for c in (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.3, -0.7])):
            u = np.tile(c, (ctx.mesh.n_nodes, 1))
            worst = max(worst, float(np.abs(ctx.gap.jump(u)).max()))
    return worst <= 1e-13, f"max |jump(const)|={worst:.2e}"


def _shift_identity():
    worst = 0.0
    for ctx in (slit_context(), ring_context()):
        pp = ctx.mesh.periodic_pairs
        rng = np.random.default_rng(3)
        for _ in range(5):
            E = voigt_to_tensor(rng.standard_normal(3))
            u = affine_field(E, ctx.mesh)
            lhs = u[pp.slave] - u[pp.master]
            rhs = pp.shift @ E.T
            worst = max(worst, float(np.abs(lhs - rhs).max()))
    return worst <= 1e-13, f"max shift-identity error={worst:.2e}"


def _homog_oracle():
    worst = 0.0
    for ctx in (slit_context(), ring_context()):
        ref = classical_homogenization(ctx.mesh, ctx.D)
        DH = open_tangent(ctx).DH
        worst = max(worst, float(np.abs(DH - ref).max() / np.abs(ref).max()))
    return worst <= 1e-10, f"relative |DH - classical|={worst:.2e}"


def _tangent_fd(ctx_fn, E):
    def run():
        chk = effective_stress_tangent_check(ctx_fn(), voigt_to_tensor(E), 1e-7)
        return chk.max_rel_error <= 1e-5, (f"max relative error={chk.max_rel_error:.2e} "
                                            f"active={chk.active.size} conclusive={chk.conclusive}")
    return run


def _monotone():
    ctx = slit_context()
    rng = np.random.default_rng(7)
    X = rng.standard_normal((100, 3))
    worst, strict = np.inf, 0.0
    for _ in range(5):
        order = rng.permutation(ctx.n_records)
        cuts = np.sort(rng.choice(np.arange(1, ctx.n_records), size=3, replace=False))
        chain = [np.zeros(0, dtype=np.int64)] + [np.sort(order[:c]) for c in cuts] + [np.sort(order)]
        D = [tangent_for(ctx, S).DH for S in chain]
        for lo, hi in zip(D[:-1], D[1:]):
            d = np.einsum("ni,ij,nj->n", X, hi - lo, X)
            worst = min(worst, float(d.min()))
            strict = max(strict, float(d.max()))
    ok = worst >= -1e-10 and strict > 0.0
    return ok, f"min x.(DH(S2)-DH(S1)).x={worst:.2e} max={strict:.2e}"


def _macro_zero_load():
    from .macrosolver import BoundaryConditions, MacroProblem, SolverSettings, two_scale_solve
    ctx = slit_context()
    bc = BoundaryConditions(fixed=(("left", 0, 0.0), ("bottom", 1, 0.0)), tied=(("right", 0), ("top", 1)),
                            tractions=(("top", (0.0, 0.0)),))
    p = MacroProblem(generate_macro_mesh(2, 1), ctx, bc)
    worst = 0.0
    for method in ("ml", "mc-uzawa", "mc-newton"):
        res = two_scale_solve(p, SolverSettings(method=method))
        worst = max(worst, float(np.abs(res.state.u0).max()), float(np.abs(res.state.stresses()).max()))
    return worst == 0.0, f"max |u|,|sigma|={worst:.2e}"


def uniaxial_problem(ctx=None, shift=(0.0, 0.0)):
    from .macrosolver import BoundaryConditions, MacroProblem
    ctx = slit_context() if ctx is None else ctx
    bc = BoundaryConditions(fixed=(("left", 0, float(shift[0])), ("bottom", 1, float(shift[1]))),
                            tied=(("right", 0), ("top", 1)), tractions=(("top", (0.0, -0.1)),))
    return MacroProblem(generate_macro_mesh(2, 1), ctx, bc)


def _macro_translation():
    from .macrosolver import SolverSettings, two_scale_solve
    shift = np.array([0.013, -0.021])
    worst = 0.0
    for method in ("ml", "mc-newton"):
        a = two_scale_solve(uniaxial_problem(), SolverSettings(method=method)).state
        b = two_scale_solve(uniaxial_problem(shift=shift), SolverSettings(method=method)).state
        du = b.u0.reshape(-1, 2) - a.u0.reshape(-1, 2) - shift
        worst = max(worst, float(np.abs(du).max()), float(np.abs(b.stresses() - a.stresses()).max()))
    return worst <= 1e-12, f"max deviation={worst:.2e}"


def _macro_agreement():
    from .macrosolver import SolverSettings, two_scale_solve
    runs = {m: two_scale_solve(uniaxial_problem(), SolverSettings(method=m)) for m in ("ml", "mc-uzawa", "mc-newton")}
    ref = runs["ml"].state.u0
    diff = max(float(np.abs(r.state.u0 - ref).max()) for r in runs.values())
    lam_ok = all(np.all(r.state.lambda_macro >= 0.0) for r in runs.values())
    return diff <= 1e-8 and lam_ok, f"max |u0 - u0_ml|={diff:.2e} multipliers nonnegative={lam_ok}"


SUITES = {
    "micro": [
        ("kkt-slit-eA", _kkt_property(slit_context, E_A)),
        ("kkt-ring-eA", _kkt_property(ring_context, E_A)),
        ("kkt-ring-eB", _kkt_property(ring_context, E_B)),
        ("dual-primal-oracle", _oracle_property),
        ("gap-annihilates-constants", _gap_constants),
        ("periodic-shift-identity", _shift_identity),
    ],
    "homog": [
        ("classical-homogenization-oracle", _homog_oracle),
        ("tangent-fd-slit", _tangent_fd(slit_context, E_A)),
        ("tangent-fd-ring", _tangent_fd(ring_context, E_B)),
        ("stiffening-monotone", _monotone),
    ],
    "macro": [
        ("zero-load-zero-solution", _macro_zero_load),
        ("translation-equivariance", _macro_translation),
        ("uniaxial-method-agreement", _macro_agreement),
    ],
}


def run_suites(names=("micro", "homog", "macro")) -> list[CheckResult]:
    out = []
    for suite in names:
        if suite not in SUITES:
            raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
        for name, fn in SUITES[suite]:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing property is a failing property
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            out.append(CheckResult(suite, name, bool(ok), detail, time.perf_counter() - t0))
    return out


def format_table(results) -> str:
    width = max((len(r.name) for r in results), default=4)
    lines = [f"{'suite':<6} {'property':<{width}} result  detail"]
    for r in results:
        lines.append(f"{r.suite:<6} {r.name:<{width}} {'PASS' if r.passed else 'FAIL'}    {r.detail}")
    return "\n".join(lines)


def inject_fault(name: str | None) -> None:
    """Enable a named deliberate fault (``h-sign``) or clear all faults (``None``)."""
    microsolver._FAULTS.clear()
    if name:
        if name not in ("h-sign",):
            raise ValueError(f"unknown fault {name!r}")
        microsolver._FAULTS.add(name)
        for fn in (slit_context, ring_context, coarse_slit_context):
            fn.cache_clear()
