"""Correctors, homogenized tangent and contact sensitivities.

Correctors ``w^k`` solve the cell problem for the unit Voigt mode ``k`` with the
records of a given set held in bilateral (sliding) contact: the jump of the total
field ``mode_k + T w^k`` vanishes on those records.  The tangent follows from the
energy form ``DH_kl = a(mode_k + w^k, mode_l + w^l)``.

For a record ``i`` the sensitivity row ``p_i`` is the derivative of its gap with
respect to the macro strain (Voigt, engineering shear), and ``s_i`` is its current
gap, so the linearised macro contact condition reads ``p_i . de + s_i <= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .fem import macro_field, stress_load, voigt_to_tensor
from .microsolver import (CellContext, ContactError, MicroState, effective_stress, new_micro_state,
                          solve_local_contact, unit_mode)

__all__ = [
    "HomogenizedTangent",
    "ContactSensitivity",
    "TangentCheck",
    "constrained_solve",
    "independent_rows",
    "tangent_for",
    "stationary_tangent",
    "solve_correctors",
    "homogenized_tangent",
    "contact_sensitivity",
    "entry_compliance",
    "open_tangent",
    "frozen_solve",
    "effective_stress_tangent_check",
]

DEFLATION_TOL = 1e-10


@dataclass(frozen=True)
class HomogenizedTangent:
    """Homogenized tangent and the correctors it was built from.

    Attributes
    ----------
    DH : (3, 3) Voigt tangent, GPa.
    correctors : (3, n) reduced corrector vectors for modes 11, 22, 12.
    active_used : record indices held bilateral.
    n_deflated : constraint rows dropped as linearly dependent.
    """

    DH: np.ndarray
    correctors: np.ndarray
    active_used: np.ndarray
    n_deflated: int = 0


@dataclass(frozen=True)
class ContactSensitivity:
    """Gap sensitivities for a set of monitored records.

    Attributes
    ----------
    records : record indices.
    P : (k, 3) rows with ``dg_i = P[i] . de`` (engineering shear Voigt strain).
    s : (k,) current gaps.
    """

    records: np.ndarray
    P: np.ndarray
    s: np.ndarray

    def tensors(self) -> np.ndarray:
        """P rows as symmetric 2x2 tensors, ``P_i : E = P[i] . e``."""
        return voigt_to_tensor(self.P, shear="stress")


def constrained_solve(ctx: CellContext, rhs: np.ndarray, rows: np.ndarray, target: np.ndarray):
    """Solve ``A x = rhs + G_S' mu`` subject to ``G_S x = target``.

    Linearly dependent rows of ``G_S`` are removed by pivoted QR (relative pivot
    tolerance ``1e-10``); their multipliers are zero.  Returns ``(x, mu, n_deflated)``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    x0 = ctx.F.solve(rhs)
    mu = np.zeros(rows.size)
    if rows.size == 0:
        return x0, mu, 0
    keep = independent_rows(ctx, rows)
    GS = ctx.gap.G[rows[keep]]
    Css = ctx.C[np.ix_(rows[keep], rows[keep])]
    resid = np.asarray(target)[keep] - GS @ x0
    mk = np.linalg.solve(Css, resid)
    mu[keep] = mk
    x = x0 + ctx.AinvGt[:, rows[keep]] @ mk
    return x, mu, int(rows.size - keep.size)


def independent_rows(ctx: CellContext, rows: np.ndarray) -> np.ndarray:
    """Positions (into ``rows``) of a maximal independent subset of gap rows."""
    Gt = ctx.gap.G[rows].toarray().T
    _, R, piv = sla.qr(Gt, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return np.zeros(0, dtype=np.int64)
    rank = int(np.count_nonzero(d > DEFLATION_TOL * d[0]))
    return np.sort(piv[:rank])


def solve_correctors(ctx: CellContext, active, return_multipliers: bool = False):
    """Correctors of the three unit modes with ``active`` records bilateral.

    Returns ``(W, n_deflated)`` or, with ``return_multipliers``, ``(W, n_deflated, mu)``
    where ``mu`` (3 x |active|) are the constraint forces.
    """
    active = np.asarray(active, dtype=np.int64)
    if active.size and (active.min() < 0 or active.max() >= ctx.n_records):
        raise ContactError("active set references unknown records")
    W = np.zeros((3, ctx.dofs.n))
    mu = np.zeros((3, active.size))
    n_defl = 0
    for k in range(3):
        target = -ctx.mode_jumps[active, k]
        W[k], mu[k], n_defl = constrained_solve(ctx, ctx.mode_loads[k], active, target)
    return (W, n_defl, mu) if return_multipliers else (W, n_defl)


def homogenized_tangent(correctors: np.ndarray, ctx: CellContext, active=None,
                        n_deflated: int = 0, multipliers: np.ndarray | None = None) -> HomogenizedTangent:
    """Energy-form tangent from correctors.

    The energy form is symmetric by construction.  The stress form
    ``a(mode_k + w^k, mode_l) - mu_k . J(mode_l)`` is not, and agrees with it only
    for correct corrector solves; it is checked against the energy form.
    """
    act = np.zeros(0, dtype=np.int64) if active is None else np.asarray(active, dtype=np.int64)
    fields = np.array([(ctx.modes[k] + ctx.dofs.expand(correctors[k])).ravel() for k in range(3)])
    K = ctx.stiffness.K_full
    DH = fields @ (K @ fields.T)
    scale = max(np.abs(DH).max(), 1e-300)
    mu = np.zeros((3, act.size)) if multipliers is None else np.asarray(multipliers, dtype=float)
    mixed = fields @ ctx.mode_forces.T - mu @ ctx.mode_jumps[act]
    asym = max(np.abs(mixed - mixed.T).max(), np.abs(mixed - DH).max())
    if asym > 1e-9 * scale:
        raise ContactError(f"tangent asymmetric ({asym / scale:.2e} relative): corrector solve failed")
    DH = 0.5 * (DH + DH.T)
    return HomogenizedTangent(DH, correctors, act, n_deflated)


def tangent_for(ctx: CellContext, active) -> HomogenizedTangent:
    W, n_defl, mu = solve_correctors(ctx, active, return_multipliers=True)
    return homogenized_tangent(W, ctx, active, n_defl, mu)


def open_tangent(ctx: CellContext) -> HomogenizedTangent:
    """Tangent without contact constraints."""
    return tangent_for(ctx, np.zeros(0, dtype=np.int64))


def contact_sensitivity(correctors: np.ndarray, ctx: CellContext, monitored,
                        u_mic: np.ndarray | None = None) -> ContactSensitivity:
    """Gap sensitivities ``p_i`` and current gaps ``s_i`` of the monitored records."""
    idx = np.asarray(monitored, dtype=np.int64)
    G = ctx.gap.G[idx]
    P = -(ctx.mode_jumps[idx] + (G @ correctors.T))
    P = np.asarray(P).reshape(idx.size, 3)
    if u_mic is None:
        s = -ctx.gap.ref_offset[idx]
    else:
        s = ctx.gap.gap(u_mic)[idx]
    return ContactSensitivity(idx, P, s)


def entry_compliance(ctx: CellContext, entries, held) -> np.ndarray:
    """Gap response of ``entries`` to their own contact forces with ``held`` bilateral.

    Returns the Schur complement ``C_ee - C_eh C_hh^-1 C_he`` (symmetric positive
    semidefinite): a force ``f`` on the entries changes their gaps by ``-C f``.
    """
    e = np.asarray(entries, dtype=np.int64)
    h = np.asarray(held, dtype=np.int64)
    Cee = ctx.C[np.ix_(e, e)]
    if h.size:
        h = h[independent_rows(ctx, h)]
    if h.size and e.size:
        Ceh = ctx.C[np.ix_(e, h)]
        Cee = Cee - Ceh @ np.linalg.solve(ctx.C[np.ix_(h, h)], Ceh.T)
    return 0.5 * (Cee + Cee.T)


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

def frozen_solve(ctx: CellContext, E_macro, active) -> np.ndarray:
    """Cell solve with ``active`` records held closed (gap = 0), others ignored.

    Returns the energy-consistent stress (Voigt).
    """
    E = np.asarray(E_macro, dtype=float)
    aff = macro_field(E, ctx.mesh)
    active = np.asarray(active, dtype=np.int64)
    target = -ctx.gap.jump(aff)[active] - ctx.gap.ref_offset[active]
    x, mu, _ = constrained_solve(ctx, stress_load(ctx.stiffness, aff), active, target)
    lam = np.zeros(ctx.n_records)
    lam[active] = mu
    return effective_stress(ctx, aff + ctx.dofs.expand(x), lam)


def _unilateral_active(ctx: CellContext, E, eps: float = 1e-10) -> np.ndarray:
    st = new_micro_state(ctx)
    return solve_local_contact(st, E, ctx, eps=eps).active


@dataclass(frozen=True)
class TangentCheck:
    """Outcome of a finite-difference tangent check."""

    max_rel_error: float
    conclusive: bool
    active: np.ndarray
    errors: np.ndarray


def effective_stress_tangent_check(ctx: CellContext, E_macro, delta: float = 1e-7,
                                   state: MicroState | None = None) -> TangentCheck:
    """Central differences of the frozen-active-set stress against ``DH`` columns.

    The result is flagged inconclusive when an unconstrained re-solve at
    ``E +- delta e_k`` changes the active set.
    """
    E = np.asarray(E_macro, dtype=float)
    if state is not None and state.E is not None and np.allclose(state.E, E):
        active = np.asarray(state.active, dtype=np.int64)
    else:
        active = _unilateral_active(ctx, E)
    DH = tangent_for(ctx, active).DH
    conclusive = True
    errs = np.zeros(3)
    for k in range(3):
        dE = delta * unit_mode(k)
        for sgn in (1.0, -1.0):
            if ctx.n_records and not np.array_equal(_unilateral_active(ctx, E + sgn * dE), active):
                conclusive = False
        fd = (frozen_solve(ctx, E + dE, active) - frozen_solve(ctx, E - dE, active)) / (2.0 * delta)
        ref = DH[:, k]
        errs[k] = np.linalg.norm(fd - ref) / np.linalg.norm(ref)
    return TangentCheck(float(errs.max()), conclusive, active, errs)


def stationary_tangent(ctx: CellContext, state: MicroState) -> HomogenizedTangent:
    """Tangent for the state's current active set (cached on the state)."""
    if state.tangent is None or not np.array_equal(state.tangent.active_used, state.active):
        state.tangent = tangent_for(ctx, state.active)
    return state.tangent

