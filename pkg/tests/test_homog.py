import numpy as np
import pytest

from microcontact.checks import E_A, E_B, classical_homogenization
from microcontact.fem import voigt_to_tensor
from microcontact.homog import (constrained_solve, contact_sensitivity, effective_stress_tangent_check,
                                entry_compliance, homogenized_tangent, independent_rows, open_tangent,
                                solve_correctors, stationary_tangent, tangent_for)
from microcontact.microsolver import ContactError, new_micro_state, solve_local_contact, unit_mode


def _all(ctx):
    return np.arange(ctx.n_records)


def _quad(DH, X):
    return np.einsum("ij,jk,ik->i", X, DH, X)


class TestCorrectors:
    def test_empty_set_is_classical(self, slit_ctx, D):
        ref = classical_homogenization(slit_ctx.mesh, D)
        assert np.abs(open_tangent(slit_ctx).DH - ref).max() <= 1e-10 * np.abs(ref).max()

    def test_closed_slit_jump_vanishes(self, slit_ctx):
        W, _ = solve_correctors(slit_ctx, _all(slit_ctx))
        for k in range(3):
            total = slit_ctx.modes[k] + slit_ctx.dofs.expand(W[k])
            assert np.abs(slit_ctx.gap.jump(total)).max() <= 1e-10

    def test_deflation_count(self, slit_ctx):
        active = _all(slit_ctx)
        rank = np.linalg.matrix_rank(slit_ctx.gap.G[active].toarray(), tol=1e-10)
        t = tangent_for(slit_ctx, active)
        assert t.n_deflated == active.size - rank
        assert independent_rows(slit_ctx, active).size == rank
        assert t.n_deflated > 0          # plus and minus families duplicate on the flat slit

    def test_unknown_record_rejected(self, slit_ctx):
        with pytest.raises(ContactError):
            solve_correctors(slit_ctx, [slit_ctx.n_records])

    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_orthogonal_to_constrained_space(self, which, slit_ctx, ring_ctx, rng):
        ctx = slit_ctx if which == "slit" else ring_ctx
        active = rng.choice(ctx.n_records, size=ctx.n_records // 2, replace=False)
        W, _ = solve_correctors(ctx, active)
        n = ctx.dofs.n_red
        GS = ctx.gap.G[active].toarray()[:, :n]
        basis = np.linalg.svd(GS)[2][np.linalg.matrix_rank(GS, tol=1e-10):].T   # null space of G_S
        K = ctx.stiffness.K_full
        for _ in range(20):
            q = np.zeros(ctx.dofs.n)
            q[:n] = basis @ rng.standard_normal(basis.shape[1])
            v = ctx.dofs.expand(q).ravel()
            for k in range(3):
                f = (ctx.modes[k] + ctx.dofs.expand(W[k])).ravel()
                assert abs(f @ (K @ v)) <= 1e-10 * max(1.0, np.linalg.norm(v))


class TestTangent:
    def test_pore_free_equals_material(self, full_ctx, D):
        assert np.abs(open_tangent(full_ctx).DH - D.voigt).max() <= 1e-10

    def test_open_slit_softer_across(self, slit_ctx, D):
        assert open_tangent(slit_ctx).DH[1, 1] < D.voigt[1, 1]

    def test_closed_slit_stiffer(self, slit_ctx):
        assert tangent_for(slit_ctx, _all(slit_ctx)).DH[1, 1] > open_tangent(slit_ctx).DH[1, 1]

    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_symmetric_psd(self, which, slit_ctx, ring_ctx, rng):
        ctx = slit_ctx if which == "slit" else ring_ctx
        DH = tangent_for(ctx, rng.choice(ctx.n_records, size=ctx.n_records // 3, replace=False)).DH
        assert np.array_equal(DH, DH.T)
        assert np.linalg.eigvalsh(DH).min() >= -1e-10

    def test_constraints_stiffen(self, ring_ctx, rng):
        perm = rng.permutation(ring_ctx.n_records)
        X = rng.standard_normal((100, 3))
        prev = _quad(open_tangent(ring_ctx).DH, X)
        for k in (5, 20, 50, ring_ctx.n_records):
            cur = _quad(tangent_for(ring_ctx, perm[:k]).DH, X)
            assert (cur >= prev - 1e-10).all()
            prev = cur

    def test_asymmetric_correctors_rejected(self, slit_ctx, rng):
        W = rng.standard_normal((3, slit_ctx.dofs.n))
        W[:, slit_ctx.dofs.n_red:] = 0.0
        with pytest.raises(ContactError):
            homogenized_tangent(W, slit_ctx)

    def test_stress_form_matches_energy_form(self, ring_ctx, rng):
        active = rng.choice(ring_ctx.n_records, size=30, replace=False)
        W, n_defl, mu = solve_correctors(ring_ctx, active, return_multipliers=True)
        t = homogenized_tangent(W, ring_ctx, active, n_defl, mu)
        assert np.array_equal(t.DH, tangent_for(ring_ctx, active).DH)
        with pytest.raises(ContactError):
            homogenized_tangent(W, ring_ctx, active, n_defl, np.zeros_like(mu))

    def test_stationary_tangent_cached(self, ring_ctx):
        st = new_micro_state(ring_ctx)
        solve_local_contact(st, voigt_to_tensor(E_A), ring_ctx)
        t1 = stationary_tangent(ring_ctx, st)
        assert stationary_tangent(ring_ctx, st) is t1
        assert np.array_equal(t1.active_used, st.active)


class TestSensitivity:
    def test_undeformed_offset(self, ring_ctx):
        W, _ = solve_correctors(ring_ctx, [])
        sens = contact_sensitivity(W, ring_ctx, _all(ring_ctx))
        assert np.allclose(sens.s, -ring_ctx.gap.ref_offset, atol=1e-15)

    def test_zero_correctors_give_delta_tensor(self, slit_ctx):
        # slit cell: no rigid inclusion, so the unit modes are plain affine fields
        sens = contact_sensitivity(np.zeros((3, slit_ctx.dofs.n)), slit_ctx, _all(slit_ctx))
        ref = np.array([r.delta_tensor for r in slit_ctx.pairing.records])
        assert np.allclose(sens.tensors(), -ref, atol=1e-14)

    @pytest.mark.parametrize("which,E", [("slit", E_A), ("ring", E_A), ("ring", E_B)])
    def test_linearisation_matches_resolve(self, which, E, slit_ctx, ring_ctx):
        ctx = slit_ctx if which == "slit" else ring_ctx
        st = new_micro_state(ctx)
        solve_local_contact(st, voigt_to_tensor(E), ctx)
        active = st.active
        W, _ = solve_correctors(ctx, active)
        sens = contact_sensitivity(W, ctx, _all(ctx), st.u_mic)
        # converged strain: active records sit on their linearised constraint
        assert (sens.s[active] <= 1e-8).all() and np.abs(sens.P[active]).max() <= 1e-8
        dE = 1e-6 * np.asarray(E)
        new = new_micro_state(ctx)
        solve_local_contact(new, voigt_to_tensor(np.asarray(E) + dE), ctx)
        assert np.array_equal(new.active, active)
        assert np.abs(new.gap - (sens.s + sens.P @ dE)).max() <= 1e-10


class TestCompliance:
    def test_without_held_records_is_schur(self, ring_ctx):
        e = np.arange(0, ring_ctx.n_records, 3)
        assert np.array_equal(entry_compliance(ring_ctx, e, []), ring_ctx.C[np.ix_(e, e)])

    def test_psd_and_softer_than_free(self, ring_ctx, rng):
        perm = rng.permutation(ring_ctx.n_records)
        e, h = perm[:10], perm[10:40]
        Ce = entry_compliance(ring_ctx, e, h)
        assert np.linalg.eigvalsh(Ce).min() >= -1e-12 * np.abs(Ce).max()
        free = ring_ctx.C[np.ix_(e, e)]
        assert np.linalg.eigvalsh(free - Ce).min() >= -1e-12 * np.abs(free).max()

    def test_matches_constrained_response(self, ring_ctx, rng):
        perm = rng.permutation(ring_ctx.n_records)
        e, h = perm[:4], perm[4:20]
        f = rng.random(e.size)
        lam = np.zeros(ring_ctx.n_records)
        lam[e] = f
        rhs = ring_ctx.gap.G.T @ lam
        x, _, _ = constrained_solve(ring_ctx, rhs, h, np.zeros(h.size))
        assert np.allclose(ring_ctx.gap.G[e] @ x, entry_compliance(ring_ctx, e, h) @ f, atol=1e-12)


class TestTangentCheck:
    def test_pore_free_exact(self, full_ctx):
        chk = effective_stress_tangent_check(full_ctx, voigt_to_tensor(E_A), delta=1e-6)
        assert chk.max_rel_error < 1e-10 and chk.conclusive

    def test_slit_compressed(self, slit_ctx):
        chk = effective_stress_tangent_check(slit_ctx, voigt_to_tensor(E_A), delta=1e-7)
        assert chk.conclusive and chk.active.size > 0
        assert chk.max_rel_error < 1e-5

    def test_flipping_record_is_inconclusive(self, slit_ctx):
        chk = effective_stress_tangent_check(slit_ctx, np.zeros((2, 2)), delta=2.0)
        assert not chk.conclusive

    def test_unit_mode_shear_is_engineering(self):
        assert unit_mode(2)[0, 1] == 0.5 and unit_mode(0)[0, 0] == 1.0
