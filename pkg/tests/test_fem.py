import time

import numpy as np
import pytest
import scipy.sparse as sp

from microcontact.checks import E_A, E_B, classical_homogenization
from microcontact.fem import (FactorizationError, MaterialError, affine_field, assemble_cell_stiffness,
                              average_stress, element_strains, factorize, plane_strain_tensor, solve,
                              stress_load, tensor_to_voigt, triangle_B, voigt_to_tensor)
from microcontact.homog import open_tangent
from microcontact.mesh import generate_cell_slit, generate_full_cell
from microcontact.microsolver import new_micro_state, solve_local_contact


class TestMaterial:
    def test_reference_values(self):
        D = plane_strain_tensor(2.3, 0.3).voigt
        assert D[0, 0] == pytest.approx(3.09615, abs=1e-5)
        assert D[2, 2] == pytest.approx(0.88462, abs=1e-5)
        assert np.array_equal(D, D.T)

    def test_zero_poisson_decouples(self):
        D = plane_strain_tensor(2.3, 0.0).voigt
        assert D[0, 0] == pytest.approx(2.3, abs=1e-15)
        assert D[0, 1] == 0.0

    @pytest.mark.parametrize("nu", [0.5, 0.7])
    def test_incompressible_rejected(self, nu):
        with pytest.raises(MaterialError):
            plane_strain_tensor(2.3, nu)

    def test_nonpositive_modulus_rejected(self):
        with pytest.raises(MaterialError):
            plane_strain_tensor(0.0, 0.3)

    def test_voigt_round_trip(self, rng):
        v = rng.standard_normal((5, 3))
        assert np.allclose(tensor_to_voigt(voigt_to_tensor(v)), v, atol=1e-15)
        assert voigt_to_tensor([0.0, 0.0, 0.05])[0, 1] == pytest.approx(0.025)
        assert voigt_to_tensor([0.0, 0.0, 0.05], shear="stress")[0, 1] == pytest.approx(0.05)


class TestCellOperator:
    def test_symmetric(self, slit_ctx):
        A = slit_ctx.stiffness.A
        assert abs(A - A.T).max() < 1e-12 * abs(A).max()

    def test_displacement_block_psd(self, slit_ctx, rng):
        n = slit_ctx.dofs.n_red
        Kr = slit_ctx.stiffness.A[:n, :n]
        X = rng.standard_normal((100, n))
        q = np.einsum("ij,ij->i", X, (Kr @ X.T).T)
        assert q.min() >= -1e-12 * abs(Kr).max() * n

    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_translation_in_nullspace(self, which, slit_ctx, ring_ctx):
        ctx = slit_ctx if which == "slit" else ring_ctx
        n = ctx.dofs.n_red
        target = np.tile([0.3, -0.2], ctx.mesh.n_nodes)
        q = sp.linalg.lsqr(ctx.dofs.T, target, atol=1e-15, btol=1e-15)[0]
        assert np.abs(ctx.dofs.T @ q - target).max() < 1e-12
        Kr = ctx.stiffness.A[:n, :n]
        assert np.abs(Kr @ q).max() < 1e-12

    def test_triangle_B_reproduces_affine_strain(self, slit_mesh, rng):
        e = rng.standard_normal(3)
        u = affine_field(voigt_to_tensor(e), slit_mesh)
        assert np.allclose(element_strains(slit_mesh, u), e, atol=1e-12)
        _, area = triangle_B(slit_mesh.nodes, slit_mesh.elements)
        assert area.min() > 0


class TestAffineField:
    def test_identity_strain(self, slit_mesh):
        u = affine_field(np.eye(2), slit_mesh)
        assert np.allclose(element_strains(slit_mesh, u), [1.0, 1.0, 0.0], atol=1e-13)

    def test_zero(self, slit_mesh):
        assert not np.any(affine_field(np.zeros((2, 2)), slit_mesh))

    def test_vertical_contraction_across_slit(self, slit_mesh):
        u = affine_field(voigt_to_tensor(E_A), slit_mesh)
        top = np.abs(slit_mesh.nodes[:, 1] - 1.0) < 1e-12
        bottom = np.abs(slit_mesh.nodes[:, 1]) < 1e-12
        assert u[top, 1].mean() - u[bottom, 1].mean() == pytest.approx(-0.04, abs=1e-14)


class TestStressLoad:
    def test_translation_gives_zero(self, slit_ctx):
        u = np.tile([1.0, -2.0], (slit_ctx.mesh.n_nodes, 1))
        assert np.abs(stress_load(slit_ctx.stiffness, u)).max() < 1e-12

    def test_linear(self, slit_ctx, rng):
        u, v = rng.standard_normal((2, slit_ctx.mesh.n_nodes, 2))
        cell = slit_ctx.stiffness
        assert np.allclose(stress_load(cell, u + v), stress_load(cell, u) + stress_load(cell, v), atol=1e-12)

    def test_matches_direct_quadrature(self, slit_ctx):
        mesh, D = slit_ctx.mesh, slit_ctx.D
        u = affine_field(voigt_to_tensor(E_A), mesh)
        B, area = triangle_B(mesh.nodes, mesh.elements)
        f = np.zeros(2 * mesh.n_nodes)
        sig = D.stress(element_strains(mesh, u))
        for e, tri in enumerate(mesh.elements):
            dofs = np.ravel([[2 * a, 2 * a + 1] for a in tri])
            f[dofs] += area[e] * B[e].T @ sig[e]
        ref = -(slit_ctx.dofs.T.T @ f) / mesh.cell_area
        got = stress_load(slit_ctx.stiffness, u)
        assert np.allclose(got[: slit_ctx.dofs.n_red], ref, atol=1e-13)
        assert np.all(got[slit_ctx.dofs.n_red:] == 0.0)


class TestAverageStress:
    def test_zero(self, slit_ctx):
        s = average_stress(slit_ctx.mesh, slit_ctx.D, np.zeros((slit_ctx.mesh.n_nodes, 2)))
        assert not np.any(s)

    def test_patch_test_full_cell(self, full_ctx, rng):
        e = rng.standard_normal(3)
        u = affine_field(voigt_to_tensor(e), full_ctx.mesh)
        corr = full_ctx.F.solve(stress_load(full_ctx.stiffness, u))
        assert np.abs(corr).max() < 1e-10
        s = average_stress(full_ctx.mesh, full_ctx.D, u)
        assert np.allclose(tensor_to_voigt(s, shear="stress"), full_ctx.D.stress(e), atol=1e-10)

    def test_open_slit_equals_classical(self, slit_ctx, D):
        ref = classical_homogenization(slit_ctx.mesh, D)
        st = new_micro_state(slit_ctx)
        e = np.array([0.001, 0.002, -0.0005])   # tension: the slit stays open
        sol = solve_local_contact(st, voigt_to_tensor(e), slit_ctx)
        assert sol.active.size == 0
        s = tensor_to_voigt(sol.sigma, shear="stress")
        assert np.allclose(s, ref @ e, atol=1e-10 * np.abs(ref).max())
        assert np.allclose(open_tangent(slit_ctx).DH, ref, atol=1e-10 * np.abs(ref).max())


class TestGapShiftIdentity:
    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_affine_jump_is_delta_tensor(self, which, slit_ctx, ring_ctx, rng):
        ctx = slit_ctx if which == "slit" else ring_ctx
        v = rng.standard_normal((ctx.mesh.n_nodes, 2))
        E = voigt_to_tensor(rng.standard_normal(3))
        lhs = ctx.gap.jump(v + affine_field(E, ctx.mesh)) - ctx.gap.jump(v)
        rhs = np.array([np.sum(r.delta_tensor * E) for r in ctx.pairing.records])
        assert np.abs(lhs - rhs).max() < 1e-12


class TestRigidInclusion:
    @pytest.mark.parametrize("E", [E_A, E_B])
    def test_inclusion_moves_rigidly(self, ring_ctx, E):
        st = new_micro_state(ring_ctx)
        sol = solve_local_contact(st, voigt_to_tensor(E), ring_ctx)
        idx = ring_ctx.mesh.rigid_nodes
        x = ring_ctx.mesh.nodes[idx]
        u = sol.u_mic[idx]
        # u = a + w * (-y, x): three unknowns
        M = np.zeros((2 * idx.size, 3))
        M[0::2, 0] = 1.0
        M[1::2, 1] = 1.0
        M[0::2, 2] = -x[:, 1]
        M[1::2, 2] = x[:, 0]
        coef = np.linalg.lstsq(M, u.ravel(), rcond=None)[0]
        assert np.abs(M @ coef - u.ravel()).max() < 1e-12


class TestFactorization:
    def test_round_trip(self, slit_ctx, rng):
        A = slit_ctx.stiffness.A
        F = factorize(A)
        x0 = rng.standard_normal(A.shape[0])
        assert np.allclose(solve(F, A @ x0), x0, atol=1e-10)

    def test_sequential_solves_independent(self, slit_ctx, rng):
        A = slit_ctx.stiffness.A
        F = slit_ctx.F
        x1, x2 = rng.standard_normal((2, A.shape[0]))
        y1 = F.solve(A @ x1)
        y2 = F.solve(A @ x2)
        assert np.allclose(y1, x1, atol=1e-10) and np.allclose(y2, x2, atol=1e-10)

    def test_singular_operator_rejected(self, slit_ctx):
        n = slit_ctx.dofs.n_red
        with pytest.raises(FactorizationError):
            factorize(slit_ctx.stiffness.A[:n, :n])

    def test_wrong_rhs_length(self, slit_ctx):
        with pytest.raises(ValueError):
            slit_ctx.F.solve(np.zeros(3))

    def test_solve_much_cheaper_than_factorization(self, D, rng):
        cell = assemble_cell_stiffness(generate_cell_slit(0.6, 0.02, 0.02), D)
        assert cell.dofs.n >= 2000
        t0 = time.perf_counter()
        F = factorize(cell.A)
        t_factor = time.perf_counter() - t0
        rhs = rng.standard_normal(cell.dofs.n)
        t_solve = min(_timed(F.solve, rhs) for _ in range(5))
        assert t_factor / t_solve > 5.0


def _timed(fn, *args):
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0


def test_full_cell_has_no_pores():
    mesh = generate_full_cell(0.25)
    assert mesh.element_areas().sum() == pytest.approx(1.0, abs=1e-14)
    assert mesh.boundary_edges["plus"].size == 0
