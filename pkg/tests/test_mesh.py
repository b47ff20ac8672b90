import numpy as np
import pytest

from microcontact.mesh import (GAUSS_2x2, GeometryError, MeshError, PeriodicCellMesh, build_contact_pairing,
                               generate_cell_ring, generate_cell_slit, generate_full_cell, generate_macro_mesh,
                               match_periodic_pairs, polyline_chains)


def _mirror(mesh: PeriodicCellMesh) -> PeriodicCellMesh:
    nodes = mesh.nodes.copy()
    nodes[:, 0] = mesh.cell_size[0] - nodes[:, 0]
    pairs = match_periodic_pairs(nodes, mesh.cell_size)
    return PeriodicCellMesh(nodes, mesh.elements[:, ::-1], dict(mesh.boundary_edges), pairs,
                            mesh.rigid_nodes, mesh.cell_size)


class TestCellInvariants:
    @pytest.mark.parametrize("make", [lambda: generate_cell_slit(0.6, 0.02, 0.05),
                                      lambda: generate_cell_ring(0.35, 0.30, 0.05),
                                      lambda: generate_cell_ring(0.35, 0.335, 0.05),
                                      lambda: generate_full_cell(0.1)])
    def test_structural_invariants(self, make):
        mesh = make()
        mesh.validate()
        assert mesh.element_areas().min() > 0.0
        pp = mesh.periodic_pairs
        mis = mesh.nodes[pp.slave] - mesh.nodes[pp.master] - pp.shift
        assert np.abs(mis).max() <= 1e-12
        lattice = {(a, b) for a in (-1.0, 0.0, 1.0) for b in (-1.0, 0.0, 1.0)} - {(0.0, 0.0)}
        assert all(tuple(np.round(s, 12)) in lattice for s in pp.shift)
        plus = {tuple(sorted(e)) for e in mesh.boundary_edges["plus"].tolist()}
        minus = {tuple(sorted(e)) for e in mesh.boundary_edges["minus"].tolist()}
        assert not plus & minus

    def test_arrays_are_read_only(self, slit_mesh):
        with pytest.raises(ValueError):
            slit_mesh.nodes[0, 0] = 1.0

    def test_area_sums_to_solid_fraction(self, slit_mesh, ring_mesh):
        assert slit_mesh.element_areas().sum() == pytest.approx(1.0 - 0.6 * 0.02, abs=1e-12)
        polygon = ring_mesh.element_areas().sum()
        assert 1.0 - np.pi * 0.35 ** 2 < polygon < 1.0 - 0.35 ** 2 * 3.0


class TestSlit:
    def test_tags_and_reference_gap(self, slit_mesh):
        assert slit_mesh.plus_nodes().size > 0 and slit_mesh.minus_nodes().size > 0
        pairing = build_contact_pairing(slit_mesh)
        assert np.allclose(pairing.ref_gaps, 0.02, atol=1e-12)
        assert np.allclose(pairing.normals, [0.0, 1.0], atol=1e-12)

    def test_pair_count(self, slit_mesh):
        x = slit_mesh.nodes
        tol = 1e-9
        left = np.abs(x[:, 0]) <= tol
        bottom = np.abs(x[:, 1]) <= tol
        corners = left & bottom | left & (np.abs(x[:, 1] - 1) <= tol) \
            | bottom & (np.abs(x[:, 0] - 1) <= tol) | (np.abs(x[:, 0] - 1) <= tol) & (np.abs(x[:, 1] - 1) <= tol)
        n_left = int(np.sum(left & ~corners))
        n_bottom = int(np.sum(bottom & ~corners))
        assert len(slit_mesh.periodic_pairs) == n_left + n_bottom + 3

    def test_slit_reaching_boundary_rejected(self):
        with pytest.raises(GeometryError, match="slit_width"):
            generate_cell_slit(0.99999, 0.02, 0.5)

    @pytest.mark.parametrize("kwargs", [dict(slit_gap=0.0), dict(slit_gap=1.2), dict(target_edge_length=0.0)])
    def test_bad_parameters_rejected(self, kwargs):
        with pytest.raises(GeometryError):
            generate_cell_slit(**kwargs)

    def test_mirror_symmetric(self, slit_mesh):
        x = np.round(slit_mesh.nodes, 12)
        mirrored = np.round(np.column_stack([1.0 - x[:, 0], x[:, 1]]), 12)
        assert {tuple(p) for p in x} == {tuple(p) for p in mirrored}


class TestRing:
    def test_reference_gap_and_normals(self, ring_mesh):
        pairing = build_contact_pairing(ring_mesh)
        assert np.allclose(pairing.ref_gaps, 0.05, atol=2e-3)
        c = ring_mesh.center
        for rec in pairing.records:
            node = rec.plus_node if rec.family == "plus" else rec.minus_node
            radial = ring_mesh.nodes[node] - c
            radial /= np.linalg.norm(radial)
            assert abs(abs(radial @ rec.normal) - 1.0) <= 1e-8

    def test_rigid_nodes(self, ring_mesh):
        rigid = ring_mesh.rigid_nodes
        pp = ring_mesh.periodic_pairs
        assert rigid.size > 0
        assert np.intersect1d(rigid, np.concatenate([pp.master, pp.slave])).size == 0

    def test_radius_ordering(self):
        with pytest.raises(GeometryError):
            generate_cell_ring(0.30, 0.35, 0.05)

    def test_hole_must_fit(self):
        with pytest.raises(GeometryError):
            generate_cell_ring(0.5, 0.3, 0.05)


class TestPeriodicMatching:
    def test_unit_square_corners(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        pp = match_periodic_pairs(nodes)
        assert len(pp) == 3
        assert set(pp.master.tolist()) == {0}
        assert sorted(pp.slave.tolist()) == [1, 2, 3]

    def test_unmatched_node_lists_coordinates(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.5], [1.0, 0.501]])
        with pytest.raises(MeshError, match="0.5"):
            match_periodic_pairs(nodes, tol=1e-9)

    def test_perturbed_corner(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        nodes[2] += 1e-3
        with pytest.raises(MeshError):
            match_periodic_pairs(nodes, tol=1e-9)


class TestPairing:
    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_record_invariants(self, which, slit_mesh, ring_mesh):
        mesh = slit_mesh if which == "slit" else ring_mesh
        pairing = build_contact_pairing(mesh)
        pairing.validate()
        assert len(pairing.records) == mesh.plus_nodes().size + mesh.minus_nodes().size
        assert np.allclose(np.linalg.norm(pairing.normals, axis=1), 1.0, atol=1e-12)
        assert pairing.ref_gaps.min() >= 0.0
        for chain in pairing.chains:
            assert np.all(np.diff(pairing.t[chain]) > 0.0)

    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_mirror_symmetry(self, which, slit_mesh, ring_mesh):
        mesh = slit_mesh if which == "slit" else ring_mesh
        a = build_contact_pairing(mesh)
        b = build_contact_pairing(_mirror(mesh))

        def key(r):
            return (r.family, r.plus_node if r.family == "plus" else r.minus_node)

        rb = {key(r): r for r in b.records}
        assert len(rb) == len(a.records)
        for r in a.records:
            s = rb[key(r)]
            assert s.normal == pytest.approx(r.normal * np.array([-1.0, 1.0]), abs=1e-12)
            assert s.ref_gap == pytest.approx(r.ref_gap, abs=1e-12)


class TestMacroMesh:
    def test_structured_mesh(self):
        m = generate_macro_mesh(4, 4)
        assert m.nodes.shape == (25, 2) and m.quads.shape == (16, 4)
        assert m.qp_weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert set(m.boundary) == {"bottom", "right", "top", "left"}
        assert len(m.boundary["bottom"]) == 4

    def test_gauss_points_inside_elements(self):
        m = generate_macro_mesh(2, 1)
        assert m.qp_coords.shape == (8, 2)
        assert np.all((m.qp_coords > 0) & (m.qp_coords < [1.0, 1.0]))
        assert len(GAUSS_2x2) == 4

    def test_rejects_empty(self):
        with pytest.raises(MeshError):
            generate_macro_mesh(0, 1)


def test_polyline_chains_orders_edges():
    edges = np.array([[2, 3], [0, 1], [1, 2]])
    chains = polyline_chains(edges)
    assert len(chains) == 1
    assert list(chains[0]) in ([0, 1, 2, 3], [3, 2, 1, 0])
