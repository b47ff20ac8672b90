import json
import warnings

import numpy as np
import pytest

from microcontact import io
from microcontact.checks import uniaxial_problem
from microcontact.macrosolver import FULL, IterationRecord, MacroState, SolverSettings, two_scale_solve
from microcontact.mesh import MeshError, build_contact_pairing, generate_macro_mesh
from microcontact.microsolver import new_micro_state


class TestPresets:
    def test_uniaxial(self):
        cfg = io.preset("uniaxial")
        assert (cfg.material.E, cfg.material.nu) == (2.3, 0.3)
        assert cfg.macro.nx * cfg.macro.ny == 2
        assert cfg.macro.tractions == [["top", [0.0, -0.1]]]
        assert cfg.cell.kind == "slit"

    def test_bending(self):
        cfg = io.preset("bending")
        assert (cfg.macro.nx, cfg.macro.ny) == (4, 4)
        assert cfg.macro.tractions == [["top", [0.01, 0.0]]]
        assert {(e, c) for e, c, _ in cfg.macro.fixed} == {("bottom", 0), ("bottom", 1)}
        assert cfg.cell.kind == "ring"

    def test_unknown_preset(self):
        with pytest.raises(io.ConfigError, match="uniaxial"):
            io.preset("torsion")

    def test_load_config_accepts_preset_name(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert io.load_config("bending").name == "bending"


class TestConfigValidation:
    def _write(self, tmp_path, data):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(data) if not isinstance(data, str) else data)
        return p

    def test_incompressible_rejected(self, tmp_path):
        with pytest.raises(io.ConfigError, match="nu"):
            io.load_config(self._write(tmp_path, {"material": {"nu": 0.7}}))

    def test_parse_error_reports_position(self, tmp_path):
        p = self._write(tmp_path, '{\n  "material": {"E": 2.3,,}\n}')
        with pytest.raises(io.ConfigError, match=r"line 2, column \d+"):
            io.load_config(p)

    def test_unknown_key_warns(self, tmp_path):
        p = self._write(tmp_path, {"solver": {"method": "ml", "colour": "blue"}, "extra": 1})
        with pytest.warns(io.ConfigWarning) as rec:
            cfg = io.load_config(p)
        assert cfg.solver.method == "ml"
        assert len(rec) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(io.ConfigError):
            io.load_config(tmp_path / "nope.json")

    @pytest.mark.parametrize("section,key,value", [("solver", "method", "penalty"), ("solver", "gamma", -3),
                                                   ("solver", "gamma", "wide"), ("solver", "tol_outer", 0.0),
                                                   ("macro", "nx", 0), ("cell", "kind", "hexagon"),
                                                   ("material", "E", -1.0)])
    def test_invalid_values(self, tmp_path, section, key, value):
        with pytest.raises(io.ConfigError):
            io.load_config(self._write(tmp_path, {section: {key: value}}))

    def test_preset_override(self, tmp_path):
        p = self._write(tmp_path, {"preset": "uniaxial", "solver": {"method": "mc-uzawa"}})
        cfg = io.load_config(p)
        assert cfg.solver.method == "mc-uzawa" and cfg.macro.nx == 2

    def test_round_trip(self, tmp_path):
        cfg = io.preset("bending")
        cfg.solver.gamma = "full"
        p = tmp_path / "c.json"
        io.save_config(cfg, p)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            back = io.load_config(p)
        assert back == cfg
        assert io.solver_settings(back).gamma == FULL


class TestOutputDir:
    def test_precedence(self, monkeypatch, tmp_path):
        monkeypatch.delenv(io.ENV_OUT, raising=False)
        assert io.output_dir(None, None).name == "out"
        assert io.output_dir(None, "cfgdir").name == "cfgdir"
        monkeypatch.setenv(io.ENV_OUT, str(tmp_path / "env"))
        assert io.output_dir(None, "cfgdir") == tmp_path / "env"
        assert io.output_dir(tmp_path / "flag", "cfgdir") == tmp_path / "flag"


class TestMeshFiles:
    @pytest.mark.parametrize("which", ["slit", "ring"])
    def test_cell_round_trip(self, which, slit_mesh, ring_mesh, tmp_path):
        mesh = slit_mesh if which == "slit" else ring_mesh
        p = tmp_path / "cell.mesh"
        io.write_cell_mesh(mesh, p)
        back = io.read_cell_mesh(p)
        assert np.array_equal(back.nodes, mesh.nodes)
        assert np.array_equal(back.elements, mesh.elements)
        assert np.array_equal(back.rigid_nodes, mesh.rigid_nodes)
        for tag in ("plus", "minus"):
            assert np.array_equal(back.boundary_edges[tag], mesh.boundary_edges[tag])
        a, b = build_contact_pairing(mesh), build_contact_pairing(back)
        assert np.array_equal(a.ref_gaps, b.ref_gaps)

    def test_truncated_file_reports_line(self, slit_mesh, tmp_path):
        p = tmp_path / "cell.mesh"
        io.write_cell_mesh(slit_mesh, p)
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:10]) + "\n")
        with pytest.raises(MeshError, match="line"):
            io.read_cell_mesh(p)

    def test_bad_number_reports_line(self, slit_mesh, tmp_path):
        p = tmp_path / "cell.mesh"
        io.write_cell_mesh(slit_mesh, p)
        lines = p.read_text().splitlines()
        lines[4] = "0.1 abc"
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(MeshError, match="line 5"):
            io.read_cell_mesh(p)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "x.mesh"
        p.write_text("hello\n")
        with pytest.raises(MeshError):
            io.read_cell_mesh(p)

    def test_macro_round_trip(self, tmp_path):
        mesh = generate_macro_mesh(3, 2, size=(2.0, 1.0))
        p = tmp_path / "macro.mesh"
        io.write_macro_mesh(mesh, p)
        back = io.read_macro_mesh(p)
        assert np.array_equal(back.nodes, mesh.nodes) and np.array_equal(back.quads, mesh.quads)
        assert set(back.boundary) == set(mesh.boundary)


class TestVtk:
    def _zero_state(self, problem):
        ctx = problem.ctx
        return MacroState(np.zeros(problem.n_full), [new_micro_state(ctx) for _ in range(problem.mesh.n_qp)],
                          np.zeros(0))

    def test_zero_state_parses(self, slit_ctx, tmp_path):
        problem = uniaxial_problem(slit_ctx)
        paths = io.export_fields(self._zero_state(problem), problem, tmp_path)
        macro = io.read_legacy_vtk(paths[0])
        assert not np.any(macro["point_data"]["displacement"])
        assert macro["points"].shape == (problem.mesh.n_nodes, 3)
        assert len(macro["cells"]) == problem.mesh.quads.shape[0]
        assert (macro["cell_types"] == io.VTK_QUAD).all()
        micro = io.read_legacy_vtk(paths[2])
        assert not np.any(micro["point_data"]["displacement"])
        assert (micro["cell_types"] == io.VTK_TRIANGLE).all()
        assert np.array_equal(io.read_cell_mesh(paths[1]).nodes, slit_ctx.mesh.nodes)

    def test_contact_counts_exported(self, slit_ctx, tmp_path):
        problem = uniaxial_problem(slit_ctx)
        res = two_scale_solve(problem, SolverSettings(method="ml"))
        io.export_macro_vtk(res.state, problem, tmp_path / "m.vtk")
        text = (tmp_path / "m.vtk").read_text()
        assert "SCALARS n_contact int" in text
        data = io.read_legacy_vtk(tmp_path / "m.vtk")
        counts = data["cell_data"]["n_contact"]
        assert counts.sum() == res.state.n_contact.sum() > 0
        assert np.allclose(data["point_data"]["displacement"][:, :2], res.state.u0.reshape(-1, 2))

    def test_micro_fields(self, ring_ctx, tmp_path):
        from microcontact.fem import voigt_to_tensor
        from microcontact.microsolver import solve_local_contact
        st = new_micro_state(ring_ctx)
        solve_local_contact(st, voigt_to_tensor([0.0, 0.0, 0.05]), ring_ctx)
        io.export_micro_vtk(ring_ctx, st, tmp_path / "c.vtk", deform_scale=2.0)
        data = io.read_legacy_vtk(tmp_path / "c.vtk")
        assert np.allclose(data["points"][:, :2], ring_ctx.mesh.nodes + 2.0 * st.u_mic)
        assert data["point_data"]["lambda"].sum() == pytest.approx(st.lam.sum(), rel=1e-12)
        assert set(data["cell_data"]) == {"sigma_11", "sigma_22", "sigma_12"}

    def test_non_finite_refused(self, slit_ctx, tmp_path):
        problem = uniaxial_problem(slit_ctx)
        state = self._zero_state(problem)
        state.u0[3] = np.nan
        with pytest.raises(ValueError):
            io.export_macro_vtk(state, problem, tmp_path / "m.vtk")

    def test_record_table(self, slit_ctx, tmp_path):
        st = new_micro_state(slit_ctx)
        io.write_record_table(slit_ctx, st, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "record,t,family,lambda,gap,active"
        assert len(lines) == slit_ctx.n_records + 1


class TestConvergenceLog:
    def test_header_and_rows(self, tmp_path):
        p = tmp_path / "conv.csv"
        for k in range(10):
            io.append_convergence(p, IterationRecord(1, k + 1, "ml", 0.5 ** k, 1e-3 * k, 0.0, k))
        lines = p.read_text().splitlines()
        assert lines[0] == "step,outer_iter,method,norm_du,norm_r,norm_lambda,n_active_total"
        assert len(lines) == 11
        assert lines[2].split(",")[:3] == ["1", "2", "ml"]

    def test_values_round_trip_exactly(self, tmp_path):
        p = tmp_path / "conv.csv"
        x = 0.1 + 0.2
        io.append_convergence(p, (1, 1, "mc-newton", x, 1e-300, 2.0 / 3.0, 7))
        row = p.read_text().splitlines()[1].split(",")
        assert float(row[3]) == x and float(row[4]) == 1e-300 and float(row[5]) == 2.0 / 3.0

    def test_wrong_width(self, tmp_path):
        with pytest.raises(ValueError):
            io.append_convergence(tmp_path / "c.csv", (1, 2, 3))

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            io.append_convergence(tmp_path / "missing" / "c.csv", (1, 1, "ml", 0.0, 0.0, 0.0, 0))
