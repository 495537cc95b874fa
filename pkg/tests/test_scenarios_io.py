import math
import re

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given
from hypothesis import strategies as st

from emsi.constitutive import pzt5h
from emsi.coupling import CouplingError
from emsi.fem_core import NewtonError
from emsi.mesh import Mesh, rectangle_mesh, save_mesh
from emsi.scenarios_io import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_SOLVER,
    ConfigError,
    Expression,
    MaterialConfig,
    VectorExpression,
    build_material,
    build_scenario,
    emit_scenario,
    format_csv,
    format_vtk,
    main,
    parse_config,
    parse_config_text,
    run_simulation,
    serialize_config,
    setup,
    write_csv,
)

MINIMAL = """\
[scenario]
name = "vacuum"

[mesh]
path = "box.txt"

[time]
dt = 1e-3
t_max = 2e-3
"""


def _square_mesh():
    xs = np.linspace(0.0, 1.0, 5)
    mesh = rectangle_mesh(xs, xs, region=lambda c: np.where(np.abs(c[:, 0] - 0.5) + np.abs(c[:, 1] - 0.5) < 0.3, 2, 1))
    return mesh


# ------------------------------------------------------------------ expressions


def test_expression_values():
    e = Expression("2*x + y**2 - sin(pi*t) + a", {"a": 0.5})
    pts = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]])
    expect = 2 * pts[:, 0] + pts[:, 1] ** 2 - math.sin(math.pi * 0.25) + 0.5
    assert e(pts, 0.25) == pytest.approx(expect, rel=1e-15)


def test_expression_functions_and_unary():
    e = Expression("-exp(log(2)) + sqrt(4) * +abs(-3) / tanh(1) + cos(0) + tan(0)")
    assert e(np.zeros((1, 3)), 0.0)[0] == pytest.approx(-2 + 6 / math.tanh(1) + 1, rel=1e-15)


def test_expression_in_two_dimensions_has_zero_z():
    assert Expression("z + 1")(np.ones((3, 2)), 0.0).tolist() == [1.0, 1.0, 1.0]


def test_expression_constant_detection():
    assert Expression("2*pi + a", {"a": 1.0}).is_constant()
    assert not Expression("x").is_constant()
    assert not Expression("t*0").is_constant()


@pytest.mark.parametrize(
    "source, message",
    [
        ("__import__('os')", "unknown function"),
        ("x.real", "not allowed"),
        ("lambda: 1", "not allowed"),
        ("foo + 1", "unknown name 'foo'"),
        ("sin(x, y)", "exactly one argument"),
        ("True", "numeric"),
        ("'a'", "numeric"),
        ("x // 2", "not allowed"),
        ("x +", "cannot parse"),
        ("not x", "not allowed"),
    ],
)
def test_expression_rejections(source, message):
    with pytest.raises(ConfigError, match=message):
        Expression(source, path="here")


def test_vector_expression_needs_three_parts():
    with pytest.raises(ConfigError, match="three"):
        VectorExpression(["0", "1"])
    v = VectorExpression(["x", "0", "t"])
    assert v(np.array([[2.0, 0.0]]), 3.0).tolist() == [[2.0, 0.0, 3.0]]


# ------------------------------------------------------------------ configs


def test_minimal_vacuum_config():
    cfg = parse_config_text(MINIMAL)
    assert cfg.name == "vacuum" and cfg.body is None
    assert cfg.time.dt == 1e-3


@pytest.mark.parametrize(
    "extra, path",
    [
        ("[time]\ndt = 2.0\n", ""),
        ("[body]\nregions = [1]\nbogus = 1\n", "body.bogus"),
        ("[output]\ncolour = 'red'\n", "output.colour"),
        ("[materials.2]\nkind = 'epoxy'\nstiffness = 1.0\n", "materials.2.stiffness"),
        ("[materials.2]\nkind = 'unobtainium'\n", "materials.2.kind"),
        ("[[probe]]\nname = 'p'\npoint = [0, 0]\nquantities = ['Q']\n", "probe[0].quantities"),
        ("[[potential]]\nmarker = 1\nvalue = 'V*2'\n", "potential[0].value"),
        ("[surprise]\nx = 1\n", "surprise"),
    ],
)
def test_config_errors_name_the_key(extra, path):
    text = MINIMAL + extra
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.path == path


def test_config_type_errors():
    with pytest.raises(ConfigError, match="time.dt"):
        parse_config_text(MINIMAL.replace("dt = 1e-3", "dt = 'soon'"))
    with pytest.raises(ConfigError, match="time.dt"):
        parse_config_text(MINIMAL.replace("dt = 1e-3", "dt = -1.0"))
    with pytest.raises(ConfigError, match="TOML"):
        parse_config_text("[scenario\n")


def test_missing_marker_is_named(tmp_path):
    save_mesh(_square_mesh(), tmp_path / "box.txt")
    text = MINIMAL + "[[potential]]\nmarker = 77\nvalue = '1'\n"
    (tmp_path / "c.toml").write_text(text)
    cfg = parse_config(tmp_path / "c.toml")
    with pytest.raises(ConfigError, match="77"):
        setup(cfg, base_dir=tmp_path)


def test_missing_region_is_named():
    cfg = parse_config_text(MINIMAL + "[body]\nregions = [9]\n[materials.9]\nkind = 'epoxy'\n")
    with pytest.raises(ConfigError, match="region 9"):
        setup(cfg, mesh=_square_mesh())


@pytest.mark.parametrize("name", ["piezo_fan", "mre_plate", "thermo_board"])
def test_config_round_trip(name):
    _, cfg = build_scenario(name)
    assert parse_config_text(serialize_config(cfg)) == cfg


@given(st.floats(1e-6, 1.0), st.floats(0.0, 10.0), st.floats(-1e3, 1e3), st.sampled_from(["sin", "dc"]))
def test_round_trip_of_varied_fan_configs(dt, t_max, V, waveform):
    _, cfg = build_scenario("piezo_fan", V=V, waveform=waveform)
    cfg.time.dt = dt
    cfg.time.t_max = t_max
    assert parse_config_text(serialize_config(cfg)) == cfg


def test_pzt_block_matches_tabulated_material():
    mat = build_material(MaterialConfig("pzt5h", [0.0, 0.0, 1.0]))
    ref = pzt5h()
    np.testing.assert_allclose(mat.C, ref.C, rtol=1e-13, atol=1e-13 * np.abs(ref.C).max())
    np.testing.assert_allclose(mat.Ttilde, ref.Ttilde, rtol=1e-13, atol=1e-13 * np.abs(ref.Ttilde).max())
    np.testing.assert_allclose(mat.chi_el, ref.chi_el, rtol=1e-13, atol=1e-13 * np.abs(ref.chi_el).max())


def test_poling_along_y_moves_the_coupling():
    mat = build_material(MaterialConfig("pzt5h", [0.0, 1.0, 0.0]))
    ref = pzt5h()
    assert mat.chi_el[1, 1] == pytest.approx(ref.chi_el[2, 2], rel=1e-13)
    assert mat.chi_el[2, 2] == pytest.approx(ref.chi_el[0, 0], rel=1e-13)


def test_bad_material_values_are_config_errors():
    with pytest.raises(ConfigError, match="materials"):
        build_material(MaterialConfig("linear", None, {"rho0": -1.0, "E": 1e9, "nu": 0.3}))


# ------------------------------------------------------------------ output


def test_empty_log_gives_header_only_csv(tmp_path):
    path = tmp_path / "out.csv"
    write_csv([], path, ["t", "u_tip_x"])
    assert path.read_text() == "t,u_tip_x\n"
    write_csv([], path)
    assert path.read_text() == "t\n"


def test_csv_rows_are_exact():
    text = format_csv([{"t": 0.1, "phi_p": 1 / 3}], ["t", "phi_p"])
    header, row = text.strip().split("\n")
    assert header == "t,phi_p"
    assert [float(v) for v in row.split(",")] == [0.1, 1 / 3]


def _read_vtk(text):
    """Small independent reader of legacy ASCII unstructured grids."""
    lines = text.strip("\n").split("\n")
    assert lines[0].startswith("# vtk DataFile Version")
    assert lines[2] == "ASCII" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    i = 4
    out = {"order": []}
    while i < len(lines):
        words = lines[i].split()
        key = words[0]
        out["order"].append(key)
        if key == "POINTS":
            n = int(words[1])
            out["points"] = np.array([[float(v) for v in l.split()] for l in lines[i + 1:i + 1 + n]])
            i += 1 + n
        elif key == "CELLS":
            n, size = int(words[1]), int(words[2])
            rows = [[int(v) for v in l.split()] for l in lines[i + 1:i + 1 + n]]
            assert sum(len(r) for r in rows) == size
            assert all(r[0] == len(r) - 1 for r in rows)
            out["cells"] = np.array([r[1:] for r in rows])
            i += 1 + n
        elif key == "CELL_TYPES":
            n = int(words[1])
            out["types"] = [int(l) for l in lines[i + 1:i + 1 + n]]
            i += 1 + n
        elif key in ("CELL_DATA", "POINT_DATA"):
            out[key] = int(words[1])
            i += 1
        elif key == "SCALARS":
            assert lines[i + 1] == "LOOKUP_TABLE default"
            block = "POINT_DATA" if "POINT_DATA" in out else "CELL_DATA"
            n = out[block]
            out[words[1]] = np.array([float(l) for l in lines[i + 2:i + 2 + n]])
            i += 2 + n
        elif key == "VECTORS":
            n = out["POINT_DATA"]
            out[words[1]] = np.array([[float(v) for v in l.split()] for l in lines[i + 1:i + 1 + n]])
            i += 1 + n
        else:
            raise AssertionError(f"unexpected section {key}")
    return out


def test_vtk_single_tet_reparses():
    tet = Mesh(3, np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]), np.array([[0, 1, 2, 3]]), np.array([5]))
    T = np.array([300.0, 301.0, 302.5, 1 / 3])
    u = np.arange(12.0).reshape(4, 3) * 1e-7
    got = _read_vtk(format_vtk(tet, {"T": T, "u": u}))
    assert got["order"] == ["POINTS", "CELLS", "CELL_TYPES", "CELL_DATA", "SCALARS", "POINT_DATA", "SCALARS", "VECTORS"]
    assert np.array_equal(got["points"], tet.nodes)
    assert got["cells"].tolist() == [[0, 1, 2, 3]]
    assert got["types"] == [10]
    assert got["region"].tolist() == [5.0]
    assert np.array_equal(got["T"], T) and np.array_equal(got["u"], u)


def test_vtk_of_a_run(tmp_path):
    mesh, cfg = build_scenario("thermo_board")
    sim = setup(cfg, mesh)
    from emsi.scenarios_io import write_vtk

    write_vtk(sim.state, tmp_path / "s.vtk")
    got = _read_vtk((tmp_path / "s.vtk").read_text())
    assert got["points"].shape == (mesh.n_nodes, 3)
    assert got["types"] == [5] * mesh.n_cells
    for name in ("u", "A", "E", "B"):
        assert got[name].shape == (mesh.n_nodes, 3)
    assert got["T"].shape == (mesh.n_nodes,)


# ------------------------------------------------------------------ scenarios


@pytest.mark.parametrize("name", ["piezo_fan", "mre_plate", "thermo_board"])
def test_builders_are_pure(name, tmp_path):
    a = emit_scenario(*build_scenario(name), tmp_path / "a")
    b = emit_scenario(*build_scenario(name), tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "mesh.txt").read_bytes() == (tmp_path / "b" / "mesh.txt").read_bytes()


def test_unknown_scenario_parameters_rejected():
    with pytest.raises(ValueError, match="unknown parameters"):
        build_scenario("mre_plate", volume=3)
    with pytest.raises(ValueError):
        build_scenario("nope")


def test_mre_without_field_holds_the_preload():
    mesh, cfg = build_scenario("mre_plate", B0=0.0)
    sim = setup(cfg, mesh)
    pre = run_simulation(sim, static=True)[0]
    rows = run_simulation(sim, steps=3)
    assert len(rows) == 3
    assert pre["u_tip_y"] > 0
    for r in rows:
        for key in ("u_tip_x", "u_tip_y"):
            assert r[key] == pytest.approx(pre[key], rel=1e-9)
        assert r["B_tip_z"] == 0.0


def test_board_without_conduction_stays_flat():
    mesh, cfg = build_scenario("thermo_board", sigma_te=0.0, sigma_chip=0.0)
    sim = setup(cfg, mesh)
    run_simulation(sim, steps=3)
    T = sim.state.tm.T.coeffs
    assert np.abs(T - 300.0).max() <= 1e-9


# ------------------------------------------------------------------ CLI


def test_cli_scenario_and_run(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["scenario", "thermo_board", "--emit", str(tmp_path / "b"), "--set", "f=2"])
    assert res.exit_code == EXIT_OK, res.output
    res = runner.invoke(main, ["run", str(tmp_path / "b" / "config.toml"), "--steps", "2", "--out", str(tmp_path / "o")])
    assert res.exit_code == EXIT_OK, res.output
    lines = (tmp_path / "o" / "results.csv").read_text().strip().split("\n")
    assert lines[0].split(",")[0] == "t" and len(lines) == 3
    assert "T_chip" in lines[0]
    assert (tmp_path / "o" / "final.vtk").exists()


def test_cli_config_errors(tmp_path):
    runner = CliRunner()
    bad = tmp_path / "bad.toml"
    bad.write_text(MINIMAL + "[extra]\n")
    assert runner.invoke(main, ["run", str(bad)]).exit_code == EXIT_CONFIG
    assert runner.invoke(main, ["run", str(tmp_path / "missing.toml")]).exit_code == EXIT_CONFIG
    res = runner.invoke(main, ["scenario", "piezo_fan", "--emit", str(tmp_path / "f"), "--set", "V"])
    assert res.exit_code == EXIT_CONFIG
    res = runner.invoke(main, ["scenario", "piezo_fan", "--emit", str(tmp_path / "f"), "--set", "colour=1"])
    assert res.exit_code == EXIT_CONFIG


def test_cli_solver_failure(tmp_path, monkeypatch):
    runner = CliRunner()
    runner.invoke(main, ["scenario", "thermo_board", "--emit", str(tmp_path / "b")])

    def fail(*args, **kwargs):
        raise CouplingError("TM", NewtonError("no convergence", 1.0, [1.0]))

    monkeypatch.setattr("emsi.scenarios_io.run_simulation", fail)
    res = runner.invoke(main, ["run", str(tmp_path / "b" / "config.toml")])
    assert res.exit_code == EXIT_SOLVER
    assert "TM phase failed" in res.output


def test_cli_quick_verify(tmp_path):
    res = CliRunner().invoke(main, ["verify", "--quick", "--report", str(tmp_path / "v.csv")])
    assert res.exit_code == EXIT_OK, res.output
    rows = (tmp_path / "v.csv").read_text().strip().split("\n")
    assert rows[0] == "check,value,limit,passed"
    assert all(r.endswith(",1") for r in rows[1:])
    assert all(re.search(r"\bPASS\b", l) for l in res.output.strip().split("\n"))
