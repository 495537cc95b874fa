import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import UNIT_CUBE, UNIT_SQUARE, block_in_cube, unit_square_grid
from emsi.mesh import (
    Mesh,
    MeshError,
    cell_geometry,
    extract_submesh,
    format_mesh,
    interface_facets,
    load_mesh,
    parse_mesh,
    rectangle_mesh,
)


def test_unit_square_file(tmp_path):
    path = tmp_path / "sq.msh"
    path.write_text(UNIT_SQUARE)
    mesh = load_mesh(path)
    assert (mesh.dim, mesh.n_nodes, mesh.n_cells, mesh.n_facets) == (2, 4, 2, 4)
    assert mesh.volumes().sum() == pytest.approx(1.0, rel=1e-14)
    assert mesh.reoriented == 0


def test_unit_cube_six_tets():
    mesh = parse_mesh(UNIT_CUBE)
    assert (mesh.n_nodes, mesh.n_cells) == (8, 6)
    # each Kuhn tet has volume det/6 = 1/6
    x = mesh.nodes[mesh.cells]
    by_hand = [abs(np.linalg.det(np.stack([t[1] - t[0], t[2] - t[0], t[3] - t[0]]))) / 6 for t in x]
    assert by_hand == pytest.approx([1 / 6] * 6, rel=1e-14)
    assert mesh.volumes().sum() == pytest.approx(1.0, rel=1e-14)


def _flip_first_cell(text: str) -> str:
    lines = text.splitlines()
    i = 9  # first cell line of the cube file
    v = lines[i].split()
    v[0], v[1] = v[1], v[0]
    lines[i] = " ".join(v)
    return "\n".join(lines) + "\n"


def test_flipped_tet_is_named_when_reorientation_is_off():
    with pytest.raises(MeshError, match="cell 0 is inverted"):
        parse_mesh(_flip_first_cell(UNIT_CUBE), reorient=False)


def test_flipped_tet_is_reordered_and_counted():
    mesh = parse_mesh(_flip_first_cell(UNIT_CUBE))
    assert mesh.reoriented == 1
    assert np.all(mesh.signed_volumes() > 0)


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "line 1"),
        ("emsimesh 2 3 1 0\n0 0\n1 0\n", "end of file"),
        ("emsimesh 2 3 1 0\n0 0\n1 0\n0 1\n0 1 2\n", "line 5"),
        ("emsimesh 2 3 1 0\n0 0\n1 0\n0 1\n0 1 7 0\n", "missing node"),
        ("emsimesh 2 3 1 0\n0 0\n1 0\n2 0\n0 1 2 0\n", "degenerate"),
        ("emsimesh 2 3 1 0\n0 0\n1 0\n0 x\n0 1 2 0\n", "line 4"),
        ("emsimesh 2 3 1 1\n0 0\n1 0\n0 1\n0 1 2 0\n0 5 1\n", "missing node"),
        ("emsimesh 2 3 1 0\n0 0\n1 0\n0 1\n0 1 2 0\n9 9\n", "trailing"),
    ],
)
def test_parse_errors(text, message):
    with pytest.raises(MeshError, match=message):
        parse_mesh(text)


def test_format_round_trip():
    mesh = block_in_cube(2)
    again = parse_mesh(format_mesh(mesh))
    assert np.array_equal(again.nodes, mesh.nodes)
    assert np.array_equal(again.cells, mesh.cells)
    assert np.array_equal(again.facet_marker, mesh.facet_marker)


def test_extract_whole_mesh_is_identity():
    mesh = unit_square_grid(3)
    sub = extract_submesh(mesh, 0)
    assert np.array_equal(sub.child.nodes, mesh.nodes)
    assert np.array_equal(sub.child.cells, mesh.cells)
    assert np.array_equal(sub.parent_node_of_child, np.arange(mesh.n_nodes))
    assert np.array_equal(sub.parent_cell_of_child, np.arange(mesh.n_cells))
    assert interface_facets(sub) == []


def test_extract_one_of_two_triangles():
    mesh = parse_mesh(UNIT_SQUARE)
    sub = extract_submesh(mesh, 1)
    assert (sub.child.n_cells, sub.child.n_nodes) == (1, 3)
    faces = interface_facets(sub)
    assert len(faces) == 1
    assert sorted(faces[0].nodes.tolist()) == [0, 2]
    # normal of the diagonal points from the lower triangle into the upper one
    assert faces[0].normal == pytest.approx(np.array([-1.0, 1.0]) / math.sqrt(2.0), abs=1e-15)


def test_extract_empty_region_fails():
    with pytest.raises(MeshError):
        extract_submesh(unit_square_grid(2), 7)


def test_block_volume_and_interface_area():
    mesh = block_in_cube(4)
    sub = extract_submesh(mesh, 1)
    marked = mesh.volumes()[mesh.cell_region == 1].sum()
    assert sub.child.volumes().sum() == pytest.approx(marked, rel=1e-14)
    assert marked == pytest.approx(0.125, rel=1e-12)
    faces = interface_facets(sub)
    area = sum(0.5 * np.linalg.norm(np.cross(*(mesh.nodes[f.nodes[1:]] - mesh.nodes[f.nodes[0]]))) for f in faces)
    assert area == pytest.approx(6 * 0.25, rel=1e-12)  # the block does not touch the outer boundary


def test_block_touching_outer_boundary():
    xs = np.linspace(0.0, 1.0, 5)
    from emsi.mesh import box_mesh

    mesh = box_mesh(xs, xs, xs, region=lambda c: np.where(c[:, 0] < 0.5, 1, 0))
    faces = interface_facets(extract_submesh(mesh, 1))
    area = sum(0.5 * np.linalg.norm(np.cross(*(mesh.nodes[f.nodes[1:]] - mesh.nodes[f.nodes[0]]))) for f in faces)
    # half cube: surface 4, but only the plane x = 0.5 lies inside the domain
    assert area == pytest.approx(1.0, rel=1e-12)
    for f in faces:
        assert f.normal == pytest.approx([1.0, 0.0, 0.0], abs=1e-14)


def test_interface_normals_flip_with_roles():
    mesh = unit_square_grid(4, region=lambda c: np.where(c[:, 0] + 0.3 * c[:, 1] < 0.6, 1, 2))
    a = {tuple(sorted(f.nodes)): f.normal for f in interface_facets(extract_submesh(mesh, 1))}
    b = {tuple(sorted(f.nodes)): f.normal for f in interface_facets(extract_submesh(mesh, 2))}
    assert a.keys() == b.keys()
    for key in a:
        assert np.linalg.norm(a[key]) == pytest.approx(1.0, abs=1e-14)
        assert a[key] == pytest.approx(-b[key], abs=1e-15)


def test_right_triangle_and_scaled_tet():
    tri = Mesh(2, np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([[0, 1, 2]]), np.array([0]))
    assert cell_geometry(tri, 0).volume == pytest.approx(0.5)
    ref = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tet = Mesh(3, ref, np.array([[0, 1, 2, 3]]), np.array([0]))
    big = Mesh(3, 2 * ref, np.array([[0, 1, 2, 3]]), np.array([0]))
    assert cell_geometry(big, 0).volume == pytest.approx(8 * cell_geometry(tet, 0).volume, rel=1e-14)


def test_degenerate_cell_reports_condition():
    flat = Mesh(2, np.array([[0, 0], [1, 0], [2, 1e-14]]), np.array([[0, 1, 2]]), np.array([0]))
    with pytest.raises(MeshError, match="condition number"):
        cell_geometry(flat, 0)


coords = st.floats(-2.0, 2.0, allow_nan=False)


@given(st.lists(coords, min_size=12, max_size=12))
def test_random_tet_volume_matches_determinant(vals):
    x = np.array(vals).reshape(4, 3)
    det = np.linalg.det(x[1:] - x[0])
    if abs(det) < 1e-3:
        return
    if det < 0:
        x[[0, 1]] = x[[1, 0]]
    mesh = Mesh(3, x, np.array([[0, 1, 2, 3]]), np.array([0]))
    # cofactor expansion as an independent oracle
    a, b, c = x[1] - x[0], x[2] - x[0], x[3] - x[0]
    triple = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
    geo = cell_geometry(mesh, 0)
    assert geo.volume == pytest.approx(abs(triple) / 6, rel=1e-12)
    assert np.linalg.norm(geo.normals, axis=1) == pytest.approx(np.ones(4), abs=1e-14)
    # outward: each normal points away from the opposite vertex
    for i in range(4):
        face_point = x[(i + 1) % 4]
        assert geo.normals[i] @ (face_point - x[i]) > 0


@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_generated_rectangle_volume(nx, ny, lx, ly):
    mesh = rectangle_mesh(np.linspace(0, lx, nx + 1), np.linspace(0, ly, ny + 1))
    mesh.validate()
    assert mesh.volumes().sum() == pytest.approx(lx * ly, rel=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_submesh_coordinates_are_copied_exactly(seed):
    rng = np.random.default_rng(seed)
    mesh = block_in_cube(2)
    mesh.nodes = mesh.nodes + 0.01 * rng.standard_normal(mesh.nodes.shape)
    mesh.cell_region = rng.integers(0, 2, mesh.n_cells)
    if not np.any(mesh.cell_region == 1):
        mesh.cell_region[0] = 1
    sub = extract_submesh(mesh, 1)
    assert np.array_equal(sub.child.nodes, mesh.nodes[sub.parent_node_of_child])
    back = sub.child_node_of_parent[sub.parent_node_of_child]
    assert np.array_equal(back, np.arange(sub.child.n_nodes))
    assert np.all(mesh.cell_region[sub.parent_cell_of_child] == 1)
    assert np.array_equal(sub.parent_node_of_child[sub.child.cells], mesh.cells[sub.parent_cell_of_child])
