import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import block_in_cube, unit_square_grid
from emsi.mesh import Mesh, extract_submesh
from emsi.morphing import MorphError, build, fixed_nodes, mesh_velocity, morph, quality_report


def _square_with_centre():
    nodes = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.4, 0.55]])
    cells = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return Mesh(2, nodes, cells, np.zeros(4, dtype=int))


def _triangle_with_centroid():
    nodes = np.array([[0, 0], [1, 0], [0, 1], [1 / 3, 1 / 3]])
    cells = np.array([[0, 1, 3], [1, 2, 3], [2, 0, 3]])
    return Mesh(2, nodes, cells, np.zeros(3, dtype=int))


def _square_block(n=8):
    def region(c):
        inside = (np.abs(c[:, 0] - 0.5) < 0.2) & (np.abs(c[:, 1] - 0.5) < 0.2)
        return np.where(inside, 1, 0)

    return unit_square_grid(n, region=region)


def test_all_nodes_fixed_gives_empty_operator():
    mesh = unit_square_grid(1)
    op = build(mesh)
    assert op.n_free == 0
    new = mesh.nodes + 0.1
    assert np.array_equal(morph(op, mesh.nodes, new[op.fixed_ids]), new)


def test_single_interior_node_located():
    mesh = _square_with_centre()
    op = build(mesh)
    assert op.free_ids.tolist() == [4]
    assert op.bary_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert op.bary_weights.min() >= -1e-10
    corners = mesh.nodes[op.anchors_of_free()[0]]
    assert op.bary_weights[0] @ corners == pytest.approx(mesh.nodes[4], abs=1e-15)


def test_centroid_weights_and_one_third_motion():
    mesh = _triangle_with_centroid()
    op = build(mesh, fixed=np.arange(3))
    assert op.bary_weights[0] == pytest.approx([1 / 3] * 3, abs=1e-15)
    delta = np.array([0.06, -0.03])
    new = mesh.nodes[:3].copy()
    new[1] += delta
    moved = morph(op, mesh.nodes, new)
    assert moved[3] - mesh.nodes[3] == pytest.approx(delta / 3, abs=1e-15)


def test_identity_motion_is_exact():
    mesh = block_in_cube(8)
    op = build(mesh, extract_submesh(mesh, 1))
    assert op.n_free > 0
    assert np.array_equal(morph(op, mesh.nodes, mesh.nodes[op.fixed_ids]), mesh.nodes)


@given(st.integers(0, 2**31 - 1))
def test_affine_maps_are_reproduced(seed):
    rng = np.random.default_rng(seed)
    mesh = block_in_cube(8)
    op = build(mesh, extract_submesh(mesh, 1))
    assert op.n_free > 0
    G = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    c = rng.standard_normal(3)
    image = mesh.nodes @ G.T + c
    moved = morph(op, mesh.nodes, image[op.fixed_ids])
    assert np.abs(moved - image).max() <= 1e-12 * np.abs(image).max()


@given(st.integers(0, 2**31 - 1))
def test_morph_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    mesh = _square_block()
    op = build(mesh, extract_submesh(mesh, 1))
    anchors = mesh.nodes[op.fixed_ids] + 0.01 * rng.standard_normal((op.fixed_ids.size, 2))
    once = morph(op, mesh.nodes, anchors)
    twice = morph(op, once, once[op.fixed_ids])
    assert np.abs(twice - once).max() <= 1e-14


@given(st.integers(0, 2**31 - 1))
def test_moving_one_anchor_is_local(seed):
    rng = np.random.default_rng(seed)
    mesh = _square_block()
    op = build(mesh, extract_submesh(mesh, 1))
    k = int(rng.integers(op.fixed_ids.size))
    anchors = mesh.nodes[op.fixed_ids].copy()
    anchors[k] += 0.02 * rng.standard_normal(2)
    moved = morph(op, mesh.nodes, anchors)
    changed = np.flatnonzero(np.any(moved[op.free_ids] != mesh.nodes[op.free_ids], axis=1))
    users = np.flatnonzero(np.any(op.anchors_of_free() == op.fixed_ids[k], axis=1))
    assert set(changed.tolist()) <= set(users.tolist())


def test_fixed_set_is_body_and_boundary():
    mesh = _square_block()
    sub = extract_submesh(mesh, 1)
    fixed = fixed_nodes(mesh, sub)
    expect = np.union1d(mesh.boundary_nodes(), sub.parent_node_of_child)
    assert np.array_equal(fixed, expect)


def test_free_node_outside_anchor_hull_fails():
    mesh = _square_with_centre()
    with pytest.raises(MorphError, match="outside"):
        build(mesh, fixed=np.array([0, 1, 4]))


def test_mesh_velocity():
    X = np.random.default_rng(0).random((5, 2))
    assert not mesh_velocity(X, X, 0.1).any()
    d = np.array([0.2, -0.1])
    assert mesh_velocity(X + d, X, 0.5) == pytest.approx(np.tile(d / 0.5, (5, 1)))
    with pytest.raises(ValueError):
        mesh_velocity(X, X, 0.0)


def test_interface_velocity_equals_material_velocity(rng):
    mesh = _square_block()
    sub = extract_submesh(mesh, 1)
    op = build(mesh, sub)
    dt = 1e-3
    u0 = 1e-3 * rng.standard_normal((sub.child.n_nodes, 2))
    u = u0 + 1e-4 * rng.standard_normal(u0.shape)

    def place(disp):
        target = mesh.nodes.copy()
        target[sub.parent_node_of_child] += disp
        return morph(op, mesh.nodes, target[op.fixed_ids])

    w = mesh_velocity(place(u), place(u0), dt)
    assert np.array_equal(w[sub.parent_node_of_child], ((mesh.nodes[sub.parent_node_of_child] + u)
                                                        - (mesh.nodes[sub.parent_node_of_child] + u0)) / dt)


def test_quality_of_unmorphed_mesh():
    mesh = _square_block()
    q = quality_report(mesh, mesh.nodes)
    assert q.min_ratio == 1.0 and q.inverted == 0


def test_collapsing_motion_is_flagged():
    mesh = _square_with_centre()
    op = build(mesh, fixed=np.arange(4))
    anchors = mesh.nodes[:4].copy()
    anchors[2] = [-1.0, -1.0]  # drag a corner through the opposite one
    q = quality_report(mesh, morph(op, mesh.nodes, anchors))
    assert q.inverted >= 1
    assert q.min_ratio <= 0.0
