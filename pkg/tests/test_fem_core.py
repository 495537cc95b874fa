import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from conftest import UNIT_SQUARE, block_in_cube, unit_square_grid
from emsi.fem_core import (
    AssemblyError,
    Dirichlet,
    Field,
    NewtonError,
    SingularMatrixError,
    SparseSystem,
    assemble,
    cell_data,
    newton_solve,
    project_gradient,
    quadrature,
    solve_linear,
    transfer_nodal,
)
from emsi.mesh import extract_submesh, parse_mesh


def mass_kernel(data, local):
    (u,) = local
    return [data.test(data.at_qp(u))]


def poisson_kernel(data, local):
    (u,) = local
    g = data.gradient(u)  # (c, 1, 3)
    return [data.test_grad(np.broadcast_to(g[:, None], (g.shape[0], data.weight.shape[1]) + g.shape[1:]))]


@pytest.mark.parametrize("dim,degree", [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)])
def test_quadrature_weights_and_exactness(dim, degree):
    rule = quadrature(dim, degree)
    assert rule.weights.sum() == pytest.approx(1.0 / [1, 1, 2, 6][dim], rel=1e-15)
    assert np.allclose(rule.barycentric.sum(axis=1), 1.0)
    # integral of lambda_0^p over the reference simplex is p! dim! / (p + dim)! times its volume
    import math

    for p in range(degree + 1):
        exact = math.factorial(p) * math.factorial(dim) / math.factorial(p + dim) / math.factorial(dim)
        assert rule.weights @ rule.barycentric[:, 0] ** p == pytest.approx(exact, rel=1e-14)
    if degree == 2:
        exact = 1.0 * math.factorial(dim) / math.factorial(dim + 2) / math.factorial(dim)
        assert rule.weights @ (rule.barycentric[:, 0] * rule.barycentric[:, 1]) == pytest.approx(exact, rel=1e-14)


def test_quadrature_rejects_other_degrees():
    with pytest.raises(ValueError):
        quadrature(2, 3)


def test_field_invariants():
    mesh = unit_square_grid(2)
    f = Field(mesh, 3)
    assert f.coeffs.size == mesh.n_nodes * 3
    assert f.coeffs0.shape == f.coeffs00.shape == f.coeffs.shape
    with pytest.raises(ValueError):
        Field(mesh, 2, np.zeros(5))
    f.coeffs[:] = 1.0
    f.rotate_history()
    f.coeffs[:] = 2.0
    f.rotate_history()
    assert (f.coeffs00[0], f.coeffs0[0], f.coeffs[0]) == (1.0, 2.0, 2.0)


def test_zero_kernel():
    mesh = unit_square_grid(3)
    sys = assemble(lambda data, local: [np.zeros_like(local[0])], [Field(mesh, 1)], mesh)
    assert not sys.residual.any()
    assert sys.jacobian.count_nonzero() == 0


def test_mass_kernel_integrates_area():
    mesh = unit_square_grid(4)
    f = Field(mesh, 1, np.ones(mesh.n_nodes))
    sys = assemble(mass_kernel, [f], mesh, affine=True)
    assert sys.residual.sum() == pytest.approx(1.0, rel=1e-14)
    # the Jacobian is the consistent mass matrix, whose entries sum to the area as well
    assert sys.jacobian.sum() == pytest.approx(1.0, rel=1e-12)


def test_poisson_linear_field_interior_rows_vanish():
    mesh = unit_square_grid(5)
    f = Field(mesh, 1, 3.0 * mesh.nodes[:, 0] - 2.0 * mesh.nodes[:, 1] + 1.0)
    sys = assemble(poisson_kernel, [f], mesh, affine=True)
    interior = np.setdiff1d(np.arange(mesh.n_nodes), mesh.boundary_nodes())
    assert np.abs(sys.residual[interior]).max() < 1e-13


def test_nonfinite_contribution_names_cell():
    mesh = unit_square_grid(2)

    def bad(data, local):
        out = np.zeros_like(local[0])
        out[data.ids == 3] = np.nan
        return [out]

    with pytest.raises(AssemblyError, match="cell 3"):
        assemble(bad, [Field(mesh, 1)], mesh)


def test_dirichlet_rows_are_identity():
    mesh = unit_square_grid(2)
    f = Field(mesh, 2, np.arange(mesh.n_nodes * 2, dtype=float))
    bc = Dirichlet(0, np.array([0, 4]), 1, 7.0)
    sys = assemble(mass_kernel, [f], mesh, dirichlet=[bc], affine=True)
    for node in (0, 4):
        dof = 2 * node + 1
        row = sys.jacobian.getrow(dof).toarray().ravel()
        assert row[dof] == 1.0 and np.count_nonzero(row) == 1
        assert sys.residual[dof] == f.coeffs[dof] - 7.0


@given(st.integers(0, 2**31 - 1))
def test_assembly_order_independent(seed):
    rng = np.random.default_rng(seed)
    mesh = unit_square_grid(4)
    f = Field(mesh, 1, rng.standard_normal(mesh.n_nodes))

    def kernel(data, local):
        u = local[0]
        return [data.test(data.at_qp(u) ** 3) + poisson_kernel(data, local)[0]]

    data = cell_data(mesh)
    a = assemble(kernel, [f], mesh, cells=data)
    b = assemble(kernel, [f], mesh, cells=data, cell_order=rng.permutation(mesh.n_cells))
    scale = np.abs(a.residual).max()
    assert np.abs(a.residual - b.residual).max() <= 1e-13 * scale
    assert abs(a.jacobian - b.jacobian).max() <= 1e-13 * abs(a.jacobian).max()


def test_solve_identity():
    sys = SparseSystem(np.array([1.0, 0.0, 0.0]), sp.identity(3, format="csr"))
    assert np.array_equal(solve_linear(sys), [-1.0, 0.0, 0.0])


def test_solve_two_by_two_by_hand():
    # [[4, 1], [1, 3]] delta = -[1, 2]; inverse is [[3, -1], [-1, 4]] / 11
    J = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
    delta = solve_linear(SparseSystem(np.array([1.0, 2.0]), J))
    assert delta == pytest.approx([-(3 - 2) / 11, -(-1 + 8) / 11], rel=1e-15)


def test_solve_singular_reports_dof():
    J = sp.csr_matrix(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]))
    with pytest.raises(SingularMatrixError) as info:
        solve_linear(SparseSystem(np.ones(3), J))
    assert info.value.dof in (0, 1)


def test_solve_zero_row():
    J = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(SingularMatrixError, match="dof 1"):
        solve_linear(SparseSystem(np.ones(2), J))


@given(st.integers(0, 2**31 - 1), st.integers(-12, 12))
def test_solve_contract_on_badly_scaled_systems(seed, decades):
    rng = np.random.default_rng(seed)
    n = 8
    A = rng.standard_normal((n, n)) + n * np.eye(n)
    scale = 10.0 ** np.linspace(0, decades, n)
    J = sp.csr_matrix(scale[:, None] * A)
    r = rng.standard_normal(n) * scale
    delta = solve_linear(SparseSystem(r, J))
    assert np.linalg.norm(J @ delta + r) <= 1e-10 * np.linalg.norm(r)


def _scalar_field(x0):
    return Field(None, 1, np.array([x0]))


def _scalar_residual(fn, dfn):
    def res(fields):
        x = fields[0].coeffs[0]
        return SparseSystem(np.array([fn(x)]), sp.csr_matrix([[dfn(x)]]))

    return res


def test_newton_already_converged():
    f = _scalar_field(2.0)
    report = newton_solve(_scalar_residual(lambda x: x**3 - 8, lambda x: 3 * x**2), [f])
    assert report.iterations == 0


def test_newton_cube_root_by_hand():
    f = _scalar_field(3.0)
    report = newton_solve(_scalar_residual(lambda x: x**3 - 8, lambda x: 3 * x**2), [f], tol_abs=1e-12)
    assert f.coeffs[0] == pytest.approx(2.0, abs=1e-12)
    assert report.iterations <= 8
    # first iterate by hand: 3 - 19/27
    assert report.residual_norms[1] == pytest.approx(abs((3 - 19 / 27) ** 3 - 8), rel=1e-12)


def test_newton_nonconvergence_carries_residual():
    f = _scalar_field(3.0)
    with pytest.raises(NewtonError, match="did not converge") as info:
        newton_solve(_scalar_residual(lambda x: x**2 + 1, lambda x: 2 * x), [f], max_iter=5, damping=False)
    assert info.value.last_norm == pytest.approx(f.coeffs[0] ** 2 + 1)
    assert len(info.value.history) == 6


def test_newton_linear_problem_one_iteration():
    mesh = unit_square_grid(6)
    f = Field(mesh, 1)
    bn = mesh.boundary_nodes()
    xb = mesh.nodes[bn]
    bc = Dirichlet(0, bn, 0, 1.0 + xb[:, 0] * xb[:, 1])

    def res(fields):
        return assemble(poisson_kernel, fields, mesh, dirichlet=[bc], affine=True)

    report = newton_solve(res, [f], linear=True)
    assert report.iterations == 1
    assert report.residual_norms[-1] < 1e-12
    assert np.array_equal(f.coeffs[bn], 1.0 + xb[:, 0] * xb[:, 1])


def test_newton_keeps_constrained_values():
    mesh = unit_square_grid(4)
    f = Field(mesh, 1, np.full(mesh.n_nodes, 0.3))
    bn = mesh.boundary_nodes()
    bc = Dirichlet(0, bn, 0, 0.5)
    seen = []

    def kernel(data, local):
        u = local[0]
        return [poisson_kernel(data, local)[0] + data.test(data.at_qp(u) ** 3 - 1.0)]

    def res(fields):
        seen.append(fields[0].coeffs[bn].copy())
        return assemble(kernel, fields, mesh, dirichlet=[bc])

    newton_solve(res, [f], tol_abs=1e-12)
    assert all(np.array_equal(s, np.full(bn.size, 0.5)) for s in seen[1:])


def test_transfer_identity_and_round_trip(rng):
    mesh = parse_mesh(UNIT_SQUARE)
    whole = extract_submesh(mesh, [1, 2])
    src = Field(mesh, 2, rng.standard_normal(8))
    dst = Field(whole.child, 2)
    transfer_nodal(src, dst, whole, "pull")
    assert np.array_equal(dst.coeffs, src.coeffs)

    sub = extract_submesh(mesh, 1)  # nodes 0, 1, 2
    child = Field(sub.child, 2)
    transfer_nodal(src, child, sub, "pull")
    for i, p in enumerate(sub.parent_node_of_child):
        assert np.array_equal(child.nodal()[i], src.nodal()[p])
    back = src.copy()
    back.coeffs[:] = -1.0
    transfer_nodal(child, back, sub, "push")
    assert np.array_equal(back.nodal()[sub.parent_node_of_child], src.nodal()[sub.parent_node_of_child])
    assert np.all(back.nodal()[3] == -1.0)


def test_transfer_errors():
    mesh = parse_mesh(UNIT_SQUARE)
    sub = extract_submesh(mesh, 1)
    with pytest.raises(ValueError, match="component"):
        transfer_nodal(Field(mesh, 1), Field(sub.child, 3), sub)
    with pytest.raises(ValueError):
        transfer_nodal(Field(mesh, 1), Field(sub.child, 1), sub, "push")


def test_project_gradient_constant_and_linear(rng):
    mesh = block_in_cube(2)
    mesh.nodes = mesh.nodes + 0.05 * rng.uniform(-1, 1, mesh.nodes.shape) * (
        ~np.isin(np.arange(mesh.n_nodes), mesh.boundary_nodes()))[:, None]
    const = project_gradient(Field(mesh, 1, np.full(mesh.n_nodes, 4.0)))
    assert np.abs(const.coeffs).max() < 1e-12
    g = project_gradient(Field(mesh, 1, mesh.nodes[:, 0].copy()))
    assert np.abs(g.nodal() - [1.0, 0.0, 0.0]).max() < 1e-13
    G = rng.standard_normal((2, 3))
    vec = project_gradient(Field(mesh, 2, (mesh.nodes @ G.T).ravel()))
    assert np.abs(vec.nodal() - G.ravel()).max() < 1e-13


def _strip(n):
    """One row of squares with alternating diagonals, so interior patches are symmetric."""
    from emsi.mesh import Mesh

    x = np.linspace(0.0, 1.0, n + 1)
    nodes = np.concatenate([np.column_stack([x, np.zeros_like(x)]), np.column_stack([x, np.full_like(x, 1.0 / n)])])
    cells = []
    for i in range(n):
        a, b, c, d = i, i + 1, n + 2 + i, n + 1 + i
        cells += [[a, b, c], [a, c, d]] if i % 2 == 0 else [[a, b, d], [b, c, d]]
    return Mesh(2, nodes, np.array(cells), np.zeros(2 * n, dtype=int))


def test_project_gradient_quadratic_on_strip():
    errs = []
    for n in (8, 16, 32):
        mesh = _strip(n)
        g = project_gradient(Field(mesh, 1, mesh.nodes[:, 0] ** 2)).nodal()[:, 0]
        x = mesh.nodes[:, 0]
        interior = (x > 1e-9) & (x < 1 - 1e-9)
        errs.append(np.abs(g[interior] - 2 * x[interior]).max())
    errs = np.array(errs)
    assert np.all(errs < 1e-12) or np.all(errs[1:] / errs[:-1] < 0.3)
