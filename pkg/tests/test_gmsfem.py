import numpy as np
import pytest
import scipy.sparse as sp

from dualflow import fem, gmsfem, mesh, model, timestepping as ts


@pytest.fixture(scope="module")
def patch16():
    """Interior neighborhood on a 16-fine / 4-coarse nesting, with a
    high-contrast element field."""
    fine = mesh.build_fine_grid(16)
    coarse = mesh.build_coarse_grid(fine, 4)
    nb = mesh.coarse_neighborhood(coarse, coarse.node_id(2, 2))
    rng = np.random.default_rng(7)
    kappa = np.where(rng.uniform(size=fine.nelem) < 0.2, 1.0e4, 1.0)
    return fine, coarse, nb, kappa


def test_uncoupled_snapshots_boundary_and_harmonicity(patch16):
    fine, coarse, nb, kappa = patch16
    snap = gmsfem.uncoupled_snapshots(nb, kappa)
    loc_b = nb.local_index(nb.boundary_nodes)
    loc_i = nb.local_index(nb.interior_nodes)
    V = snap.vectors
    assert snap.dim == nb.n_boundary
    np.testing.assert_array_equal(V[loc_b], np.eye(nb.n_boundary))
    A = fem.assemble_on_subset(
        fine,
        fem.element_matrices(fine, "stiffness", kappa),
        nb.fine_elems,
        nb.fine_nodes,
    )
    res = np.abs((A @ V)[loc_i]).max()
    assert res < 1e-8 * abs(A).max()


def test_coupled_snapshots_boundary_layout(patch16):
    fine, coarse, nb, kappa = patch16
    c_s = np.full(fine.nnode, 100.0)
    snap = gmsfem.coupled_snapshots(nb, kappa, 2.0 * kappa, c_s)
    n = nb.fine_nodes.size
    nJ = nb.n_boundary
    assert snap.dim == 2 * nJ
    loc_b = nb.local_index(nb.boundary_nodes)
    V = snap.vectors
    np.testing.assert_array_equal(V[loc_b, :nJ], np.eye(nJ))
    np.testing.assert_array_equal(V[loc_b + n, nJ:], np.eye(nJ))
    # spike on one continuum leaves the other continuum's boundary at zero
    assert np.abs(V[loc_b + n, :nJ]).max() == 0.0
    assert np.abs(V[loc_b, nJ:]).max() == 0.0
    np.testing.assert_array_equal(snap.boundary_r, np.repeat([1, 2], nJ))


def test_coupled_snapshots_decouple_without_exchange(patch16):
    fine, coarse, nb, kappa = patch16
    kappa2 = 3.0 + np.cos(np.arange(fine.nelem, dtype=float))
    coupled = gmsfem.coupled_snapshots(nb, kappa, kappa2, 0.0)
    un1 = gmsfem.uncoupled_snapshots(nb, kappa)
    un2 = gmsfem.uncoupled_snapshots(nb, kappa2)
    n = nb.fine_nodes.size
    nJ = nb.n_boundary
    np.testing.assert_allclose(coupled.vectors[:n, :nJ], un1.vectors, atol=1e-8)
    np.testing.assert_allclose(coupled.vectors[n:, nJ:], un2.vectors, atol=1e-8)
    assert np.abs(coupled.vectors[n:, :nJ]).max() < 1e-12
    assert np.abs(coupled.vectors[:n, nJ:]).max() < 1e-12


def test_spectral_decompose_ascending_orthonormal(patch16):
    fine, coarse, nb, kappa = patch16
    snap = gmsfem.uncoupled_snapshots(nb, kappa)
    m = 6
    vals, funcs = gmsfem.spectral_decompose(snap, kappa, kappa, m)
    assert vals.shape == (m,)
    assert funcs.shape == (nb.fine_nodes.size, m)
    assert (np.diff(vals) >= -1e-10).all()
    assert vals[0] > -1e-8  # symmetric a-form, so nonnegative up to roundoff
    S = fem.assemble_on_subset(
        fine,
        fem.element_matrices(fine, "mass", kappa),
        nb.fine_elems,
        nb.fine_nodes,
    )
    gram = funcs.T @ (S @ funcs)
    np.testing.assert_allclose(gram, np.eye(m), atol=1e-8)


def test_spectral_decompose_validates_m(patch16):
    fine, coarse, nb, kappa = patch16
    snap = gmsfem.uncoupled_snapshots(nb, kappa)
    with pytest.raises(ValueError):
        gmsfem.spectral_decompose(snap, kappa, kappa, 0)
    with pytest.raises(ValueError):
        gmsfem.spectral_decompose(snap, kappa, kappa, snap.dim + 1)


def test_build_space_dims_and_metadata():
    m = model.test_problem(nx=16)
    coarse = mesh.build_coarse_grid(m.grid, 4)
    n_int = coarse.interior_nodes.size
    assert n_int == 9

    cpl = gmsfem.build_multiscale_space(m, coarse, "coupled", 3)
    assert cpl.dim == 3 * n_int
    assert cpl.scalar_components == 2 * cpl.dim
    assert set(cpl.col_node) == set(coarse.interior_nodes)
    assert (cpl.col_rank < 3).all()
    assert (cpl.col_continuum == 0).all()

    unc = gmsfem.build_multiscale_space(m, coarse, "uncoupled", 3)
    assert unc.dim == 2 * 3 * n_int
    assert unc.scalar_components == unc.dim
    assert set(unc.col_continuum) == {1, 2}

    with pytest.raises(ValueError):
        gmsfem.build_multiscale_space(m, coarse, "mixed", 3)


def test_basis_columns_vanish_on_domain_boundary():
    m = model.test_problem(nx=16)
    coarse = mesh.build_coarse_grid(m.grid, 4)
    space = gmsfem.build_multiscale_space(m, coarse, "coupled", 2)
    n = m.grid.nnode
    R = space.R.toarray()
    bnd = np.concatenate([m.grid.boundary_nodes, m.grid.boundary_nodes + n])
    assert np.abs(R[bnd]).max() == 0.0
    # and the columns are nonzero somewhere
    assert (np.abs(R).max(axis=0) > 0).all()


def test_select_is_a_prefix():
    m = model.test_problem(nx=16)
    coarse = mesh.build_coarse_grid(m.grid, 4)
    space = gmsfem.build_multiscale_space(m, coarse, "coupled", 4)
    sub = space.select(2)
    assert sub.dim == 2 * coarse.interior_nodes.size
    assert (sub.col_rank < 2).all()
    # selected columns are exactly the rank-(0,1) columns of the parent
    mask = space.col_rank < 2
    assert abs(space.R[:, mask] - sub.R).max() == 0.0
    with pytest.raises(ValueError):
        space.select(5)


def test_full_snapshot_space_reproduces_fine_solution():
    # keeping every snapshot on every coarse node spans all interior fine
    # DOFs, so the projected solve is the fine solve up to roundoff
    m = model.test_problem(nx=8)
    coarse = mesh.build_coarse_grid(m.grid, 4)
    with pytest.warns(UserWarning):
        space = gmsfem.build_multiscale_space(
            m, coarse, "uncoupled", 16, include_boundary=True
        )
    assert space.dim == 2 * m.grid.interior_nodes.size
    cfg = ts.TimeSteppingConfig(T=0.1, tau=0.1)
    fine_state, _ = ts.run_simulation(m, cfg)
    red_state, _ = ts.run_simulation(m, cfg, space=space)
    num = np.linalg.norm(red_state.stacked() - fine_state.stacked())
    den = np.linalg.norm(fine_state.stacked())
    assert num / den < 1e-8


def test_coarse_solve_system_identity(rng):
    n = 30
    A = sp.diags(rng.uniform(1.0, 2.0, n)).tocsr()
    rhs = rng.normal(size=n)
    direct = gmsfem.coarse_solve_system(A, rhs)
    via_eye = gmsfem.coarse_solve_system(A, rhs, sp.eye(n, format="csr"))
    np.testing.assert_allclose(direct, via_eye, atol=1e-13)


def test_basis_save_load_roundtrip(tmp_path):
    m = model.test_problem(nx=16)
    coarse = mesh.build_coarse_grid(m.grid, 4)
    space = gmsfem.build_multiscale_space(m, coarse, "coupled", 2)
    path = str(tmp_path / "basis.npz")
    gmsfem.save_basis(path, space)
    back = gmsfem.load_basis(path)
    assert back.mode == space.mode
    assert back.dim == space.dim
    assert back.built_per_node == space.built_per_node
    assert abs(back.R - space.R).max() == 0.0
    np.testing.assert_array_equal(back.col_node, space.col_node)
    np.testing.assert_array_equal(back.col_rank, space.col_rank)
    assert back.per_node == space.per_node

    bad = str(tmp_path / "junk.npz")
    np.savez_compressed(bad, a=np.arange(3))
    with pytest.raises(ValueError):
        gmsfem.load_basis(bad)
