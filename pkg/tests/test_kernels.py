import numpy as np
import pytest

from dualflow import fem, kernels, mesh


@pytest.fixture(scope="module")
def tensors():
    grid = mesh.StructuredGrid(6, 5)
    quad = fem.QuadratureRule.gauss(2)
    return grid, fem._reference_tensors(grid, quad), quad


def test_backend_listing():
    names = kernels.available_backends()
    assert "numpy" in names
    assert kernels.BACKEND in names
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("op", ["stiffness_elems", "mass_elems"])
def test_scalar_kernels_agree_across_backends(tensors, rng, op):
    grid, ref, quad = tensors
    key = {"stiffness_elems": "gg", "mass_elems": "mm"}[op]
    cq = rng.uniform(0.5, 3.0, (grid.nelem, quad.nq))
    results = [
        getattr(kernels.get_backend(name), op)(cq, ref[key])
        for name in kernels.available_backends()
    ]
    for r in results[1:]:
        np.testing.assert_allclose(r, results[0], rtol=1e-13, atol=1e-15)


def test_convection_kernel_agrees_across_backends(tensors, rng):
    grid, ref, quad = tensors
    bq = rng.normal(size=(grid.nelem, quad.nq, 2))
    results = [
        kernels.get_backend(name).convection_elems(bq, ref["cd"])
        for name in kernels.available_backends()
    ]
    for r in results[1:]:
        np.testing.assert_allclose(r, results[0], rtol=1e-13, atol=1e-15)


def test_load_kernel_agrees_across_backends(tensors, rng):
    grid, ref, quad = tensors
    fq = rng.normal(size=(grid.nelem, quad.nq))
    results = [
        np.asarray(kernels.get_backend(name).load_elems(fq, ref["lv"]))
        for name in kernels.available_backends()
    ]
    for r in results[1:]:
        np.testing.assert_allclose(r, results[0], rtol=1e-13, atol=1e-15)


def test_stiffness_kernel_against_direct_contraction(tensors, rng):
    grid, ref, quad = tensors
    cq = rng.uniform(0.5, 3.0, (grid.nelem, quad.nq))
    out = kernels.stiffness_elems(cq, ref["gg"])
    manual = np.einsum("eq,qij->eij", cq, ref["gg"])
    np.testing.assert_allclose(out, manual, rtol=1e-13, atol=1e-15)
