"""NumPy fallback for the element-matrix kernels.

Same call signatures as the compiled backend; everything is a single
einsum over precomputed reference tensors.
"""

import numpy as np


def stiffness_elems(coeff_q, gg):
    """coeff_q: (nelem, nq); gg: (nq, 4, 4) -> (nelem, 4, 4)."""
    return np.einsum("eq,qij->eij", coeff_q, gg, optimize=True)


def mass_elems(weight_q, mm):
    """weight_q: (nelem, nq); mm: (nq, 4, 4) -> (nelem, 4, 4)."""
    return np.einsum("eq,qij->eij", weight_q, mm, optimize=True)


def convection_elems(b_q, cd):
    """b_q: (nelem, nq, 2); cd: (nq, 2, 4, 4) -> (nelem, 4, 4)."""
    return np.einsum("eqd,qdij->eij", b_q, cd, optimize=True)


def load_elems(f_q, lv):
    """f_q: (nelem, nq); lv: (nq, 4) -> (nelem, 4)."""
    return f_q @ lv
