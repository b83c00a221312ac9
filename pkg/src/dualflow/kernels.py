"""Backend selection for the element kernels.

The compiled extension is preferred when it was built; the NumPy
implementation is a drop-in replacement. ``BACKEND`` records which one
is active so runs can report it.
"""

from . import _assembly_py

try:
    from . import _assembly_cy

    _active = _assembly_cy
    BACKEND = "cython"
except ImportError:  # pragma: no cover - depends on the build environment
    _assembly_cy = None
    _active = _assembly_py
    BACKEND = "numpy"


def available_backends():
    names = ["numpy"]
    if _assembly_cy is not None:
        names.append("cython")
    return names


def get_backend(name=None):
    """Return the kernel module for `name` ("numpy", "cython" or None=active)."""
    if name is None:
        return _active
    if name == "numpy":
        return _assembly_py
    if name == "cython":
        if _assembly_cy is None:
            raise ValueError("compiled kernel backend is not available")
        return _assembly_cy
    raise ValueError(f"unknown kernel backend {name!r}")


def stiffness_elems(coeff_q, gg):
    return _active.stiffness_elems(coeff_q, gg)


def mass_elems(weight_q, mm):
    return _active.mass_elems(weight_q, mm)


def convection_elems(b_q, cd):
    return _active.convection_elems(b_q, cd)


def load_elems(f_q, lv):
    return _active.load_elems(f_q, lv)
