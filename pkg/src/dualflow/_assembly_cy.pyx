# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled element-matrix kernels (hot loop of every Picard iteration)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def stiffness_elems(double[:, ::1] coeff_q, double[:, :, ::1] gg):
    cdef Py_ssize_t nelem = coeff_q.shape[0]
    cdef Py_ssize_t nq = coeff_q.shape[1]
    cdef Py_ssize_t e, q, i, j
    cdef double c
    out_arr = np.zeros((nelem, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for e in range(nelem):
        for q in range(nq):
            c = coeff_q[e, q]
            for i in range(4):
                for j in range(4):
                    out[e, i, j] += c * gg[q, i, j]
    return out_arr


def mass_elems(double[:, ::1] weight_q, double[:, :, ::1] mm):
    return stiffness_elems(weight_q, mm)


def convection_elems(double[:, :, ::1] b_q, double[:, :, :, ::1] cd):
    cdef Py_ssize_t nelem = b_q.shape[0]
    cdef Py_ssize_t nq = b_q.shape[1]
    cdef Py_ssize_t e, q, i, j
    cdef double bx, by
    out_arr = np.zeros((nelem, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for e in range(nelem):
        for q in range(nq):
            bx = b_q[e, q, 0]
            by = b_q[e, q, 1]
            for i in range(4):
                for j in range(4):
                    out[e, i, j] += bx * cd[q, 0, i, j] + by * cd[q, 1, i, j]
    return out_arr


def load_elems(double[:, ::1] f_q, double[:, ::1] lv):
    cdef Py_ssize_t nelem = f_q.shape[0]
    cdef Py_ssize_t nq = f_q.shape[1]
    cdef Py_ssize_t e, q, i
    out_arr = np.zeros((nelem, 4), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for e in range(nelem):
        for q in range(nq):
            for i in range(4):
                out[e, i] += f_q[e, q] * lv[q, i]
    return out_arr
