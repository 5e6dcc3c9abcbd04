# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled column-elimination kernel; see ``_kernels_py`` for the reference version."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def eliminate_block(double[::1] w, double[:, ::1] panel, Py_ssize_t c0, const cnp.int64_t[::1] cols):
    """Remove columns ``cols`` (absolute, ascending, all inside the block) from row ``w``.

    ``panel`` holds the current inverse-Hessian columns ``c0 .. c0+b`` for
    every row index and is downdated in place after each removal.
    """
    cdef Py_ssize_t d = panel.shape[0]
    cdef Py_ssize_t b = panel.shape[1]
    cdef Py_ssize_t t, j, r, p, q
    cdef double g, e, cj
    cdef double[::1] rowp = np.empty(b, dtype=np.float64)
    cdef double[::1] colq = np.empty(d, dtype=np.float64)

    for t in range(cols.shape[0]):
        p = cols[t]
        q = p - c0
        g = panel[p, q]
        e = w[p] / g
        for j in range(d):
            colq[j] = panel[j, q]
            w[j] -= e * colq[j]
        w[p] = 0.0
        for r in range(b):
            rowp[r] = panel[p, r] / g
        for j in range(d):
            cj = colq[j]
            if cj != 0.0:
                for r in range(b):
                    panel[j, r] -= cj * rowp[r]
