# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense Jonker-Volgenant solver (same algorithm as ``_lap_py``)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double _BIG = float("inf")


def lapjv(double[:, ::1] c):
    """Return ``rowsol`` (int64 array) for the square cost matrix ``c``."""
    cdef Py_ssize_t n = c.shape[0]
    out = np.empty(n, dtype=np.int64)
    if n == 0:
        return out
    if n == 1:
        out[0] = 0
        return out

    cdef cnp.int64_t[::1] rowsol = out
    cdef cnp.int64_t[::1] colsol = np.full(n, -1, dtype=np.int64)
    cdef double[::1] v = np.zeros(n, dtype=np.float64)
    cdef cnp.int64_t[::1] matches = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] free = np.zeros(n, dtype=np.int64)
    cdef double[::1] d = np.zeros(n, dtype=np.float64)
    cdef cnp.int64_t[::1] pred = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] collist = np.zeros(n, dtype=np.int64)

    cdef Py_ssize_t i, j, j1, j2, k, imin, i0, numfree, prvnumfree, f
    cdef Py_ssize_t freerow, low, up, last, endofpath, loopcnt, cap, steps, r
    cdef double cmin, h, m, umin, usubmin, dmin, v2
    cdef bint found

    rowsol[:] = -1

    for j in range(n - 1, -1, -1):
        imin = 0
        cmin = c[0, j]
        for i in range(1, n):
            if c[i, j] < cmin:
                cmin = c[i, j]
                imin = i
        v[j] = cmin
        matches[imin] += 1
        if matches[imin] == 1:
            rowsol[imin] = j
            colsol[j] = imin
        elif v[j] < v[rowsol[imin]]:
            j1 = rowsol[imin]
            rowsol[imin] = j
            colsol[j] = imin
            colsol[j1] = -1
        else:
            colsol[j] = -1

    numfree = 0
    for i in range(n):
        if matches[i] == 0:
            free[numfree] = i
            numfree += 1
        elif matches[i] == 1:
            j1 = rowsol[i]
            m = _BIG
            for j in range(n):
                if j != j1:
                    h = c[i, j] - v[j]
                    if h < m:
                        m = h
            v[j1] -= m

    cap = 4 * n
    for loopcnt in range(2):
        k = 0
        prvnumfree = numfree
        numfree = 0
        steps = 0
        while k < prvnumfree:
            if steps == cap:
                for r in range(k, prvnumfree):
                    free[numfree] = free[r]
                    numfree += 1
                break
            steps += 1
            i = free[k]
            k += 1
            umin = c[i, 0] - v[0]
            j1 = 0
            j2 = -1
            usubmin = _BIG
            for j in range(1, n):
                h = c[i, j] - v[j]
                if h < usubmin:
                    if h >= umin:
                        usubmin = h
                        j2 = j
                    else:
                        usubmin = umin
                        umin = h
                        j2 = j1
                        j1 = j
            i0 = colsol[j1]
            if umin < usubmin:
                v[j1] -= usubmin - umin
            elif i0 > -1:
                j1 = j2
                i0 = colsol[j2]
            rowsol[i] = j1
            colsol[j1] = i
            if i0 > -1:
                if umin < usubmin:
                    k -= 1
                    free[k] = i0
                else:
                    free[numfree] = i0
                    numfree += 1

    for f in range(numfree):
        freerow = free[f]
        for j in range(n):
            d[j] = c[freerow, j] - v[j]
            pred[j] = freerow
            collist[j] = j
        low = 0
        up = 0
        last = 0
        endofpath = -1
        found = False
        dmin = 0.0
        while not found:
            if up == low:
                last = low - 1
                dmin = d[collist[up]]
                up += 1
                for k in range(up, n):
                    j = collist[k]
                    h = d[j]
                    if h <= dmin:
                        if h < dmin:
                            up = low
                            dmin = h
                        collist[k] = collist[up]
                        collist[up] = j
                        up += 1
                for k in range(low, up):
                    if colsol[collist[k]] < 0:
                        endofpath = collist[k]
                        found = True
                        break
            if not found:
                j1 = collist[low]
                low += 1
                i = colsol[j1]
                h = c[i, j1] - v[j1] - dmin
                for k in range(up, n):
                    j = collist[k]
                    v2 = c[i, j] - v[j] - h
                    if v2 < d[j]:
                        pred[j] = i
                        if v2 == dmin:
                            if colsol[j] < 0:
                                endofpath = j
                                found = True
                                break
                            collist[k] = collist[up]
                            collist[up] = j
                            up += 1
                        d[j] = v2
        for k in range(last + 1):
            j1 = collist[k]
            v[j1] += d[j1] - dmin
        while True:
            i = pred[endofpath]
            colsol[endofpath] = i
            j1 = endofpath
            endofpath = rowsol[i]
            rowsol[i] = j1
            if i == freerow:
                break
    return out
