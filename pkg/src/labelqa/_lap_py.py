"""Pure-Python dense Jonker-Volgenant solver.

Reference path for :mod:`labelqa._lap_ext`; both must return identical
assignments. Operates on nested lists, which is considerably faster than
per-element numpy indexing in CPython.
"""

_BIG = float("inf")


def lapjv(cost):
    """Solve the square assignment problem for a list-of-lists cost matrix.

    Returns ``rowsol`` where ``rowsol[i]`` is the column assigned to row ``i``.
    """
    n = len(cost)
    if n == 0:
        return []
    if n == 1:
        return [0]
    c = [list(map(float, row)) for row in cost]

    rowsol = [-1] * n
    colsol = [-1] * n
    v = [0.0] * n
    matches = [0] * n
    free = [0] * n

    # column reduction, last column first
    for j in range(n - 1, -1, -1):
        imin = 0
        cmin = c[0][j]
        for i in range(1, n):
            if c[i][j] < cmin:
                cmin = c[i][j]
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

    # reduction transfer
    numfree = 0
    for i in range(n):
        if matches[i] == 0:
            free[numfree] = i
            numfree += 1
        elif matches[i] == 1:
            j1 = rowsol[i]
            ci = c[i]
            m = _BIG
            for j in range(n):
                if j != j1:
                    h = ci[j] - v[j]
                    if h < m:
                        m = h
            v[j1] -= m

    # augmenting row reduction, two passes; capped because near-equal duals
    # make two rows trade a column by ulp-sized decrements indefinitely
    cap = 4 * n
    for _ in range(2):
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
            ci = c[i]
            umin = ci[0] - v[0]
            j1 = 0
            j2 = -1
            usubmin = _BIG
            for j in range(1, n):
                h = ci[j] - v[j]
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

    # shortest augmenting path for each remaining free row
    d = [0.0] * n
    pred = [0] * n
    collist = [0] * n
    for f in range(numfree):
        freerow = free[f]
        cf = c[freerow]
        for j in range(n):
            d[j] = cf[j] - v[j]
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
                ci = c[i]
                h = ci[j1] - v[j1] - dmin
                for k in range(up, n):
                    j = collist[k]
                    v2 = ci[j] - v[j] - h
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
    return rowsol
