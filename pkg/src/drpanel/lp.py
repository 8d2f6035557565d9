"""Dense phase-1 simplex for linear feasibility over free variables."""

from __future__ import annotations

import numpy as np

_TOL = 1e-9


def feasible_point(a_eq, b_eq, a_ge=None, b_ge=None, tol: float = _TOL):
    """Search for x with ``a_eq @ x == b_eq`` and ``a_ge @ x >= b_ge``.

    Variables are free (unbounded in sign). Returns ``(feasible, x)`` where
    x is a vertex of the reformulated nonnegative program, or ``(False,
    None)``. Deterministic: Bland's rule throughout.
    """
    a_eq = np.atleast_2d(np.asarray(a_eq, dtype=float))
    b_eq = np.asarray(b_eq, dtype=float).ravel()
    if a_eq.size == 0:
        a_eq = a_eq.reshape(0, _infer_n(a_eq, a_ge))
    n = a_eq.shape[1]
    if a_ge is None:
        a_ge = np.zeros((0, n))
        b_ge = np.zeros(0)
    a_ge = np.atleast_2d(np.asarray(a_ge, dtype=float))
    if a_ge.size == 0:
        a_ge = a_ge.reshape(0, n)
    b_ge = np.asarray(b_ge, dtype=float).ravel()

    me, mg = a_eq.shape[0], a_ge.shape[0]
    m = me + mg
    if m == 0:
        return True, np.zeros(n)

    # x = u - v with u, v >= 0; surplus s >= 0 turns a_ge x >= b_ge into
    # a_ge x - s = b_ge.
    block = np.vstack([a_eq, a_ge])
    mat = np.hstack([block, -block, np.zeros((m, mg))])
    mat[me:, 2 * n:] = -np.eye(mg)
    rhs = np.concatenate([b_eq, b_ge])

    flip = rhs < 0
    mat[flip] *= -1.0
    rhs = np.abs(rhs)

    x_full = _phase1(mat, rhs, tol)
    if x_full is None:
        return False, None
    return True, x_full[:n] - x_full[n : 2 * n]


def _infer_n(a_eq, a_ge) -> int:
    if a_ge is not None:
        return np.atleast_2d(np.asarray(a_ge)).shape[1]
    return np.atleast_2d(np.asarray(a_eq)).shape[1]


def _phase1(mat, rhs, tol):
    """Minimize the sum of artificials for mat @ x = rhs, x >= 0, rhs >= 0.

    Returns the feasible x (without artificial components) or None.
    """
    m, n = mat.shape
    tab = np.hstack([mat, np.eye(m), rhs[:, None]])
    cost = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))

    max_pivots = 50 * (n + m + 1)
    for _ in range(max_pivots):
        red = cost - cost[basis] @ tab[:, :-1]
        entering = -1
        for j in range(n + m):
            if red[j] < -tol:
                entering = j
                break
        if entering < 0:
            break
        col = tab[:, entering]
        rows = np.where(col > tol)[0]
        if rows.size == 0:
            break  # unbounded direction cannot happen in phase 1
        ratios = tab[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol]
        leaving = min(ties, key=lambda i: basis[i])
        piv = tab[leaving, entering]
        tab[leaving] /= piv
        for i in range(m):
            if i != leaving and abs(tab[i, entering]) > 0:
                tab[i] -= tab[i, entering] * tab[leaving]
        basis[leaving] = entering
    else:  # pragma: no cover - pivot cap; desk-scale problems never hit it
        raise RuntimeError("simplex pivot limit exceeded")

    value = sum(tab[i, -1] for i in range(m) if basis[i] >= n)
    if value > 1e-7:
        return None
    x = np.zeros(n)
    for i, j in enumerate(basis):
        if j < n:
            x[j] = tab[i, -1]
    return x
