"""Dense active-set solver for convex quadratic programs.

Minimizes 1/2 x'diag(q)x + c'x subject to equality and >= inequality
constraints. The diagonal Hessian covers every program in this package
(weighted squared norms); constraint matrices may contain redundant rows,
which the KKT solves absorb via least squares.
"""

from __future__ import annotations

import numpy as np

from drpanel import lp


class QpError(RuntimeError):
    pass


class InfeasibleError(QpError):
    """No point satisfies the constraints."""


def solve_qp(
    q_diag,
    c=None,
    a_eq=None,
    b_eq=None,
    a_ge=None,
    b_ge=None,
    tol: float = 1e-10,
    max_iter: int = 2000,
):
    """Solve the QP and return ``(x, info)``.

    info carries ``iterations``, ``kkt_residual``, and the final working
    set. Raises InfeasibleError when no feasible point exists and QpError
    on iteration-limit failures.
    """
    q = np.asarray(q_diag, dtype=float).ravel()
    n = q.size
    if np.any(q <= 0):
        raise ValueError("Hessian diagonal must be positive")
    cvec = np.zeros(n) if c is None else np.asarray(c, dtype=float).ravel()
    a_eq, b_eq = _as_rows(a_eq, b_eq, n)
    a_ge, b_ge = _as_rows(a_ge, b_ge, n)

    ok, x = lp.feasible_point(a_eq, b_eq, a_ge, b_ge)
    if not ok:
        raise InfeasibleError("constraint system infeasible")
    x = _restore(x, a_eq, b_eq)

    me, mg = a_eq.shape[0], a_ge.shape[0]
    working = [i for i in range(mg) if a_ge[i] @ x - b_ge[i] <= tol * 10]

    iterations = 0
    mu_ge = np.zeros(mg)
    for iterations in range(1, max_iter + 1):
        a_w = np.vstack([a_eq, a_ge[working]]) if me + len(working) else np.zeros((0, n))
        d, mu = _kkt_step(q, cvec, x, a_w)
        # the KKT solve leaves noise proportional to the iterate scale, so
        # the zero-step test must be relative or the loop never terminates
        scale = max(1.0, float(np.max(np.abs(x), initial=0.0)))
        if np.max(np.abs(d), initial=0.0) <= tol * scale:
            mu_ge[:] = 0.0
            mu_ge[working] = mu[me:]
            if len(working) == 0:
                break
            # dropping the lowest constraint index among the negative
            # multipliers (Bland's rule) rules out cycling at degenerate
            # vertices
            eligible = [j for j in range(len(working)) if mu[me + j] < -tol * 10]
            if not eligible:
                break
            working.pop(min(eligible, key=lambda j: working[j]))
            continue
        alpha = 1.0
        blocker = -1
        for i in range(mg):
            if i in working:
                continue
            adot = a_ge[i] @ d
            if adot < -tol:
                step = (a_ge[i] @ x - b_ge[i]) / (-adot)
                if step < alpha - 1e-15:
                    alpha, blocker = step, i
        x = x + max(alpha, 0.0) * d
        if blocker >= 0:
            working.append(blocker)
            working.sort()
    else:
        raise QpError("active-set iteration limit exceeded")

    info = {
        "iterations": iterations,
        "working_set": list(working),
        "kkt_residual": _kkt_residual(q, cvec, x, a_eq, b_eq, a_ge, b_ge, mu_ge),
    }
    return x, info


def _as_rows(a, b, n):
    if a is None:
        return np.zeros((0, n)), np.zeros(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        a = a.reshape(0, n)
    return a, np.asarray(b, dtype=float).ravel()


def _restore(x, a_eq, b_eq):
    # Vertices from the phase-1 simplex satisfy equalities to simplex
    # tolerance only; one least-squares projection tightens them.
    if a_eq.shape[0] == 0:
        return x
    resid = a_eq @ x - b_eq
    if np.max(np.abs(resid), initial=0.0) < 1e-12:
        return x
    corr, *_ = np.linalg.lstsq(a_eq, resid, rcond=None)
    return x - corr


def _kkt_step(q, c, x, a_w):
    """Equality-constrained step: min over d of the model at x + d.

    Returns (d, lam) with Q(x+d) + c = a_w' lam and a_w d = 0, so active
    >= constraints are optimal exactly when their lam component is >= 0.
    """
    n = q.size
    mw = a_w.shape[0]
    grad = q * x + c
    if mw == 0:
        return -grad / q, np.zeros(0)
    kkt = np.zeros((n + mw, n + mw))
    kkt[:n, :n] = np.diag(q)
    kkt[:n, n:] = -a_w.T
    kkt[n:, :n] = a_w
    rhs = np.concatenate([-grad, np.zeros(mw)])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:n], sol[n:]


def _kkt_residual(q, c, x, a_eq, b_eq, a_ge, b_ge, mu_ge):
    """Max-norm KKT residual of (x, mu) for diagnostics."""
    me = a_eq.shape[0]
    a_all = np.vstack([a_eq, a_ge]) if me + a_ge.shape[0] else np.zeros((0, q.size))
    if a_all.shape[0] == 0:
        return float(np.max(np.abs(q * x + c), initial=0.0))
    mu_eq = np.zeros(me)
    if me:
        resid0 = q * x + c - a_ge.T @ mu_ge if a_ge.shape[0] else q * x + c
        mu_eq, *_ = np.linalg.lstsq(a_eq.T, resid0, rcond=None)
    mu = np.concatenate([mu_eq, mu_ge])
    stat = np.max(np.abs(q * x + c - a_all.T @ mu), initial=0.0)
    prim_eq = np.max(np.abs(a_eq @ x - b_eq), initial=0.0) if me else 0.0
    slack = a_ge @ x - b_ge if a_ge.shape[0] else np.zeros(0)
    prim_ge = float(np.max(-slack, initial=0.0))
    comp = float(np.max(np.abs(mu_ge * slack), initial=0.0))
    return float(max(stat, prim_eq, prim_ge, comp))
