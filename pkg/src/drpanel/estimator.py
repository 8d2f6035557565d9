"""Sample-level doubly robust weights via an asymmetric-loss dual program.

The primal program picks minimum-norm weights subject to two-way zero-sum
constraints, balance of a basis dictionary, and non-negativity on treated
cells. Its dual concentrates into an unconstrained convex fit of
(lambda_t, lambda_i, gamma) under the loss rho, from which the weights are
read off the residuals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from drpanel import lp
from drpanel.panel import BasisSpec, PanelDataset, ValidationError, WeightTable
from drpanel.stats import SufficientStatistic


class NoOverlapError(RuntimeError):
    """Treated and control cells are separable by an additive score."""


class ConvergenceError(RuntimeError):
    """The dual fit failed to reach the configured tolerances."""


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and options for the dual fit.

    File format: plain text, one ``key = value`` per line, ``#`` comments.
    """

    tol_obj: float = 1e-12
    tol_grad: float = 1e-8
    max_iter: int = 10000
    min_normalizer: float = 1e-8
    basis: str = "stratum-by-period"
    check_overlap: bool = False

    @classmethod
    def from_file(cls, path) -> "SolverConfig":
        kwargs = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"bad config line {lineno}: {raw.strip()!r}")
                key, val = (part.strip() for part in line.split("=", 1))
                if key in ("tol_obj", "tol_grad", "min_normalizer"):
                    kwargs[key] = float(val)
                elif key == "max_iter":
                    kwargs[key] = int(val)
                elif key == "check_overlap":
                    kwargs[key] = val.lower() in ("1", "true", "yes")
                elif key == "basis":
                    kwargs[key] = val
                else:
                    raise ValidationError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"tol_obj = {self.tol_obj!r}\n")
            fh.write(f"tol_grad = {self.tol_grad!r}\n")
            fh.write(f"max_iter = {self.max_iter}\n")
            fh.write(f"min_normalizer = {self.min_normalizer!r}\n")
            fh.write(f"basis = {self.basis}\n")
            fh.write(f"check_overlap = {str(self.check_overlap).lower()}\n")


@dataclass(frozen=True)
class DualSolution:
    """Fitted dual parameters plus diagnostics.

    lambda_t[0] is pinned to 0 to resolve the location ambiguity between
    period and unit effects.
    """

    lambda_t: np.ndarray
    lambda_i: np.ndarray
    gamma: np.ndarray
    objective: float
    iterations: int
    grad_norm: float
    psi: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class EstimateResult:
    """Point estimate with the normalized sample weight table."""

    tau_hat: float
    weights: WeightTable
    normalizer: float
    diagnostics: DualSolution


def rho(x, z):
    """Asymmetric loss: x^2 on control cells, squared positive part on treated."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    val = x * x * (1.0 - z) + np.square(np.maximum(x, 0.0)) * z
    return float(val) if val.ndim == 0 else val


def _drho(x, z):
    return 2.0 * x * (1.0 - z) + 2.0 * np.maximum(x, 0.0) * z


def _d2rho(x, z):
    # One-sided second derivative at the treated kink (x = 0 takes the flat side).
    return 2.0 * (1.0 - z) + 2.0 * z * (x > 0.0)


def unit_intercept(h, w) -> float:
    """Minimize sum_t rho_{w_t}(h_t - a) over a by the pooling recursion.

    Starts from the mean of h over control periods and absorbs treated
    values in decreasing order while they sit above the running pooled
    mean. An all-treated unit has a flat minimum on [max h, inf); the
    smallest minimizer max_t h_t is returned so that every treated
    residual's positive part vanishes.
    """
    h = np.asarray(h, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if h.size == 0 or h.size != w.size:
        raise ValidationError("h and w must be equal-length nonempty vectors")
    ctrl = h[w == 0]
    treated = h[w == 1]
    if ctrl.size == 0:
        return float(treated.max())
    total = float(ctrl.sum())
    count = ctrl.size
    for hv in sorted(treated.tolist(), reverse=True):
        if hv >= total / count:
            total += hv
            count += 1
        else:
            break
    return total / count


def unit_intercepts(h, w):
    """Vectorized unit_intercept over the last axis of stacked arrays.

    Accepts (..., T) arrays and returns (...) intercepts. Equivalent to the
    scalar recursion: the minimizer is the largest prefix-pooled mean
    max_j (sum ctrl + sum of top-j treated) / (n_ctrl + j), where j = 0 is
    allowed only when control periods exist.
    """
    h = np.asarray(h, dtype=float)
    w = np.asarray(w, dtype=float)
    t_len = h.shape[-1]
    ctrl_sum = np.sum(h * (1.0 - w), axis=-1)
    ctrl_cnt = np.sum(1.0 - w, axis=-1)
    masked = np.where(w == 1.0, h, -np.inf)
    top = -np.sort(-masked, axis=-1)  # treated values, descending
    finite = np.isfinite(top)
    cums = np.cumsum(np.where(finite, top, 0.0), axis=-1)
    j = np.arange(1, t_len + 1, dtype=float)
    means = (ctrl_sum[..., None] + cums) / (ctrl_cnt[..., None] + j)
    means = np.where(finite, means, -np.inf)
    base = np.where(ctrl_cnt > 0, ctrl_sum / np.maximum(ctrl_cnt, 1.0), -np.inf)
    return np.maximum(base, means.max(axis=-1))


def make_basis(name: str, data: Optional[PanelDataset] = None,
               stat: Optional[SufficientStatistic] = None) -> BasisSpec:
    """Construct a named basis preset.

    Presets: 'empty'; 'stratum-by-period' (indicator of each statistic
    stratum crossed with each period; requires stat built on the dataset's
    treatment paths); 'covariate-linear' (each covariate crossed with each
    period); 'custom:<file>' (CSV ``unit,time,b1..bp`` of per-cell values,
    units in the dataset's sorted order).
    """
    if name == "empty":
        return BasisSpec(name="empty")
    if name == "stratum-by-period":
        if data is None or stat is None:
            raise ValidationError("stratum-by-period basis needs data and stat")
        values = stat.stratum_values()
        t_len = data.n_periods

        def indicator(x, s, t, _values=tuple(values), _t_len=t_len):
            out = np.zeros(len(_values) * _t_len)
            for si, sv in enumerate(_values):
                if s == sv:
                    out[si * _t_len + t] = 1.0
            return out

        return BasisSpec(psi1=(indicator,), name="stratum-by-period")
    if name == "covariate-linear":
        if data is None or data.covariates is None:
            raise ValidationError("covariate-linear basis needs covariates")
        p_x = data.covariates.shape[1]
        t_len = data.n_periods

        def covlin(x, t, _p=p_x, _t_len=t_len):
            out = np.zeros(_p * _t_len)
            out[np.arange(_p) * _t_len + t] = np.asarray(x, dtype=float)
            return out

        return BasisSpec(psi0=(covlin,), name="covariate-linear")
    if name.startswith("custom:"):
        if data is None:
            raise ValidationError("custom basis needs the dataset")
        return _load_custom_basis(name[len("custom:"):], data)
    raise ValidationError(f"unknown basis {name!r}")


def _load_custom_basis(path, data: PanelDataset) -> BasisSpec:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in (reader.fieldnames or []) if c not in ("unit", "time")]
        if reader.fieldnames is None or "unit" not in reader.fieldnames or "time" not in reader.fieldnames:
            raise ValidationError("custom basis file needs unit,time,b... columns")
        rows = {}
        for rec in reader:
            rows[(rec["unit"], int(rec["time"]))] = [float(rec[c]) for c in cols]
    times = sorted({t for _, t in rows})
    table = np.empty((data.n_units, data.n_periods, len(cols)))
    for i, unit in enumerate(data.unit_ids):
        for j, t in enumerate(times):
            key = (str(unit), t)
            if key not in rows:
                raise ValidationError(f"custom basis missing cell unit {unit}, time {t}")
            table[i, j] = rows[key]
    return BasisSpec(name="custom", table=table)


def basis_matrix(data: PanelDataset, basis: BasisSpec,
                 stat: Optional[SufficientStatistic] = None) -> np.ndarray:
    """Evaluate the basis as an N x T x p array, fast paths for presets."""
    if basis.table is not None:
        table = np.asarray(basis.table, dtype=float)
        if table.shape[:2] != (data.n_units, data.n_periods):
            raise ValidationError("basis table shape does not match the panel")
        return table
    if basis.name == "stratum-by-period" and stat is not None:
        labels = stat.labels()
        if labels.size != data.n_units:
            raise ValidationError("statistic must be built on the dataset's paths")
        n, t_len, s_len = data.n_units, data.n_periods, stat.n_strata
        out = np.zeros((n, t_len, s_len * t_len))
        rows = np.arange(n)[:, None]
        cols = np.arange(t_len)[None, :]
        out[rows, cols, labels[:, None] * t_len + cols] = 1.0
        return out
    if basis.name == "covariate-linear" and data.covariates is not None:
        n, t_len = data.n_units, data.n_periods
        p_x = data.covariates.shape[1]
        out = np.zeros((n, t_len, p_x * t_len))
        rows = np.arange(n)[:, None, None]
        cols = np.arange(t_len)[None, :, None]
        feat = np.arange(p_x)[None, None, :] * t_len + cols
        out[rows, cols, feat] = data.covariates[:, None, :]
        return out
    return basis.evaluate(data, None if stat is None else list(stat.values))


def _loss_parts(w, psi, lambda_t, lambda_i, gamma, m=None):
    resid = w - lambda_t[None, :] - lambda_i[:, None]
    if psi.shape[2]:
        resid = resid - psi @ gamma
    cells = rho(resid, w)
    if m is not None:
        cells = cells * m[:, None]
    n, t_len = w.shape
    return resid, float(cells.sum() / (n * t_len))


def concentrated_loss(w, psi, theta, m=None):
    """Concentrated dual objective at theta = (lambda_2..lambda_T, gamma)."""
    n, t_len = w.shape
    lambda_t = np.concatenate([[0.0], theta[: t_len - 1]])
    gamma = theta[t_len - 1 :]
    h = w - lambda_t[None, :]
    if psi.shape[2]:
        h = h - psi @ gamma
    alpha = unit_intercepts(h, w)
    _, val = _loss_parts(w, psi, lambda_t, alpha, gamma, m)
    return val


def concentrated_grad(w, psi, theta, m=None):
    """Analytic gradient of the concentrated objective (envelope theorem)."""
    n, t_len = w.shape
    lambda_t = np.concatenate([[0.0], theta[: t_len - 1]])
    gamma = theta[t_len - 1 :]
    h = w - lambda_t[None, :]
    if psi.shape[2]:
        h = h - psi @ gamma
    alpha = unit_intercepts(h, w)
    resid = h - alpha[:, None]
    dr = _drho(resid, w)
    if m is not None:
        dr = dr * m[:, None]
    scale = 1.0 / (n * t_len)
    g_lam = -scale * dr.sum(axis=0)[1:]
    g_gam = -scale * np.einsum("nt,ntp->p", dr, psi) if psi.shape[2] else np.zeros(0)
    return np.concatenate([g_lam, g_gam])


def fit_dual(
    data: PanelDataset,
    basis: BasisSpec,
    stat: Optional[SufficientStatistic] = None,
    config: Optional[SolverConfig] = None,
    unit_weights=None,
) -> DualSolution:
    """Minimize the concentrated dual loss by block-coordinate descent.

    Each cycle updates the unit effects exactly through the pooling
    recursion, then takes one damped Newton step (Levenberg shift 1e-8,
    Armijo backtracking) jointly on the period effects and basis
    coefficients. lambda_t[0] is pinned to 0. ``unit_weights``
    multiplies each unit's loss contribution (bootstrap multiplicities);
    units at weight zero still receive pooled intercepts.
    """
    config = config or SolverConfig()
    w = data.treatments
    n, t_len = w.shape
    psi = basis_matrix(data, basis, stat)
    if not np.all(np.isfinite(psi)):
        raise ValidationError("basis produced non-finite values")
    p = psi.shape[2]
    m = None
    if unit_weights is not None:
        m = np.asarray(unit_weights, dtype=float).ravel()
        if m.size != n or np.any(m < 0):
            raise ValidationError("unit_weights must be nonnegative, one per unit")

    if config.check_overlap:
        ok, _ = check_overlap(data, basis, stat)
        if not ok:
            raise NoOverlapError(
                "an additive score separates treated from control cells;"
                " balancing weights do not exist"
            )

    lambda_t = np.zeros(t_len)
    gamma = np.zeros(p)
    alpha = np.zeros(n)
    scale = 1.0 / (n * t_len)
    delta = 1e-8

    def objective(lt, al, gm):
        _, val = _loss_parts(w, psi, lt, al, gm, m)
        return val

    prev = math.inf
    grad_norm = math.inf
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        h = w - lambda_t[None, :]
        if p:
            h = h - psi @ gamma
        alpha = unit_intercepts(h, w)
        resid = h - alpha[:, None]
        dr = _drho(resid, w)
        if m is not None:
            dr = dr * m[:, None]
        current = objective(lambda_t, alpha, gamma)
        if current > prev + 1e-12 * (1.0 + abs(prev)):
            raise ConvergenceError("objective increased across an iteration")
        g_lam = -scale * dr.sum(axis=0)[1:]
        g_gam = -scale * np.einsum("nt,ntp->p", dr, psi) if p else np.zeros(0)
        grad = np.concatenate([g_lam, g_gam])
        grad_norm = float(np.linalg.norm(grad))
        if prev - current <= config.tol_obj * (1.0 + abs(current)) and grad_norm <= config.tol_grad:
            prev = current
            break
        prev = current

        d2 = _d2rho(resid, w)
        if m is not None:
            d2 = d2 * m[:, None]
        dim = (t_len - 1) + p
        hess = np.zeros((dim, dim))
        per_t = scale * d2.sum(axis=0)
        hess[: t_len - 1, : t_len - 1] = np.diag(per_t[1:])
        if p:
            cross = scale * np.einsum("nt,ntp->tp", d2, psi)
            hess[: t_len - 1, t_len - 1 :] = cross[1:]
            hess[t_len - 1 :, : t_len - 1] = cross[1:].T
            hess[t_len - 1 :, t_len - 1 :] = scale * np.einsum(
                "nt,ntp,ntq->pq", d2, psi, psi
            )
        step = np.linalg.solve(hess + delta * np.eye(dim), -grad)
        slope = float(grad @ step)
        eta = 1.0
        for _ in range(60):
            lt_new = lambda_t.copy()
            lt_new[1:] += eta * step[: t_len - 1]
            gm_new = gamma + eta * step[t_len - 1 :]
            if objective(lt_new, alpha, gm_new) <= current + 1e-4 * eta * slope:
                lambda_t, gamma = lt_new, gm_new
                break
            eta *= 0.5
        else:
            # Step direction exhausted at this alpha; parameters stay put and
            # the convergence test above decides on the next cycle.
            pass
    else:
        raise ConvergenceError(
            f"no convergence in {config.max_iter} iterations;"
            f" gradient norm {grad_norm:.3e}"
        )

    return DualSolution(
        lambda_t=lambda_t,
        lambda_i=alpha,
        gamma=gamma,
        objective=prev,
        iterations=iterations,
        grad_norm=grad_norm,
        psi=psi,
    )


def extract_weights(
    data: PanelDataset,
    basis: BasisSpec,
    sol: DualSolution,
    stat: Optional[SufficientStatistic] = None,
    config: Optional[SolverConfig] = None,
    unit_weights=None,
) -> EstimateResult:
    """Turn dual residuals into normalized weights and the point estimate.

    The unnormalized weight is the residual on control cells and its
    positive part on treated cells; the normalizer is the treated mean of
    unnormalized weights. ``unit_weights`` (bootstrap multiplicities)
    weight both the normalizer and the estimate.
    """
    config = config or SolverConfig()
    w = data.treatments
    n, t_len = w.shape
    psi = sol.psi if sol.psi is not None else basis_matrix(data, basis, stat)
    resid = w - sol.lambda_t[None, :] - sol.lambda_i[:, None]
    if psi.shape[2]:
        resid = resid - psi @ sol.gamma
    omega_un = resid * (1.0 - w) + np.maximum(resid, 0.0) * w
    m = np.ones(n) if unit_weights is None else np.asarray(unit_weights, dtype=float).ravel()
    normalizer = float((m[:, None] * omega_un * w).sum() / (n * t_len))
    if normalizer <= config.min_normalizer:
        raise NoOverlapError(
            "no effective overlap: the treated mean of unnormalized weights is"
            f" {normalizer:.3e}; an additive score (nearly) separates treated"
            " from control cells, under which balancing weights do not exist"
        )
    omega = omega_un / normalizer
    tau_hat = float((m[:, None] * omega * data.outcomes).sum() / (n * t_len))
    return EstimateResult(
        tau_hat=tau_hat,
        weights=WeightTable(weights=omega, level="sample"),
        normalizer=normalizer,
        diagnostics=sol,
    )


def estimate(
    data: PanelDataset,
    basis: BasisSpec,
    stat: Optional[SufficientStatistic] = None,
    config: Optional[SolverConfig] = None,
) -> EstimateResult:
    """Fit the dual program and extract weights in one call."""
    sol = fit_dual(data, basis, stat, config)
    return extract_weights(data, basis, sol, stat, config)


def check_overlap(data: PanelDataset, basis: BasisSpec,
                  stat: Optional[SufficientStatistic] = None):
    """Search for an additive score separating treated from control cells.

    Returns ``(weights_exist, certificate)``. A certificate is a dict with
    keys lambda_i, mu_t, gamma satisfying score = 0 on every control cell
    and score >= 1 on every treated cell; it exists exactly when the
    balancing weights do not.
    """
    psi = basis_matrix(data, basis, stat)
    return _overlap_certificate(data.treatments, psi)


def _overlap_certificate(w, psi):
    w = np.asarray(w, dtype=float)
    n, t_len = w.shape
    p = psi.shape[2]
    if n * t_len > 4000:
        raise ValidationError(
            "overlap certificate search is limited to 4000 cells; rely on the"
            " normalizer diagnostic for larger panels"
        )
    nvar = n + t_len + p
    rows_eq, rows_ge = [], []
    for i in range(n):
        for t in range(t_len):
            row = np.zeros(nvar)
            row[i] = 1.0
            row[n + t] = 1.0
            if p:
                row[n + t_len :] = psi[i, t]
            (rows_ge if w[i, t] == 1.0 else rows_eq).append(row)
    a_eq = np.asarray(rows_eq) if rows_eq else np.zeros((0, nvar))
    a_ge = np.asarray(rows_ge) if rows_ge else np.zeros((0, nvar))
    feasible, x = lp.feasible_point(
        a_eq, np.zeros(a_eq.shape[0]), a_ge, np.ones(a_ge.shape[0])
    )
    if not feasible:
        return True, None
    return False, {
        "lambda_i": x[:n],
        "mu_t": x[n : n + t_len],
        "gamma": x[n + t_len :],
    }
