"""Unit-level bootstrap variance and confidence intervals.

Resamples whole units with replacement, refits the dual program with the
resulting multiplicities weighting each unit's loss, and reads the
variance off the replicate spread. Units drawn zero times still receive
pooled intercepts at the replicate's other parameters, which only affects
bookkeeping, never the replicate estimate.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional

import numpy as np

from drpanel import _pooled
from drpanel.estimator import (
    ConvergenceError,
    NoOverlapError,
    SolverConfig,
    basis_matrix,
    extract_weights,
    fit_dual,
)
from drpanel.panel import BasisSpec, PanelDataset, ValidationError
from drpanel.stats import SufficientStatistic


class UnstableBootstrapError(RuntimeError):
    """Too many replicates lost overlap after resampling."""


@dataclass(frozen=True)
class BootstrapResult:
    """Replicate estimates and the N-scaled variance they imply.

    sigma2_hat = (n_units / B) * sum_b (tau_b - tau_hat)^2 over the
    successful replicates; ci is tau_hat +/- z * sqrt(sigma2_hat / n_units).
    """

    tau_hat: float
    sigma2_hat: float
    replicates: np.ndarray
    ci_level: float
    ci: tuple
    seed: int
    n_units: int
    n_failed: int = 0

    def __post_init__(self):
        reps = np.asarray(self.replicates, dtype=float)
        if reps.size < 2:
            raise ValidationError("bootstrap needs at least 2 successful replicates")
        reps.setflags(write=False)
        object.__setattr__(self, "replicates", reps)


def _multiplicities(seed: int, b: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, b])
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)


def thread_count() -> int:
    raw = os.environ.get("DRPANEL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def bootstrap(
    data: PanelDataset,
    basis: BasisSpec,
    stat: Optional[SufficientStatistic] = None,
    config: Optional[SolverConfig] = None,
    b_reps: int = 400,
    seed: int = 0,
    ci_level: float = 0.95,
) -> BootstrapResult:
    """Unit-level bootstrap of the weighting estimator.

    Replicate b resamples multiplicities from a generator keyed on
    (seed, b), so any execution order or worker count reproduces the same
    result. Replicates whose resample loses overlap (or fails to converge)
    are dropped and counted; more than 10% dropped raises
    UnstableBootstrapError.
    """
    config = config or SolverConfig()
    if b_reps < 2:
        raise ValidationError("b_reps must be at least 2")
    if not 0.0 < ci_level < 1.0:
        raise ValidationError("ci_level must be inside (0, 1)")
    n = data.n_units

    base_sol = fit_dual(data, basis, stat, config)
    base = extract_weights(data, basis, base_sol, stat, config)
    tau_hat = base.tau_hat

    mult = np.vstack([_multiplicities(seed, b, n) for b in range(1, b_reps + 1)])

    if basis.name == "stratum-by-period" and basis.table is None and stat is not None:
        taus, ok = _replicates_pooled(data, stat, config, mult)
    else:
        taus, ok = _replicates_dense(data, basis, stat, config, mult)

    n_failed = int((~ok).sum())
    if n_failed > 0.1 * b_reps:
        raise UnstableBootstrapError(
            f"{n_failed} of {b_reps} bootstrap replicates failed (lost overlap"
            " after resampling); consider a larger panel or a coarser basis"
        )
    reps = taus[ok]
    b_eff = reps.size
    sigma2 = float(n / b_eff * np.sum((reps - tau_hat) ** 2))
    z = NormalDist().inv_cdf(0.5 + ci_level / 2.0)
    half = z * (sigma2 / n) ** 0.5
    return BootstrapResult(
        tau_hat=tau_hat,
        sigma2_hat=sigma2,
        replicates=reps,
        ci_level=ci_level,
        ci=(tau_hat - half, tau_hat + half),
        seed=seed,
        n_units=n,
        n_failed=n_failed,
    )


def _replicates_pooled(data, stat, config, mult):
    labels = stat.labels()
    fit = _pooled.fit_pooled(
        data.treatments,
        labels,
        stat.n_strata,
        m=mult,
        tol_obj=config.tol_obj,
        tol_grad=config.tol_grad,
        max_iter=config.max_iter,
    )
    omega_un, normalizer = _pooled.pooled_weights(data.treatments, labels, fit, m=mult)
    ok = fit["converged"] & (normalizer > config.min_normalizer)
    n, t_len = data.treatments.shape
    safe = np.where(normalizer > config.min_normalizer, normalizer, 1.0)
    taus = (mult[:, :, None] * omega_un * data.outcomes[None]).sum(axis=(1, 2)) / (
        n * t_len * safe
    )
    return taus, ok


def _replicates_dense(data, basis, stat, config, mult):
    b_reps = mult.shape[0]
    taus = np.zeros(b_reps)
    ok = np.zeros(b_reps, dtype=bool)
    psi = basis_matrix(data, basis, stat)
    cached = BasisSpec(name=basis.name if basis.table is None else "custom", table=psi)

    def one(b):
        try:
            sol = fit_dual(data, cached, stat, config, unit_weights=mult[b])
            est = extract_weights(
                data, cached, sol, stat, config, unit_weights=mult[b]
            )
        except (NoOverlapError, ConvergenceError):
            return b, np.nan, False
        return b, est.tau_hat, True

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(b_reps)))
    else:
        results = [one(b) for b in range(b_reps)]
    for b, tau, good in results:
        taus[b] = tau
        ok[b] = good
    return taus, ok


def write_bootstrap_csv(result: BootstrapResult, path) -> None:
    """Summary block as comments, then one replicate estimate per row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# tau_hat = {result.tau_hat!r}\n")
        fh.write(f"# sigma2_hat = {result.sigma2_hat!r}\n")
        fh.write(f"# ci_level = {result.ci_level!r}\n")
        fh.write(f"# ci = ({result.ci[0]!r}, {result.ci[1]!r})\n")
        fh.write(f"# n_failed = {result.n_failed}\n")
        fh.write(f"# seed = {result.seed}\n")
        fh.write("b,tau_b\n")
        for b, value in enumerate(result.replicates, start=1):
            fh.write(f"{b},{float(value)!r}\n")
