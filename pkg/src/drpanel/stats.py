"""Sufficient statistics of treatment paths and assignment simulators.

Statistic values are held as exact rationals so that strata are crisp
partitions: two rows share a stratum iff their statistic tuples are equal
exactly, never merely within a floating tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from drpanel.panel import ValidationError


@dataclass(frozen=True)
class SufficientStatistic:
    """Per-row statistic values and the induced partition into strata.

    Args:
      values: tuple of per-row statistic tuples (exact rationals).
      strata: tuple of index tuples partitioning the input rows; one
        stratum per distinct statistic value, ordered by value.
      kind: one of 'static_logit', 'markov', 'exponential_family', 'mean'.
    """

    values: tuple
    strata: tuple
    kind: str

    def __post_init__(self):
        seen = sorted(i for group in self.strata for i in group)
        if seen != list(range(len(self.values))):
            raise ValidationError("strata must partition the row indices")
        for group in self.strata:
            vals = {self.values[i] for i in group}
            if len(vals) != 1:
                raise ValidationError("stratum mixes distinct statistic values")

    @property
    def n_strata(self) -> int:
        return len(self.strata)

    def labels(self) -> np.ndarray:
        """Stratum index of each input row."""
        out = np.empty(len(self.values), dtype=int)
        for s, group in enumerate(self.strata):
            for i in group:
                out[i] = s
        return out

    def stratum_values(self) -> list:
        """Representative statistic value per stratum, in stratum order."""
        return [self.values[group[0]] for group in self.strata]


def _group(values: Sequence[tuple], kind: str) -> SufficientStatistic:
    order = {}
    for i, v in enumerate(values):
        order.setdefault(v, []).append(i)
    strata = tuple(tuple(order[v]) for v in sorted(order))
    return SufficientStatistic(values=tuple(values), strata=strata, kind=kind)


def _check_binary(paths) -> np.ndarray:
    w = np.asarray(paths, dtype=float)
    if w.ndim != 2:
        raise ValidationError("paths must be a 2-D binary matrix")
    if np.any((w != 0) & (w != 1)):
        raise ValidationError("paths must be binary")
    return w.astype(int)


def stat_static_logit(paths, schedule) -> SufficientStatistic:
    """S = (1/T) sum_t psi(t) W_t for a per-period schedule psi.

    The sum is evaluated in exact rational arithmetic on the schedule
    values, so equal statistics group together regardless of float
    summation order.
    """
    w = _check_binary(paths)
    t_len = w.shape[1]
    sched = [Fraction(float(v)) for v in np.asarray(schedule, dtype=float).ravel()]
    if len(sched) != t_len:
        raise ValidationError("schedule length must equal the number of periods")
    values = []
    for row in w:
        s = sum((sched[t] for t in range(t_len) if row[t]), Fraction(0)) / t_len
        values.append((s,))
    return _group(values, "static_logit")


def stat_mean(paths) -> SufficientStatistic:
    """S = mean treatment exposure, the W-bar statistic."""
    w = _check_binary(paths)
    t_len = w.shape[1]
    values = [(Fraction(int(row.sum()), t_len),) for row in w]
    return _group(values, "mean")


def stat_markov(paths) -> SufficientStatistic:
    """Time-homogeneous Markov statistic.

    S = (sum_{t=2..T-1} W_t, sum_{t=2..T} W_t W_{t-1}, W_1, W_T); for
    T = 2 the interior sum is empty and contributes 0.
    """
    w = _check_binary(paths)
    t_len = w.shape[1]
    if t_len < 2:
        raise ValidationError("markov statistic requires T >= 2")
    values = []
    for row in w:
        interior = int(row[1 : t_len - 1].sum())
        trans = int((row[1:] * row[:-1]).sum())
        values.append(
            (Fraction(interior), Fraction(trans), Fraction(int(row[0])), Fraction(int(row[-1])))
        )
    return _group(values, "markov")


def stat_exponential_family(paths, s_fn: dict) -> SufficientStatistic:
    """Strata from a user dictionary mapping path tuple -> statistic vector."""
    w = _check_binary(paths)
    values = []
    for row in w:
        key = tuple(int(v) for v in row)
        if key not in s_fn:
            raise ValidationError(f"s_fn missing path {key}")
        vec = np.atleast_1d(np.asarray(s_fn[key], dtype=float))
        values.append(tuple(Fraction(float(v)) for v in vec))
    return _group(values, "exponential_family")


def stat_by_name(name: str, paths, schedule=None) -> SufficientStatistic:
    """Construct a statistic from its CLI name."""
    if name == "mean":
        return stat_mean(paths)
    if name == "markov":
        return stat_markov(paths)
    if name == "static-logit":
        w = np.asarray(paths)
        sched = np.ones(w.shape[1]) if schedule is None else schedule
        return stat_static_logit(paths, sched)
    raise ValidationError(f"unknown statistic {name!r}; use mean, markov, or static-logit")


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def simulate_static_logit(
    n: int,
    t_len: int,
    u_dist: Callable,
    alpha: Callable,
    lam,
    schedule=None,
    seed: Optional[int] = None,
):
    """Draw treatment paths from the static logistic assignment model.

    P(W_it = 1 | U_i) = sigmoid(alpha(U_i) * psi(t) + lambda_t), with
    cells independent across t given U_i.

    Args:
      n: number of units.
      t_len: number of periods.
      u_dist: callable (rng, n) -> latent draw per unit.
      alpha: callable U -> per-unit coefficient on the schedule.
      lam: per-period intercepts, length t_len.
      schedule: per-period psi values (default all ones).
      seed: RNG seed; fixed seed gives bit-identical output.

    Returns:
      (treatments, latents): binary n x t_len matrix and the latent U.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = np.asarray(u_dist(rng, n))
    a = np.asarray(alpha(u), dtype=float).reshape(n, 1)
    lam = np.asarray(lam, dtype=float).reshape(1, t_len)
    psi = np.ones((1, t_len)) if schedule is None else np.asarray(
        schedule, dtype=float
    ).reshape(1, t_len)
    prob = _sigmoid(a * psi + lam)
    w = (rng.random((n, t_len)) < prob).astype(float)
    return w, u


def simulate_markov(
    n: int,
    t_len: int,
    u_dist: Callable,
    alpha: Callable,
    gamma: Callable,
    init: Optional[Callable] = None,
    seed: Optional[int] = None,
):
    """Draw treatment paths from the first-order Markov assignment model.

    P(W_it = 1 | U_i, W_{i,t-1}) = sigmoid(alpha(U_i) + gamma(U_i) W_{i,t-1});
    the first period is Bernoulli(p0(U_i)) with p0 given by ``init``
    (default 1/2).

    Returns:
      (treatments, latents).
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = np.asarray(u_dist(rng, n))
    a = np.asarray(alpha(u), dtype=float).ravel()
    g = np.asarray(gamma(u), dtype=float).ravel()
    p0 = np.full(n, 0.5) if init is None else np.asarray(init(u), dtype=float).ravel()
    w = np.empty((n, t_len))
    uniforms = rng.random((n, t_len))
    w[:, 0] = (uniforms[:, 0] < p0).astype(float)
    for t in range(1, t_len):
        p = _sigmoid(a + g * w[:, t - 1])
        w[:, t] = (uniforms[:, t] < p).astype(float)
    return w, u


def write_latents(path, latents) -> None:
    """Write the unit,u sidecar for a simulated panel."""
    u = np.asarray(latents)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("unit,u\n")
        for i, v in enumerate(u):
            if np.ndim(v) == 0:
                fh.write(f"{i},{float(v)!r}\n")
            else:
                fh.write(f"{i},\"{','.join(repr(float(c)) for c in v)}\"\n")
