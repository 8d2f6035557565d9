"""Monte Carlo harness for double robustness, normality, and bootstrap checks.

Crosses assignment models (one with a low-dimensional sufficient
statistic, one confounded without it, one Markov) with outcome models
(additive two-way, a non-additive stratum model, and a general balanced
class), runs the weighting estimator and the two-way fixed-effects OLS
over many replicates, and summarizes bias, spread, normality, and
bootstrap coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from drpanel import _pooled
from drpanel.estimator import SolverConfig, make_basis
from drpanel.inference import UnstableBootstrapError, bootstrap
from drpanel.panel import PanelDataset, ValidationError
from drpanel.stats import _sigmoid, simulate_markov, simulate_static_logit, stat_mean

ASSIGNMENTS = ("fe_confounded", "static_logit", "markov")
OUTCOMES = ("two_way_fe", "stratum_model", "assumption6_general")
EFFECTS = ("constant", "heterogeneous")
ESTIMATORS = ("dr", "fe")

# Stephens' modified A*2 = A2 (1 + 0.75/n + 2.25/n^2) against the
# both-parameters-estimated normal table; 1% point.
AD_1PCT = 1.035


@dataclass(frozen=True)
class DgpSpec:
    """One assignment model, one outcome model, one effect type per run."""

    assignment: str
    outcome: str
    effect: str = "constant"
    tau: float = 1.0
    n: int = 500
    t_len: int = 3
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.assignment not in ASSIGNMENTS:
            raise ValidationError(f"assignment must be one of {ASSIGNMENTS}")
        if self.outcome not in OUTCOMES:
            raise ValidationError(f"outcome must be one of {OUTCOMES}")
        if self.effect not in EFFECTS:
            raise ValidationError(f"effect must be one of {EFFECTS}")
        if self.n < 4 or self.t_len < 2:
            raise ValidationError("need n >= 4 and t_len >= 2")
        if self.noise < 0:
            raise ValidationError("noise scale must be nonnegative")


def draw_panel(spec: DgpSpec, rep: int) -> dict:
    """Draw one replicate dataset, returning every latent piece.

    Keys: w, y, structural, noise, tau_it, cond_eff, latent, x, labels.
    y = structural + tau_it * w + noise, and cond_eff = E[tau_it | W, X]
    (here tau_it is deterministic given the path, so they coincide).
    Deterministic in (spec.seed, rep).
    """
    n, t_len = spec.n, spec.t_len
    periods = np.arange(1, t_len + 1, dtype=float)

    if spec.assignment == "static_logit":
        w, latent = simulate_static_logit(
            n,
            t_len,
            lambda rng, k: rng.standard_normal(k),
            lambda u: u,
            np.linspace(-0.4, 0.4, t_len),
            seed=[spec.seed, rep, 0],
        )
    elif spec.assignment == "markov":
        w, latent = simulate_markov(
            n,
            t_len,
            lambda rng, k: rng.standard_normal(k),
            lambda u: 0.6 * u - 0.2,
            lambda u: np.full_like(u, 0.9),
            init=lambda u: _sigmoid(0.5 * u),
            seed=[spec.seed, rep, 0],
        )
    else:
        rng_w = np.random.default_rng([spec.seed, rep, 0])
        latent = rng_w.standard_normal(n)
        shocks = rng_w.standard_normal((n, t_len))
        shift = np.linspace(-0.3, 0.5, t_len)
        w = (latent[:, None] + shift[None, :] + shocks > 0.0).astype(float)

    w = w.astype(float)
    wbar = w.mean(axis=1)
    rng_y = np.random.default_rng([spec.seed, rep, 1])

    x = None
    if spec.outcome == "two_way_fe":
        structural = latent[:, None] + 0.5 * periods[None, :]
    elif spec.outcome == "stratum_model":
        structural = 2.0 * periods[None, :] * np.square(wbar)[:, None]
    else:
        x = rng_y.standard_normal(n)
        structural = (
            0.3 * periods[None, :]
            + 0.7 * x[:, None] * np.linspace(0.5, 1.5, t_len)[None, :]
            + 0.5 * wbar[:, None] * periods[None, :]
        )

    if spec.effect == "constant":
        tau_it = np.full((n, t_len), spec.tau)
    else:
        tau_it = np.broadcast_to(
            spec.tau
            + 0.8 * (wbar[:, None] - 0.5)
            + 0.3 * (periods[None, :] - (t_len + 1) / 2.0) / t_len,
            (n, t_len),
        ).copy()
    cond_eff = tau_it  # deterministic given the path

    noise = spec.noise * rng_y.standard_normal((n, t_len))
    y = structural + tau_it * w + noise
    return {
        "w": w,
        "y": y,
        "structural": structural,
        "noise": noise,
        "tau_it": tau_it,
        "cond_eff": cond_eff,
        "latent": latent,
        "x": x,
        "labels": w.sum(axis=1).astype(int),
    }


def fe_fit(w, y):
    """Two-way OLS coefficient and its weight representation, batched.

    Accepts (N, T) or (B, N, T); returns (tau (B,), omega (B, N, T)) where
    omega is the double-demeaned treatment over its treated mean, so that
    tau = mean(omega * y) and mean(omega * w) = 1.
    """
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    squeeze = w.ndim == 2
    if squeeze:
        w, y = w[None], y[None]
    demeaned = (
        w
        - w.mean(axis=2, keepdims=True)
        - w.mean(axis=1, keepdims=True)
        + w.mean(axis=(1, 2), keepdims=True)
    )
    denom = (demeaned * w).mean(axis=(1, 2))
    if np.any(np.abs(denom) < 1e-12):
        raise ValidationError(
            "FE coefficient not identified: demeaned treatment has zero variance"
        )
    omega = demeaned / denom[:, None, None]
    tau = (omega * y).mean(axis=(1, 2))
    if squeeze:
        return tau[0], omega[0]
    return tau, omega


def anderson_darling(x):
    """Normality statistic with estimated mean and variance.

    Returns (a2, a2_star) where a2_star carries the finite-sample
    modification (1 + 0.75/n + 2.25/n^2); compare a2_star to AD_1PCT.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n < 8:
        raise ValidationError("need at least 8 observations")
    sd = x.std(ddof=1)
    if sd == 0:
        raise ValidationError("degenerate sample")
    z = (x - x.mean()) / sd
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = np.array([0.5 * (1.0 + math.erf(v * inv_sqrt2)) for v in z])
    cdf = np.clip(cdf, 1e-300, 1.0 - 1e-16)
    i = np.arange(1, n + 1)
    a2 = -n - np.mean((2 * i - 1) * (np.log(cdf) + np.log1p(-cdf[::-1])))
    return float(a2), float(a2 * (1.0 + 0.75 / n + 2.25 / n**2))


def _dr_fit_reps(w_all, labels_all, n_strata, config, chunk=128):
    """Chunked batched dual fits over stacked replicates."""
    reps = w_all.shape[0]
    taus = np.zeros(reps)
    normalizers = np.zeros(reps)
    omegas = np.zeros_like(w_all)
    converged = np.zeros(reps, dtype=bool)
    for lo in range(0, reps, chunk):
        hi = min(lo + chunk, reps)
        fit = _pooled.fit_pooled(
            w_all[lo:hi],
            labels_all[lo:hi],
            n_strata,
            tol_obj=config.tol_obj,
            tol_grad=config.tol_grad,
            max_iter=config.max_iter,
        )
        omega_un, norm = _pooled.pooled_weights(w_all[lo:hi], labels_all[lo:hi], fit)
        converged[lo:hi] = fit["converged"] & (norm > config.min_normalizer)
        safe = np.where(norm > config.min_normalizer, norm, 1.0)
        omegas[lo:hi] = omega_un / safe[:, None, None]
        normalizers[lo:hi] = norm
    return omegas, normalizers, converged


def _decomposition_gap(tau, omega, w, rep_data):
    """Exact error identity: tau_hat - tau_emp minus its three components.

    tau_hat - tau_emp = mean(omega * structural) + mean(omega * noise)
    + mean(omega * w * (tau_it - cond_eff)); holds for any weights with
    mean(omega * w) = 1, to float roundoff.
    """
    tau_emp = (omega * w * rep_data["cond_eff"]).mean(axis=(-1, -2))
    lhs = tau - tau_emp
    rhs = (
        (omega * rep_data["structural"]).mean(axis=(-1, -2))
        + (omega * rep_data["noise"]).mean(axis=(-1, -2))
        + (omega * w * (rep_data["tau_it"] - rep_data["cond_eff"])).mean(axis=(-1, -2))
    )
    return np.max(np.abs(lhs - rhs)), tau_emp


def run_experiment(
    spec: DgpSpec,
    estimators=("dr", "fe"),
    reps: int = 200,
    bootstrap_b: int = 0,
    ci_level: float = 0.95,
    config: Optional[SolverConfig] = None,
) -> dict:
    """Run the full replicate loop and summarize each estimator.

    Per estimator: bias against tau (constant effects) or against the
    replicate-level tau_emp = mean(omega * w * cond_eff) (heterogeneous),
    Monte Carlo SE of that bias, RMSE, SD of the draws, the normality
    statistic of standardized errors, the failure rate (flagged above
    10%, not fatal), and bootstrap CI coverage when bootstrap_b > 0
    (weighting estimator only).
    """
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {name!r}; use dr or fe")
    if reps < 2:
        raise ValidationError("reps must be at least 2")
    config = config or SolverConfig()

    data = [draw_panel(spec, rep) for rep in range(reps)]
    w_all = np.stack([d["w"] for d in data])
    stacked = {
        key: np.stack([d[key] for d in data])
        for key in ("y", "structural", "noise", "tau_it", "cond_eff")
    }
    labels_all = np.stack([d["labels"] for d in data])

    per_rep: dict = {"rep": np.arange(reps)}
    summary: dict = {}
    worst_gap = 0.0

    for name in estimators:
        if name == "dr":
            omega, _, ok = _dr_fit_reps(w_all, labels_all, spec.t_len + 1, config)
            tau = (omega * stacked["y"]).mean(axis=(1, 2))
        else:
            tau, omega = fe_fit(w_all, stacked["y"])
            ok = np.ones(reps, dtype=bool)
        gap, tau_emp = _decomposition_gap(tau, omega, w_all, stacked)
        worst_gap = max(worst_gap, gap)
        if gap > 1e-10:
            raise RuntimeError(
                f"error decomposition violated for {name}: gap {gap:.3e}"
            )
        target = np.full(reps, spec.tau) if spec.effect == "constant" else tau_emp
        err = tau - target
        good = err[ok]
        n_failed = int((~ok).sum())
        mc_se = float(good.std(ddof=1) / math.sqrt(good.size))
        a2 = a2_star = math.nan
        if good.size >= 8 and good.std(ddof=1) > 0:
            a2, a2_star = anderson_darling(good)
        summary[name] = {
            "bias": float(good.mean()),
            "mc_se": mc_se,
            "rmse": float(np.sqrt(np.mean(good**2))),
            "sd": float(good.std(ddof=1)),
            "n_failed": n_failed,
            "fail_rate": n_failed / reps,
            "flagged": n_failed > 0.1 * reps,
            "ad_a2": a2,
            "ad_a2_star": a2_star,
            "ad_pass_1pct": bool(a2_star < AD_1PCT) if not math.isnan(a2_star) else None,
            "coverage": None,
        }
        per_rep[f"tau_{name}"] = tau
        per_rep[f"target_{name}"] = target
        per_rep[f"ok_{name}"] = ok

    if bootstrap_b > 0 and "dr" in estimators:
        cover = np.zeros(reps, dtype=bool)
        boot_ok = np.zeros(reps, dtype=bool)
        ci_lo = np.full(reps, math.nan)
        ci_hi = np.full(reps, math.nan)
        for rep in range(reps):
            if not per_rep["ok_dr"][rep]:
                continue
            d = data[rep]
            ds = PanelDataset(outcomes=stacked["y"][rep], treatments=d["w"])
            stat = stat_mean(ds.treatments)
            basis = make_basis("stratum-by-period", ds, stat)
            rep_seed = int(np.random.SeedSequence([spec.seed, rep]).generate_state(1)[0])
            try:
                res = bootstrap(
                    ds, basis, stat, config, b_reps=bootstrap_b,
                    seed=rep_seed, ci_level=ci_level,
                )
            except (UnstableBootstrapError, ValidationError):
                continue
            boot_ok[rep] = True
            ci_lo[rep], ci_hi[rep] = res.ci
            target = per_rep["target_dr"][rep]
            cover[rep] = res.ci[0] <= target <= res.ci[1]
        used = boot_ok.sum()
        summary["dr"]["coverage"] = float(cover[boot_ok].mean()) if used else math.nan
        summary["dr"]["n_boot_failed"] = int(reps - used)
        per_rep["ci_low"] = ci_lo
        per_rep["ci_high"] = ci_hi

    return {
        "spec": spec,
        "estimators": tuple(estimators),
        "reps": reps,
        "summary": summary,
        "per_rep": per_rep,
        "decomposition_gap": worst_gap,
    }


def format_experiment_summary(results: dict) -> str:
    """Human-readable per-estimator metric table, 6 significant digits."""
    spec = results["spec"]
    lines = [
        f"assignment={spec.assignment} outcome={spec.outcome} effect={spec.effect}"
        f" n={spec.n} T={spec.t_len} noise={spec.noise:g} tau={spec.tau:g}"
        f" reps={results['reps']} seed={spec.seed}"
    ]
    cols = ["estimator", "bias", "mc_se", "rmse", "sd", "fail_rate", "ad_a2_star", "coverage"]
    rows = [cols]
    for name in results["estimators"]:
        s = results["summary"][name]
        rows.append(
            [
                name,
                f"{s['bias']:.6g}",
                f"{s['mc_se']:.6g}",
                f"{s['rmse']:.6g}",
                f"{s['sd']:.6g}",
                f"{s['fail_rate']:.6g}",
                "nan" if math.isnan(s["ad_a2_star"]) else f"{s['ad_a2_star']:.6g}",
                "-" if s["coverage"] is None else f"{s['coverage']:.6g}",
            ]
        )
    widths = [max(len(r[j]) for r in rows) for j in range(len(cols))]
    for row in rows:
        lines.append("  ".join(val.rjust(widths[j]) for j, val in enumerate(row)))
    return "\n".join(lines)


def write_experiment_csv(results: dict, path) -> None:
    """Per-replicate estimates and targets at full precision."""
    per_rep = results["per_rep"]
    keys = list(per_rep)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(keys) + "\n")
        for r in range(results["reps"]):
            cells = []
            for key in keys:
                v = per_rep[key][r]
                if isinstance(v, (bool, np.bool_)):
                    cells.append(str(int(v)))
                elif isinstance(v, (int, np.integer)):
                    cells.append(str(int(v)))
                else:
                    cells.append(repr(float(v)))
            fh.write(",".join(cells) + "\n")


def parse_experiment_config(path):
    """Plain-text `key = value` experiment description.

    Keys: assignment, outcome, effect, tau, n, t, noise, seed, reps,
    estimators (comma-separated), bootstrap, ci_level.
    """
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValidationError(f"bad config line {lineno}: {line.strip()!r}")
            key, val = (part.strip() for part in body.split("=", 1))
            raw[key] = val
    for required in ("assignment", "outcome"):
        if required not in raw:
            raise ValidationError(f"experiment config missing {required!r}")
    spec = DgpSpec(
        assignment=raw["assignment"],
        outcome=raw["outcome"],
        effect=raw.get("effect", "constant"),
        tau=float(raw.get("tau", 1.0)),
        n=int(raw.get("n", 500)),
        t_len=int(raw.get("t", 3)),
        noise=float(raw.get("noise", 1.0)),
        seed=int(raw.get("seed", 0)),
    )
    options = {
        "reps": int(raw.get("reps", 200)),
        "estimators": tuple(
            s.strip() for s in raw.get("estimators", "dr,fe").split(",") if s.strip()
        ),
        "bootstrap_b": int(raw.get("bootstrap", 0)),
        "ci_level": float(raw.get("ci_level", 0.95)),
    }
    return spec, options
