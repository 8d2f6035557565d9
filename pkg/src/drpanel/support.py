"""Population weight sets over finite assignment supports.

Builds the two-way fixed-effects weights implied by an assignment
distribution, the constraint systems defining the outcome-balanced,
design-balanced, and doubly robust weight sets, feasibility checks for
those sets, and a minimum-norm member when one exists.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from drpanel import lp, qp
from drpanel.panel import AssignmentSupport, ValidationError, WeightTable
from drpanel.stats import SufficientStatistic

_KINDS = ("outc", "design", "dr")
_MAX_PERIODS = 16


class InfeasibleSystemError(RuntimeError):
    """Raised when a weight set is empty; carries the FeasibilityReport."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ConstraintSystem:
    """Linear constraints over the flattened K*T weight vector.

    Row k*T + t of the variable vector is the weight of support row k in
    period t. Inequality rows mean A @ omega >= b. Each row carries a tag:
    normalization | row-sum | column-sum | conditional-sum | treated-nonneg.
    """

    a_eq: np.ndarray
    b_eq: np.ndarray
    a_ge: np.ndarray
    b_ge: np.ndarray
    tags_eq: tuple
    tags_ge: tuple

    def __post_init__(self):
        a_eq = np.atleast_2d(np.asarray(self.a_eq, dtype=float))
        a_ge = np.atleast_2d(np.asarray(self.a_ge, dtype=float))
        b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        b_ge = np.asarray(self.b_ge, dtype=float).ravel()
        if a_eq.shape[0] != b_eq.size or len(self.tags_eq) != b_eq.size:
            raise ValidationError("equality rows, rhs, and tags must align")
        if a_ge.shape[0] != b_ge.size or len(self.tags_ge) != b_ge.size:
            raise ValidationError("inequality rows, rhs, and tags must align")
        if a_eq.size and a_ge.size and a_eq.shape[1] != a_ge.shape[1]:
            raise ValidationError("equality and inequality widths differ")
        for mat, rhs, label in ((a_eq, b_eq, "equality"), (a_ge, b_ge, "inequality")):
            seen = set()
            for row, rv in zip(mat, rhs):
                key = (tuple(row.tolist()), float(rv))
                if key in seen:
                    raise ValidationError(f"duplicate {label} row")
                seen.add(key)
        for name, arr in (("a_eq", a_eq), ("b_eq", b_eq), ("a_ge", a_ge), ("b_ge", b_ge)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vars(self) -> int:
        return self.a_eq.shape[1] if self.a_eq.size else self.a_ge.shape[1]

    def residuals(self, omega) -> tuple:
        """(max |A_eq w - b_eq|, max violation of A_ge w >= b_ge)."""
        x = np.asarray(omega, dtype=float).ravel()
        r_eq = 0.0 if not self.b_eq.size else float(np.max(np.abs(self.a_eq @ x - self.b_eq)))
        r_ge = 0.0 if not self.b_ge.size else float(np.max(np.maximum(self.b_ge - self.a_ge @ x, 0.0)))
        return r_eq, r_ge


@dataclass(frozen=True)
class FeasibilityReport:
    """Outcome of a weight-set feasibility check.

    matched_patterns holds (pattern id, (row, row), (period, period)) for
    every 2x2 submatrix certifying nonemptiness; stratum is the statistic
    value where the first within-stratum pattern was found (dr/design).
    """

    nonempty: bool
    witness: Optional[WeightTable]
    matched_patterns: tuple
    stratum: Optional[tuple] = None


def fe_weights(support: AssignmentSupport) -> WeightTable:
    """Population weights whose weighted outcome mean is the two-way FE coefficient.

    Double-demeans the treatment paths (path mean over periods, pi-weighted
    mean over paths per period, plus the grand mean) and divides by the
    pi-weighted mean of demeaned-treatment times treatment. Row means and
    pi-weighted column means of the result are zero by construction.
    """
    w = support.paths.astype(float)
    pi = support.probs
    row_mean = w.mean(axis=1)
    col_mean = pi @ w
    grand = float(pi @ row_mean)
    demeaned = w - row_mean[:, None] - col_mean[None, :] + grand
    denom = float((pi[:, None] * demeaned * w).sum() / w.shape[1])
    if abs(denom) < 1e-12:
        raise ValidationError(
            "FE coefficient not identified: demeaned treatment has zero variance"
        )
    return WeightTable(weights=demeaned / denom, level="population")


def aggregate_weights(
    support: AssignmentSupport, weights: WeightTable, stat: SufficientStatistic
) -> np.ndarray:
    """Per-stratum conditional mean weights E[omega_t | S = s].

    Returns an n_strata x T array whose rows follow stat.strata order
    (ascending statistic value). Within-stratum probabilities are
    renormalized before averaging, so a singleton stratum returns its row
    bit for bit.
    """
    omega = weights.weights
    if omega.shape != support.paths.shape:
        raise ValidationError("weight table does not match the support")
    out = np.empty((stat.n_strata, omega.shape[1]))
    for si, idx in enumerate(stat.strata):
        p = support.probs[list(idx)]
        p_norm = p / p.sum()
        out[si] = p_norm @ omega[list(idx)]
    return out


def build_constraints(
    support: AssignmentSupport,
    set_kind: str,
    stat: Optional[SufficientStatistic] = None,
) -> ConstraintSystem:
    """Constraint system for one of the weight sets outc, design, dr.

    All three share the normalization (1/T) sum_{k,t} pi_k omega_kt W_kt = 1.
    outc adds per-row zero means, per-period pi-weighted zero sums, and
    per-row treated sums >= 0. design adds per-(stratum, period) pi-weighted
    zero sums and treated sums >= 0. dr takes the per-row zero means, the
    per-(stratum, period) zero sums, and pointwise omega_kt >= 0 on treated
    cells. Vacuous all-zero inequality rows are dropped.
    """
    if set_kind not in _KINDS:
        raise ValidationError(f"set_kind must be one of {_KINDS}")
    if set_kind in ("design", "dr") and stat is None:
        raise ValidationError(f"{set_kind} constraints need a sufficient statistic")
    w = support.paths.astype(float)
    pi = support.probs
    k_len, t_len = w.shape
    nvar = k_len * t_len

    def cell(k, t):
        return k * t_len + t

    eq_rows, eq_rhs, eq_tags = [], [], []
    ge_rows, ge_rhs, ge_tags = [], [], []

    norm = np.zeros(nvar)
    for k in range(k_len):
        norm[k * t_len : (k + 1) * t_len] = pi[k] * w[k] / t_len
    eq_rows.append(norm)
    eq_rhs.append(1.0)
    eq_tags.append("normalization")

    if set_kind in ("outc", "dr"):
        for k in range(k_len):
            row = np.zeros(nvar)
            row[k * t_len : (k + 1) * t_len] = 1.0 / t_len
            eq_rows.append(row)
            eq_rhs.append(0.0)
            eq_tags.append("row-sum")

    if set_kind == "outc":
        for t in range(t_len):
            row = np.zeros(nvar)
            for k in range(k_len):
                row[cell(k, t)] = pi[k]
            eq_rows.append(row)
            eq_rhs.append(0.0)
            eq_tags.append("column-sum")
        for k in range(k_len):
            if not w[k].any():
                continue
            row = np.zeros(nvar)
            row[k * t_len : (k + 1) * t_len] = w[k] / t_len
            ge_rows.append(row)
            ge_rhs.append(0.0)
            ge_tags.append("treated-nonneg")

    if set_kind in ("design", "dr"):
        for idx in stat.strata:
            for t in range(t_len):
                row = np.zeros(nvar)
                for k in idx:
                    row[cell(k, t)] = pi[k]
                eq_rows.append(row)
                eq_rhs.append(0.0)
                eq_tags.append("conditional-sum")

    if set_kind == "design":
        for idx in stat.strata:
            for t in range(t_len):
                if not any(w[k, t] for k in idx):
                    continue
                row = np.zeros(nvar)
                for k in idx:
                    row[cell(k, t)] = pi[k] * w[k, t]
                ge_rows.append(row)
                ge_rhs.append(0.0)
                ge_tags.append("treated-nonneg")

    if set_kind == "dr":
        for k in range(k_len):
            for t in range(t_len):
                if w[k, t] == 1.0:
                    row = np.zeros(nvar)
                    row[cell(k, t)] = 1.0
                    ge_rows.append(row)
                    ge_rhs.append(0.0)
                    ge_tags.append("treated-nonneg")

    return ConstraintSystem(
        a_eq=np.asarray(eq_rows),
        b_eq=np.asarray(eq_rhs),
        a_ge=np.asarray(ge_rows) if ge_rows else np.zeros((0, nvar)),
        b_ge=np.asarray(ge_rhs),
        tags_eq=tuple(eq_tags),
        tags_ge=tuple(ge_tags),
    )


def _pattern_id(sub) -> Optional[str]:
    """Classify a 2x2 binary submatrix up to row/column permutation.

    The admissible classes all have distinct rows and distinct columns:
    exactly one treated cell ('single'), exactly three ('triple'), or a
    diagonal pair ('switch'). Returns None otherwise.
    """
    if (sub[0] == sub[1]).all() or (sub[:, 0] == sub[:, 1]).all():
        return None
    return {1: "single", 2: "switch", 3: "triple"}[int(sub.sum())]


def _scan_patterns(w, row_ids, allowed):
    found = []
    t_len = w.shape[1]
    for ai in range(len(row_ids)):
        for bi in range(ai + 1, len(row_ids)):
            a, b = row_ids[ai], row_ids[bi]
            for t1 in range(t_len):
                for t2 in range(t1 + 1, t_len):
                    sub = w[np.ix_([a, b], [t1, t2])]
                    pid = _pattern_id(sub)
                    if pid in allowed:
                        found.append((pid, (a, b), (t1, t2)))
    return found


def check_feasibility(
    support: AssignmentSupport,
    set_kind: str,
    stat: Optional[SufficientStatistic] = None,
) -> FeasibilityReport:
    """Decide whether a weight set is nonempty, two independent ways.

    Runs the combinatorial 2x2-pattern scan (outc: single, triple, or
    switch patterns anywhere; dr: single or switch within one stratum;
    design: any two distinct rows sharing a stratum) and an LP feasibility
    check of the full constraint system, and requires the two verdicts to
    agree. On success the witness is the minimum-norm member.
    """
    if support.paths.shape[1] > _MAX_PERIODS:
        raise ValidationError(
            f"feasibility scan supports at most {_MAX_PERIODS} periods"
        )
    if set_kind not in _KINDS:
        raise ValidationError(f"set_kind must be one of {_KINDS}")
    if set_kind in ("design", "dr") and stat is None:
        raise ValidationError(f"{set_kind} feasibility needs a sufficient statistic")
    w = support.paths

    matched = []
    stratum_value = None
    if set_kind == "outc":
        matched = _scan_patterns(w, list(range(w.shape[0])), ("single", "triple", "switch"))
    elif set_kind == "dr":
        for si, idx in enumerate(stat.strata):
            hits = _scan_patterns(w, list(idx), ("single", "switch"))
            if hits and stratum_value is None:
                stratum_value = stat.stratum_values()[si]
            matched.extend(hits)
    else:
        for si, idx in enumerate(stat.strata):
            if len(idx) < 2:
                continue
            if stratum_value is None:
                stratum_value = stat.stratum_values()[si]
            a, b = idx[0], idx[1]
            t_diff = int(np.argmax(w[a] != w[b]))
            matched.append(("stratum-pair", (a, b), (t_diff, t_diff)))

    system = build_constraints(support, set_kind, stat)
    lp_feasible, _ = lp.feasible_point(system.a_eq, system.b_eq, system.a_ge, system.b_ge)
    pattern_feasible = bool(matched)
    if pattern_feasible != lp_feasible:
        raise RuntimeError(
            f"pattern scan ({pattern_feasible}) and LP ({lp_feasible}) disagree"
            f" for {set_kind}; this should be impossible"
        )

    witness = None
    if lp_feasible:
        witness = solve_min_norm(support, system)
    return FeasibilityReport(
        nonempty=lp_feasible,
        witness=witness,
        matched_patterns=tuple(matched),
        stratum=stratum_value,
    )


def solve_min_norm(support: AssignmentSupport, system: ConstraintSystem) -> WeightTable:
    """Minimize sum_{k,t} pi_k omega_kt^2 subject to the constraint system.

    The pi-weighted squared norm has a unique minimizer on any nonempty
    set here. Raises InfeasibleSystemError when the system is empty and
    RuntimeError when the active-set solve ends with KKT residuals above
    1e-8.
    """
    k_len, t_len = support.paths.shape
    if system.n_vars != k_len * t_len:
        raise ValidationError("system width does not match the support")
    q_diag = 2.0 * np.repeat(support.probs, t_len)
    try:
        x, info = qp.solve_qp(
            q_diag,
            a_eq=system.a_eq,
            b_eq=system.b_eq,
            a_ge=system.a_ge,
            b_ge=system.b_ge,
        )
    except qp.InfeasibleError as exc:
        report = FeasibilityReport(nonempty=False, witness=None, matched_patterns=())
        raise InfeasibleSystemError(str(exc), report=report) from exc
    if info["kkt_residual"] > 1e-8:
        raise RuntimeError(f"KKT residual {info['kkt_residual']:.3e} exceeds 1e-8")
    return WeightTable(weights=x.reshape(k_len, t_len), level="population")


def format_weights_text(
    support: AssignmentSupport, table: WeightTable, decimals: int = 2
) -> str:
    """Aligned text table: probability, path bits, weight per period."""
    t_len = support.paths.shape[1]
    header = ["prob"] + [f"w{t + 1}" for t in range(t_len)] + [
        f"omega{t + 1}" for t in range(t_len)
    ]
    rows = [header]
    for k in range(support.paths.shape[0]):
        rows.append(
            [f"{support.probs[k]:.{decimals}f}"]
            + [str(int(v)) for v in support.paths[k]]
            + [f"{v:.{decimals}f}" for v in table.weights[k]]
        )
    widths = [max(len(r[j]) for r in rows) for j in range(len(header))]
    return "\n".join(
        "  ".join(val.rjust(widths[j]) for j, val in enumerate(row)) for row in rows
    )


def write_weights_csv(support: AssignmentSupport, table: WeightTable, path,
                      notes=()) -> None:
    """Write `k,path,prob,w1..wT` rows at full precision.

    notes are emitted as leading `#` comment lines (e.g. which
    normalization convention the weights satisfy).
    """
    t_len = support.paths.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for note in notes:
            fh.write(f"# {note}\n")
        fh.write("k,path,prob," + ",".join(f"w{t + 1}" for t in range(t_len)) + "\n")
        for k in range(support.paths.shape[0]):
            bits = "".join(str(int(v)) for v in support.paths[k])
            vals = ",".join(repr(float(v)) for v in table.weights[k])
            fh.write(f"{k},{bits},{float(support.probs[k])!r},{vals}\n")


NORMALIZATION_NOTE = (
    "normalization: (1/T) sum_k pi_k omega_kt W_kt = 1;"
    " a variant with an extra 1/K factor appears in one published display"
    " and is not used here"
)
