"""Unit-level bootstrap tests.

Replicates are keyed on (seed, b), so the main oracles are replay based:
rerunning a replicate's fit by hand with the same multiplicities must
give the stored estimate, and the batched stratum-by-period path must
agree with the generic per-replicate path on the same basis content.
"""

import numpy as np
import pytest

from drpanel import (
    BasisSpec,
    PanelDataset,
    SolverConfig,
    UnstableBootstrapError,
    ValidationError,
    bootstrap,
    extract_weights,
    fit_dual,
    make_basis,
    stat_mean,
    write_bootstrap_csv,
)
from drpanel.estimator import basis_matrix
from drpanel.inference import BootstrapResult, _multiplicities


def mixed_panel(n=24, t_len=3, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    w = (rng.random((n, t_len)) < 0.5).astype(float)
    w[0] = 0.0
    w[1] = 1.0
    w[2] = [0.0] + [1.0] * (t_len - 1)
    y = 1.5 * w + rng.normal(size=(n, 1)) + noise * rng.normal(size=(n, t_len))
    return PanelDataset(outcomes=y, treatments=w)


class TestDeterminism:
    def test_same_seed_reproduces_everything(self):
        data = mixed_panel()
        a = bootstrap(data, BasisSpec(name="empty"), b_reps=25, seed=7)
        b = bootstrap(data, BasisSpec(name="empty"), b_reps=25, seed=7)
        assert a.tau_hat == b.tau_hat
        assert a.sigma2_hat == b.sigma2_hat
        np.testing.assert_array_equal(a.replicates, b.replicates)
        assert a.ci == b.ci

    def test_different_seeds_differ(self):
        data = mixed_panel()
        a = bootstrap(data, BasisSpec(name="empty"), b_reps=25, seed=7)
        b = bootstrap(data, BasisSpec(name="empty"), b_reps=25, seed=8)
        assert not np.array_equal(a.replicates, b.replicates)

    def test_multiplicities_fixed_by_seed_and_index(self):
        m1 = _multiplicities(3, 5, 40)
        m2 = _multiplicities(3, 5, 40)
        np.testing.assert_array_equal(m1, m2)
        assert m1.sum() == 40  # resample with replacement keeps the count
        assert not np.array_equal(m1, _multiplicities(3, 6, 40))

    def test_threaded_run_matches_serial(self, monkeypatch):
        data = mixed_panel(n=18)
        serial = bootstrap(data, BasisSpec(name="empty"), b_reps=20, seed=2)
        monkeypatch.setenv("DRPANEL_THREADS", "4")
        threaded = bootstrap(data, BasisSpec(name="empty"), b_reps=20, seed=2)
        np.testing.assert_array_equal(serial.replicates, threaded.replicates)


class TestReplicateReplay:
    def test_first_replicate_matches_manual_refit(self):
        data = mixed_panel(n=20)
        basis = BasisSpec(name="empty")
        result = bootstrap(data, basis, b_reps=10, seed=11)
        assert result.n_failed == 0
        mult = _multiplicities(11, 1, data.n_units)
        sol = fit_dual(data, basis, unit_weights=mult)
        est = extract_weights(data, basis, sol, unit_weights=mult)
        assert result.replicates[0] == pytest.approx(est.tau_hat, abs=1e-9)

    def test_pooled_path_matches_dense_path(self):
        data = mixed_panel(n=16, seed=3)
        stat = stat_mean(data.treatments)
        basis = make_basis("stratum-by-period", data, stat)
        pooled = bootstrap(data, basis, stat, b_reps=15, seed=5)

        table = BasisSpec(name="custom", table=basis_matrix(data, basis, stat))
        dense = bootstrap(data, table, None, b_reps=15, seed=5)

        assert pooled.n_failed == dense.n_failed
        np.testing.assert_allclose(pooled.replicates, dense.replicates, atol=1e-6)
        assert pooled.sigma2_hat == pytest.approx(dense.sigma2_hat, rel=1e-4)


class TestStatistics:
    def test_variance_formula_from_replicates(self):
        data = mixed_panel(n=22, seed=6)
        result = bootstrap(data, BasisSpec(name="empty"), b_reps=30, seed=9)
        manual = data.n_units / result.replicates.size * np.sum(
            (result.replicates - result.tau_hat) ** 2
        )
        assert result.sigma2_hat == pytest.approx(manual, rel=1e-12)

    def test_ci_uses_normal_quantile(self):
        data = mixed_panel(n=22, seed=6)
        result = bootstrap(
            data, BasisSpec(name="empty"), b_reps=30, seed=9, ci_level=0.9
        )
        half = 1.6448536269514722 * (result.sigma2_hat / data.n_units) ** 0.5
        assert result.ci[0] == pytest.approx(result.tau_hat - half, abs=1e-12)
        assert result.ci[1] == pytest.approx(result.tau_hat + half, abs=1e-12)
        assert result.ci[0] < result.tau_hat < result.ci[1]

    def test_noiseless_additive_panel_has_zero_variance(self):
        rng = np.random.default_rng(4)
        n, t_len = 20, 3
        w = (rng.random((n, t_len)) < 0.5).astype(float)
        w[0], w[1] = 0.0, 1.0
        y = 2.0 * w + rng.normal(size=(n, 1)) + rng.normal(size=(1, t_len))
        data = PanelDataset(outcomes=y, treatments=w)
        result = bootstrap(data, BasisSpec(name="empty"), b_reps=20, seed=1)
        # every resample still balances away the additive structure
        np.testing.assert_allclose(result.replicates, 2.0, atol=1e-6)
        assert result.sigma2_hat == pytest.approx(0.0, abs=1e-10)


class TestFailureHandling:
    def test_fragile_panel_raises_unstable(self):
        # overlap hinges on the lone switching unit; resamples that drop
        # it lose the treated-control link and must be counted
        w = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        y = np.zeros((3, 2))
        data = PanelDataset(outcomes=y, treatments=w)
        with pytest.raises(UnstableBootstrapError):
            bootstrap(data, BasisSpec(name="empty"), b_reps=40, seed=0)

    def test_b_reps_validation(self):
        data = mixed_panel()
        with pytest.raises(ValidationError):
            bootstrap(data, BasisSpec(name="empty"), b_reps=1)

    def test_ci_level_validation(self):
        data = mixed_panel()
        with pytest.raises(ValidationError):
            bootstrap(data, BasisSpec(name="empty"), b_reps=5, ci_level=1.0)

    def test_result_needs_two_replicates(self):
        with pytest.raises(ValidationError):
            BootstrapResult(
                tau_hat=0.0,
                sigma2_hat=0.0,
                replicates=np.array([1.0]),
                ci_level=0.95,
                ci=(0.0, 0.0),
                seed=0,
                n_units=5,
            )

    def test_replicates_are_readonly(self):
        data = mixed_panel()
        result = bootstrap(data, BasisSpec(name="empty"), b_reps=5, seed=3)
        with pytest.raises(ValueError):
            result.replicates[0] = 0.0


class TestCsvOutput:
    def test_round_trip_values(self, tmp_path):
        data = mixed_panel(n=15, seed=8)
        result = bootstrap(data, BasisSpec(name="empty"), b_reps=8, seed=13)
        path = tmp_path / "boot.csv"
        write_bootstrap_csv(result, path)
        lines = path.read_text().splitlines()
        comments = [l for l in lines if l.startswith("#")]
        assert any("tau_hat" in c for c in comments)
        assert any("sigma2_hat" in c for c in comments)
        body = [l for l in lines if not l.startswith("#")]
        assert body[0] == "b,tau_b"
        values = [float(l.split(",")[1]) for l in body[1:]]
        np.testing.assert_array_equal(values, result.replicates)
        assert [int(l.split(",")[0]) for l in body[1:]] == list(
            range(1, len(values) + 1)
        )
