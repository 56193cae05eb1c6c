"""Tests for the Monte Carlo harnesses."""

import math
import random

import numpy as np
import psutil
import pytest

from experiments.monte_carlo import (
    SweepConfig,
    aggregate_residuals,
    loglog_slope,
    monte_carlo_residuals,
    rate_table,
    run_replicas,
    tail_window,
    telescoped_U,
    u_n_diagnostic,
)
from experiments.scenarios import OperatorScenario, TdScenario
from markov.chain import FiniteChain, random_ergodic_chain
from mdp.model import PolicySpec, random_ergodic_mdp
from schedules.step_size import ScheduleTable, StepSchedule, geometric_checkpoints
from skm.engine import SkmRunConfig, run
from skm.operators import AffineMarkovOperator, ScaledOperator
from td.average_reward import AugmentedChain
from utils.errors import ConfigValidationError, NonFiniteIterate


@pytest.fixture(scope='module')
def toy_scenario():
    return OperatorScenario(ScaledOperator(1), FiniteChain.from_matrix([[1.0]]), x0=np.ones(1))


@pytest.fixture(scope='module')
def affine_scenario():
    chain = random_ergodic_chain(3, seed=1)
    op = AffineMarkovOperator.random(2, 3, np.random.default_rng(2))
    return OperatorScenario(op, chain)


@pytest.fixture(scope='module')
def td_scenario():
    mdp = random_ergodic_mdp(4, 2, seed=7)
    return TdScenario(mdp, PolicySpec.uniform(mdp))


class ExplodingNoise:
    def __call__(self, n, x, y, rng):
        return np.full(1, np.inf)


class TestSweepConfig:
    def test_needs_a_replica(self, toy_scenario):
        with pytest.raises(ConfigValidationError) as info:
            SweepConfig(scenario=toy_scenario, replicas=0)
        assert info.value.field == 'sweep.replicas'

    def test_b_is_checked(self, toy_scenario):
        with pytest.raises(ConfigValidationError):
            SweepConfig(scenario=toy_scenario, b_values=(0.5,))

    def test_seeds_and_checkpoints(self, toy_scenario):
        config = SweepConfig(scenario=toy_scenario, horizon=1000, base_seed=40)
        assert [config.seed(i) for i in range(3)] == [40, 41, 42]
        assert config.checkpoints() == sorted(config.checkpoints())
        assert config.checkpoints()[0] == 16


class TestMonteCarloResiduals:
    def test_noise_free_toy(self, toy_scenario):
        config = SweepConfig(scenario=toy_scenario, replicas=3, horizon=2000)
        report = monte_carlo_residuals(config)
        single = run(ScaledOperator(1), toy_scenario.chain,
                     SkmRunConfig(horizon=2000, schedule=StepSchedule(b=0.9), x0=np.ones(1)))
        np.testing.assert_array_equal([row['mean_residual'] for row in report.rows], single.column('residual'))
        assert all(row['std_residual'] == 0.0 for row in report.rows)
        assert all(row['count'] == 3 for row in report.rows)
        assert report.gain_slope is None

    def test_aggregates_ignore_replica_order(self, td_scenario):
        config = SweepConfig(scenario=td_scenario, replicas=6, horizon=3000)
        records = run_replicas(config, 0.9)
        shuffled = list(records)
        random.Random(0).shuffle(shuffled)
        first = aggregate_residuals(records, 0.9, 3000)
        second = aggregate_residuals(shuffled, 0.9, 3000)
        assert first.rows == second.rows
        assert first.slope == second.slope

    def test_replicas_are_sorted_and_seeded(self, td_scenario):
        config = SweepConfig(scenario=td_scenario, replicas=3, horizon=500, base_seed=10)
        records = run_replicas(config, 0.9)
        assert [r.replica for r in records] == [0, 1, 2]
        assert [r.seed for r in records] == [10, 11, 12]

    def test_worker_processes_match_sequential(self, td_scenario):
        sequential = SweepConfig(scenario=td_scenario, replicas=4, horizon=2000, threads=1)
        parallel = SweepConfig(scenario=td_scenario, replicas=4, horizon=2000, threads=2)
        assert monte_carlo_residuals(sequential).rows == monte_carlo_residuals(parallel).rows

    def test_td_report_fields(self, td_scenario):
        report = monte_carlo_residuals(SweepConfig(scenario=td_scenario, replicas=4, horizon=20000))
        assert all(row['mean_residual'] >= 0 for row in report.rows)
        assert report.gain_slope is not None
        assert set(report.convergence) == {'replicas', 'shrunk_fraction', 'final_is_min_fraction'}
        assert report.sup_scaled >= report.scaled_at_tail_start

    def test_non_finite_carries_replica(self):
        scenario = OperatorScenario(ScaledOperator(1), FiniteChain.from_matrix([[1.0]]),
                                    additive_noise=ExplodingNoise())
        with pytest.raises(NonFiniteIterate) as info:
            monte_carlo_residuals(SweepConfig(scenario=scenario, replicas=2, horizon=100))
        assert info.value.replica == 0


class TestScenarioPreparation:
    @pytest.fixture
    def build_calls(self, monkeypatch):
        calls = []
        original = AugmentedChain.build

        def counting_build(mdp, policy):
            calls.append((mdp, policy))
            return original(mdp, policy)

        monkeypatch.setattr(AugmentedChain, 'build', staticmethod(counting_build))
        return calls

    def test_decomposed_replicas_share_one_chain(self, build_calls):
        mdp = random_ergodic_mdp(3, 2, seed=4)
        scenario = TdScenario(mdp, PolicySpec.uniform(mdp))
        config = SweepConfig(scenario=scenario, replicas=3, horizon=300)
        run_replicas(config, 0.9, decomposition=True)
        augmented = scenario.augmented
        run_replicas(config, 0.9, decomposition=True)
        assert len(build_calls) == 1
        assert scenario.augmented is augmented

    def test_compact_form_check_builds_once(self, build_calls):
        mdp = random_ergodic_mdp(3, 2, seed=5)
        scenario = TdScenario(mdp, PolicySpec.uniform(mdp), check_compact_form=True)
        run_replicas(SweepConfig(scenario=scenario, replicas=4, horizon=200), 0.9)
        assert len(build_calls) == 1

    def test_plain_run_builds_nothing(self, build_calls):
        mdp = random_ergodic_mdp(3, 2, seed=6)
        scenario = TdScenario(mdp, PolicySpec.uniform(mdp)).prepare()
        run_replicas(SweepConfig(scenario=scenario, replicas=2, horizon=200), 0.9)
        assert build_calls == []
        assert scenario.augmented is None


class TestSlopes:
    def test_tail_window(self):
        checkpoints = geometric_checkpoints(10 ** 6)
        window = tail_window(checkpoints, 10 ** 6)
        assert [checkpoints[i] for i in window] == [131072, 262144, 524288, 1000000]

    def test_tail_window_widens(self):
        checkpoints = [10, 20, 40, 80, 100]
        assert tail_window(checkpoints, 100, tail_fraction=0.9) == [1, 2, 3, 4]

    def test_exact_power_law(self):
        x = np.array([1.0, 10.0, 100.0, 1000.0])
        assert loglog_slope(x, 3.0 * x ** -0.5) == pytest.approx(-0.5)

    def test_too_few_points(self):
        assert math.isnan(loglog_slope([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]))


class TestRateTable:
    def test_logarithmic_case(self):
        overlay = rate_table(1.0, 10 ** 6)
        assert overlay.order == "1/sqrt(log n)"
        assert overlay.exponent is None
        scaled = {n: s * math.sqrt(math.log(n)) for n, s in zip(overlay.checkpoints, overlay.surrogate)}
        assert scaled[1024] / scaled[10 ** 6] == pytest.approx(1.0, abs=0.1)

    def test_power_case(self):
        overlay = rate_table(0.9, 10 ** 6)
        assert overlay.exponent == pytest.approx(-0.05)
        tail = [i for i, n in enumerate(overlay.checkpoints) if n >= 10 ** 5]
        slope = loglog_slope([overlay.checkpoints[i] for i in tail], [overlay.surrogate[i] for i in tail])
        assert -0.1 < slope < -0.04

    @pytest.mark.parametrize('b', [0.81, 0.9, 1.0])
    def test_surrogate_nonincreasing(self, b):
        overlay = rate_table(b, 10 ** 5)
        assert np.all(np.diff(overlay.surrogate) <= 0)


class TestUnDiagnostic:
    def test_noise_free_toy(self):
        scenario = OperatorScenario(ScaledOperator(2), FiniteChain.from_matrix([[1.0]]), x0=np.ones(2))
        report = u_n_diagnostic(SweepConfig(scenario=scenario, replicas=2, horizon=500))
        assert all(row['median_U'] == 0.0 and row['max_U'] == 0.0 for row in report.rows)
        assert report.passed
        assert report.telescope_gap == 0.0

    def test_telescoped_form_matches_recursion(self, affine_scenario):
        report = u_n_diagnostic(SweepConfig(scenario=affine_scenario, replicas=2, horizon=1000))
        assert report.telescope_passed
        assert report.telescope_gap < 1e-8
        assert len(report.records) == 2

    def test_telescoped_sum_by_hand(self):
        table = ScheduleTable.build(StepSchedule(b=1.0), 3)
        increments = [np.array([1.0]), np.array([2.0]), np.array([3.0])]
        U = np.zeros(1)
        for k, inc in enumerate(increments, start=1):
            U = (1 - table.alpha[k]) * U + table.alpha[k] * inc
        np.testing.assert_allclose(telescoped_U(increments, 3, table), U, atol=1e-14)

    def test_td_telescoped_form(self, td_scenario):
        report = u_n_diagnostic(SweepConfig(scenario=td_scenario, replicas=1, horizon=1000))
        assert report.telescope_passed


def _threads():
    return psutil.cpu_count(logical=False) or 1


@pytest.mark.slow
class TestAcceptanceAtScale:
    def test_residual_rate_and_gain_rate(self, td_scenario):
        config = SweepConfig(scenario=td_scenario, replicas=100, horizon=10 ** 6, threads=_threads())
        report = monte_carlo_residuals(config)
        assert -0.75 <= report.slope <= -0.35
        assert report.scaled_bounded
        assert -1.2 <= report.gain_slope <= -0.8

    def test_u_n_vanishes(self, td_scenario):
        config = SweepConfig(scenario=td_scenario, replicas=20, horizon=10 ** 6, threads=_threads())
        report = u_n_diagnostic(config)
        assert report.passed
        assert report.telescope_passed
