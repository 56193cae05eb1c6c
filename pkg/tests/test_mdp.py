"""Tests for the tabular MDP oracle."""

import numpy as np
import pytest

from markov.chain import validate_chain
from mdp.model import (
    EvalOracle,
    PolicySpec,
    TabularMdp,
    bellman_residual,
    bias,
    distance_to_fixed_set,
    gain,
    induced_chain,
    random_ergodic_mdp,
    span,
)
from utils.errors import DimensionMismatch, NotStochastic


def single_action_mdp(P, r):
    P = np.asarray(P, dtype=float)
    return TabularMdp(r=np.asarray(r, dtype=float)[:, None], p=P[:, None, :])


@pytest.fixture
def symmetric_oracle():
    mdp = single_action_mdp([[0.5, 0.5], [0.5, 0.5]], [0.0, 1.0])
    return EvalOracle.build(mdp, PolicySpec.uniform(mdp))


@pytest.fixture
def random_oracle():
    mdp = random_ergodic_mdp(6, 3, seed=7)
    return EvalOracle.build(mdp, PolicySpec.uniform(mdp))


class TestTabularMdp:
    def test_bad_transition_row(self):
        p = np.full((2, 1, 2), 0.5)
        p[1, 0] = [0.4, 0.5]
        with pytest.raises(NotStochastic, match=r"\(1, 0\) sums to 0.9"):
            TabularMdp(r=np.zeros((2, 1)), p=p)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            TabularMdp(r=np.zeros((2, 2)), p=np.full((2, 1, 2), 0.5))

    def test_policy_rows_must_sum_to_one(self):
        with pytest.raises(NotStochastic):
            PolicySpec([[0.5, 0.4]])


class TestInducedChain:
    def test_deterministic_policy_on_deterministic_mdp(self):
        p = np.zeros((3, 2, 3))
        for s in range(3):
            p[s, 0, (s + 1) % 3] = 1.0
            p[s, 1, s] = 1.0
        mdp = TabularMdp(r=np.zeros((3, 2)), p=p)
        P_pi, _ = induced_chain(mdp, PolicySpec.deterministic([0, 0, 1], 2))
        assert set(np.unique(P_pi)) <= {0.0, 1.0}
        np.testing.assert_array_equal(P_pi.sum(axis=1), np.ones(3))

    def test_uniform_policy_averages_rows(self):
        p = np.array([[[0.2, 0.8], [0.6, 0.4]], [[0.5, 0.5], [0.1, 0.9]]])
        mdp = TabularMdp(r=np.zeros((2, 2)), p=p)
        P_pi, _ = induced_chain(mdp, PolicySpec.uniform(mdp))
        np.testing.assert_allclose(P_pi, (p[:, 0] + p[:, 1]) / 2)

    def test_single_action_rewards(self):
        mdp = single_action_mdp([[0.5, 0.5], [0.5, 0.5]], [0.0, 1.0])
        _, r_pi = induced_chain(mdp, PolicySpec.uniform(mdp))
        np.testing.assert_array_equal(r_pi, [0.0, 1.0])

    def test_policy_shape_mismatch(self):
        mdp = random_ergodic_mdp(3, 2, seed=0)
        with pytest.raises(DimensionMismatch):
            induced_chain(mdp, PolicySpec(np.full((3, 3), 1 / 3)))


class TestGainAndBias:
    def test_symmetric(self, symmetric_oracle):
        assert gain(symmetric_oracle) == pytest.approx(0.5, abs=1e-14)
        np.testing.assert_allclose(bias(symmetric_oracle, symmetric_oracle.chain), [-0.25, 0.25], atol=1e-14)

    def test_skewed_chain(self):
        mdp = single_action_mdp([[0.9, 0.1], [0.5, 0.5]], [0.0, 1.0])
        oracle = EvalOracle.build(mdp, PolicySpec.uniform(mdp))
        assert gain(oracle) == pytest.approx(1 / 6, abs=1e-14)
        assert oracle.J_bar == pytest.approx(1 / 6, abs=1e-14)

    def test_constant_rewards(self):
        mdp = single_action_mdp([[0.3, 0.7], [0.6, 0.4]], [2.5, 2.5])
        oracle = EvalOracle.build(mdp, PolicySpec.uniform(mdp))
        assert gain(oracle) == pytest.approx(2.5, abs=1e-14)
        np.testing.assert_allclose(oracle.v_pi, 0.0, atol=1e-14)

    def test_random_mdp_bellman_equation(self, random_oracle):
        assert bellman_residual(random_oracle.v_pi, random_oracle.J_bar, random_oracle) < 1e-10
        assert abs(random_oracle.d_mu @ random_oracle.v_pi) < 1e-12


class TestResiduals:
    def test_offset_invariance(self, random_oracle):
        v = random_oracle.v_pi + 7.0
        assert bellman_residual(v, random_oracle.J_bar, random_oracle) < 1e-10

    def test_gain_shift(self, random_oracle):
        residual = bellman_residual(random_oracle.v_pi, random_oracle.J_bar + 1.0, random_oracle)
        assert residual == pytest.approx(1.0, abs=1e-10)

    def test_distance_on_the_line(self, random_oracle):
        assert distance_to_fixed_set(random_oracle.v_pi + 3.0, random_oracle) == pytest.approx(0.0, abs=1e-12)

    def test_distance_is_half_span(self, symmetric_oracle):
        v = symmetric_oracle.v_pi + np.array([1.0, -1.0])
        assert distance_to_fixed_set(v, symmetric_oracle) == pytest.approx(1.0)

        mdp = random_ergodic_mdp(3, 1, seed=2)
        oracle = EvalOracle.build(mdp, PolicySpec.uniform(mdp))
        assert distance_to_fixed_set(oracle.v_pi + np.array([2.0, 0.0, 1.0]), oracle) == pytest.approx(1.0)

    def test_span(self):
        assert span(np.array([2.0, 0.0, 1.0])) == 2.0

    def test_wrong_length(self, symmetric_oracle):
        with pytest.raises(DimensionMismatch):
            bellman_residual(np.zeros(3), 0.0, symmetric_oracle)


class TestRandomErgodicMdp:
    def test_full_mixing_is_uniform(self):
        mdp = random_ergodic_mdp(4, 2, seed=1, mixing=1.0)
        np.testing.assert_allclose(mdp.p, 0.25)

    def test_passes_chain_validation(self):
        for seed in range(10):
            mdp = random_ergodic_mdp(5, 3, seed=seed)
            P_pi, _ = induced_chain(mdp, PolicySpec.deterministic([seed % 3] * 5, 3))
            validate_chain(P_pi)

    def test_same_seed_same_mdp(self):
        first, second = random_ergodic_mdp(4, 2, seed=3), random_ergodic_mdp(4, 2, seed=3)
        np.testing.assert_array_equal(first.p, second.p)
        np.testing.assert_array_equal(first.r, second.r)

    def test_mixing_range(self):
        with pytest.raises(ValueError):
            random_ergodic_mdp(3, 2, seed=0, mixing=0.0)
