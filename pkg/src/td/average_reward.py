"""
Tabular average-reward TD,

    J_{t+1} = J_t + beta_{t+1} (R_{t+1} - J_t)
    v_{t+1}(S_t) = v_t(S_t) + alpha_{t+1} (R_{t+1} - J_t + v_t(S_{t+1}) - v_t(S_t)),

and its compact form over the augmented chain Y_{t+1} = (S_t, A_t, S_{t+1}):

    v_{t+1} = v_t + alpha_{t+1} (H(v_t, Y_{t+1}) - v_t + eps_{t+1}),
    eps_{t+1}(s) = 1{s = S_t} (J_bar - J_t).

The sign of eps is the one that makes the two forms agree; only
|J_bar - J_t| enters the convergence argument.
"""

import math
import logging
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from markov.chain import FiniteChain
from mdp.model import EvalOracle, bellman_residual, distance_to_fixed_set
from schedules.step_size import ScheduleTable, StepSchedule, geometric_checkpoints
from skm.engine import IdentityViolation, SkmRunConfig, TrajectoryRecord, run
from skm.operators import SkmOperator
from utils.errors import ConfigValidationError, IndexOutOfRange, NonFiniteIterate

MAX_DECOMPOSITION_TRIPLES = 2000
COMPACT_FORM_TOL = 1e-12
RUNNING_MEAN_TOL = 1e-9

TD_COLUMNS = ('replica', 't', 'tau_t', 'bellman_residual', 'dist_V_star', 'abs_J_err', 'operator_residual')

logger = logging.getLogger('AverageRewardTD')


# ===============================
# Augmented chain
# ===============================
@dataclass(frozen=True)
class AugmentedChain:
    triples: tuple
    index: dict
    s0: np.ndarray
    a0: np.ndarray
    s1: np.ndarray
    chain: FiniteChain

    @classmethod
    def build(cls, mdp, policy):
        pi, p = policy.pi, mdp.p
        triples = tuple(
            (s, a, s_next)
            for s in range(mdp.n_states)
            for a in range(mdp.n_actions) if pi[s, a] > 0
            for s_next in range(mdp.n_states) if p[s, a, s_next] > 0
        )
        index = {y: i for i, y in enumerate(triples)}
        s0 = np.array([y[0] for y in triples], dtype=np.int64)
        a0 = np.array([y[1] for y in triples], dtype=np.int64)
        s1 = np.array([y[2] for y in triples], dtype=np.int64)

        # P((s,a,s'), (u,b,u')) = 1{u = s'} pi(b|u) p(u'|u,b)
        successor_law = pi[s0, a0] * p[s0, a0, s1]
        P = (s1[:, None] == s0[None, :]) * successor_law[None, :]

        logger.debug(f"Augmented chain with {len(triples)} triples")
        return cls(triples, index, s0, a0, s1, FiniteChain.from_matrix(P))

    @property
    def size(self):
        return len(self.triples)

    def stationary_product(self, oracle, policy, mdp):
        """d(s) pi(a|s) p(s'|s,a) for every triple"""
        return oracle.d_mu[self.s0] * policy.pi[self.s0, self.a0] * mdp.p[self.s0, self.a0, self.s1]


class TdOperator(SkmOperator):
    """H(v, (s0,a0,s1))[s] = 1{s = s0} (r(s0,a0) - J_bar + v(s1) - v(s0)) + v(s)"""

    def __init__(self, oracle, augmented):
        self.oracle = oracle
        self.augmented = augmented
        self.dimension = oracle.r_pi.shape[0]
        self.n_noise_states = augmented.size
        self.triple_rewards = oracle.rewards[augmented.s0, augmented.a0] - oracle.J_bar

    def evaluate(self, x, y):
        out = np.array(x, dtype=float)
        s0, s1 = self.augmented.s0[y], self.augmented.s1[y]
        out[s0] += self.triple_rewards[y] + x[s1] - x[s0]
        return out

    def evaluate_all(self, x):
        x = np.asarray(x, dtype=float)
        aug = self.augmented
        out = np.tile(x, (aug.size, 1))
        out[np.arange(aug.size), aug.s0] += self.triple_rewards + x[aug.s1] - x[aug.s0]
        return out

    def expected(self, x, d_mu=None):
        """v + diag(d_mu)(r_pi - J_bar e + P_pi v - v) over the base chain"""
        x = np.asarray(x, dtype=float)
        oracle = self.oracle
        return x + oracle.d_mu * (oracle.r_pi - oracle.J_bar + oracle.P_pi @ x - x)


def td_operator(v, y, oracle):
    """H(v, y) for a triple y = (s0, a0, s1), using the exact gain J_bar"""
    s0, a0, s1 = y
    v = np.asarray(v, dtype=float)
    out = v.copy()
    out[s0] += oracle.rewards[s0, a0] - oracle.J_bar + v[s1] - v[s0]
    return out


# ===============================
# Online update
# ===============================
@dataclass(frozen=True)
class TdState:
    v: np.ndarray
    J: float = 0.0
    t: int = 0

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        object.__setattr__(self, 'v', v)
        if not (np.all(np.isfinite(v)) and math.isfinite(self.J)):
            raise NonFiniteIterate(self.t)


def td_step(state, transition, alpha_next, beta_next):
    """One TD update on (s_t, a_t, r_{t+1}, s_{t+1}); the v update reads the pre-update J_t"""
    s, _, reward, s_next = transition
    n = state.v.shape[0]
    if not (0 <= s < n and 0 <= s_next < n):
        raise IndexOutOfRange(f"Transition ({s} -> {s_next}) outside the {n} states")
    if not (0.0 <= alpha_next <= 1.0 and 0.0 <= beta_next <= 1.0):
        raise ValueError(f"Rates must lie in [0, 1], got alpha={alpha_next}, beta={beta_next}")

    v = state.v.copy()
    v[s] += alpha_next * (reward - state.J + state.v[s_next] - state.v[s])
    return TdState(v, gain_step(state.J, reward, beta_next), state.t + 1)


def gain_step(J, reward, beta_next):
    """J_{t+1} = J_t + beta_{t+1} (R_{t+1} - J_t)"""
    return J + beta_next * (reward - J)


def epsilon_noise(state, s_t, oracle):
    """Single nonzero entry at s_t equal to J_bar - J_t"""
    if not 0 <= s_t < state.v.shape[0]:
        raise IndexOutOfRange(f"State {s_t} outside the {state.v.shape[0]} states")
    eps = np.zeros_like(state.v)
    eps[s_t] = oracle.J_bar - state.J
    return eps


class GainEstimatorNoise:
    """Additive-noise hook: emits eps_{t+1} and then advances J with beta_t = 1/t"""

    def __init__(self, oracle, augmented, J0=0.0):
        self.oracle = oracle
        self.rewards = oracle.rewards
        self.s0 = augmented.s0.tolist()
        self.a0 = augmented.a0.tolist()
        self.J = float(J0)
        self.reward_sum = 0.0

    def __call__(self, n, x, y_next, rng):
        s, a = self.s0[y_next], self.a0[y_next]
        eps = epsilon_noise(TdState(x, self.J, n - 1), s, self.oracle)
        reward = float(self.rewards[s, a])
        self.J = gain_step(self.J, reward, 1.0 / n)
        self.reward_sum += reward
        return eps


class TdObserver:
    """Adds the TD columns to an engine checkpoint row"""

    def __init__(self, oracle):
        self.oracle = oracle

    def __call__(self, n, x, noise):
        return {
            't': n,
            'bellman_residual': bellman_residual(x, self.oracle.J_bar, self.oracle),
            'dist_V_star': distance_to_fixed_set(x, self.oracle),
            'abs_J_err': abs(noise.J - self.oracle.J_bar),
            'J': noise.J,
        }


# ===============================
# Full run
# ===============================
@dataclass(frozen=True)
class TdRunConfig:
    horizon: int
    schedule: StepSchedule = field(default_factory=lambda: StepSchedule(b=0.9))
    seed: int = 0
    checkpoints: Optional[tuple] = None
    v0: Optional[tuple] = None
    J0: float = 0.0
    decomposition_enabled: bool = False
    check_compact_form: bool = False
    check_running_mean: bool = True
    record_increments: bool = False

    def checkpoint_grid(self):
        if self.checkpoints is not None:
            return sorted(set(int(c) for c in self.checkpoints))
        return geometric_checkpoints(self.horizon)


def operator_residual(v, oracle):
    """||v - h(v)||_inf = max_s d_mu(s) |Bellman residual at s|"""
    v = np.asarray(v, dtype=float)
    return float(np.max(oracle.d_mu * np.abs(oracle.r_pi - oracle.J_bar + oracle.P_pi @ v - v)))


def _initial_row(v, J, oracle, replica):
    return {
        'replica': replica,
        't': 0,
        'tau_t': 0.0,
        'bellman_residual': bellman_residual(v, oracle.J_bar, oracle),
        'dist_V_star': distance_to_fixed_set(v, oracle),
        'abs_J_err': abs(J - oracle.J_bar),
        'operator_residual': operator_residual(v, oracle),
    }


def simulate_transitions(mdp, policy, seed, horizon):
    """Yield (S_t, A_t, R_{t+1}, S_{t+1}) for t = 0 .. horizon - 1, starting from S_0 ~ p0"""
    rng = np.random.default_rng(seed)
    n_states, n_actions = mdp.n_states, mdp.n_actions
    pi_cdf = np.cumsum(policy.pi, axis=1).tolist()
    p_cdf = np.cumsum(mdp.p, axis=2).tolist()
    p0_cdf = np.cumsum(mdp.p0).tolist()
    rewards = mdp.r.tolist()

    s = min(bisect_right(p0_cdf, rng.random()), n_states - 1)
    block = 65536
    draws = []
    for t in range(horizon):
        if t % block == 0:
            draws = rng.random((min(block, horizon - t), 2)).tolist()
        u_action, u_next = draws[t % block]

        a = min(bisect_right(pi_cdf[s], u_action), n_actions - 1)
        s_next = min(bisect_right(p_cdf[s][a], u_next), n_states - 1)
        yield s, a, rewards[s][a], s_next
        s = s_next


def check_decomposition_size(mdp, policy):
    """Count augmented triples before building their dense chain"""
    n_triples = int(np.count_nonzero((policy.pi > 0)[:, :, None] & (mdp.p > 0)))
    if n_triples > MAX_DECOMPOSITION_TRIPLES:
        raise ConfigValidationError(
            'run.decomposition',
            f"augmented chain has {n_triples} triples; decomposition is limited to {MAX_DECOMPOSITION_TRIPLES}"
        )
    return n_triples


def run_td(mdp, policy, config, replica=None, oracle=None, augmented=None):
    """Simulate the MDP under the policy and run average-reward TD with checkpoints.

    augmented may be passed in to reuse one AugmentedChain across replicas.
    """
    if config.schedule.kind != 'primary_alpha':
        raise ConfigValidationError('schedule.kind', "TD needs the primary alpha schedule; beta_t = 1/t is fixed")
    oracle = oracle or EvalOracle.build(mdp, policy)
    v0 = np.zeros(mdp.n_states) if config.v0 is None else np.array(config.v0, dtype=float)

    if config.decomposition_enabled:
        return _run_td_decomposed(mdp, policy, config, replica, oracle, v0, augmented)

    N = config.horizon
    table = ScheduleTable.build(config.schedule, N)
    alphas = table.alpha.tolist()
    checkpoints = set(config.checkpoint_grid())

    op = None
    if config.check_compact_form:
        augmented = augmented or AugmentedChain.build(mdp, policy)
        op = TdOperator(oracle, augmented)

    state = TdState(v0, float(config.J0))
    reward_sum = 0.0

    record = TrajectoryRecord(replica=replica, seed=config.seed)
    record.extras['initial'] = _initial_row(v0, state.J, oracle, replica)

    for t, transition in enumerate(simulate_transitions(mdp, policy, config.seed, N)):
        s, a, reward, s_next = transition
        alpha_next = alphas[t + 1]

        if op is not None:
            eps = epsilon_noise(state, s, oracle)
            compact = state.v + alpha_next * (op.evaluate(state.v, augmented.index[(s, a, s_next)]) - state.v + eps)

        try:
            state = td_step(state, transition, alpha_next, 1.0 / (t + 1))
        except NonFiniteIterate as exc:
            raise exc.with_replica(replica)
        reward_sum += reward

        if op is not None:
            gap = float(np.max(np.abs(compact - state.v)))
            if gap > COMPACT_FORM_TOL * max(1.0, float(np.max(np.abs(compact)))):
                raise IdentityViolation(f"Compact form differs from the online update by {gap:.3g} at t = {t + 1}")

        if t + 1 in checkpoints:
            J = state.J
            if config.check_running_mean and abs(J - reward_sum / (t + 1)) > RUNNING_MEAN_TOL * max(1.0, abs(J)):
                raise IdentityViolation(f"J_t drifted from the running reward mean at t = {t + 1}")
            record.rows.append({
                'replica': replica,
                't': t + 1,
                'tau_t': float(table.tau[t + 1]),
                'bellman_residual': bellman_residual(state.v, oracle.J_bar, oracle),
                'dist_V_star': distance_to_fixed_set(state.v, oracle),
                'abs_J_err': abs(J - oracle.J_bar),
                'operator_residual': operator_residual(state.v, oracle),
                'J': J,
            })

    record.final_x = state.v
    record.extras['final_J'] = state.J
    return record


def _run_td_decomposed(mdp, policy, config, replica, oracle, v0, augmented=None):
    if augmented is None:
        check_decomposition_size(mdp, policy)
        augmented = AugmentedChain.build(mdp, policy)

    engine_config = SkmRunConfig(
        horizon=config.horizon,
        schedule=config.schedule,
        norm='sup',
        additive_noise=GainEstimatorNoise(oracle, augmented, config.J0),
        checkpoints=tuple(config.checkpoint_grid()),
        decomposition_enabled=True,
        seed=config.seed,
        x0=tuple(v0),
        observer=TdObserver(oracle),
        record_increments=config.record_increments,
    )
    record = run(TdOperator(oracle, augmented), augmented.chain, engine_config, replica)
    for row in record.rows:
        row['tau_t'] = row['tau_n']
        row['operator_residual'] = row['residual']
    record.extras['initial'] = _initial_row(v0, config.J0, oracle, replica)
    return record


def with_seed(config, seed):
    return replace(config, seed=seed)
