import logging

from mdp.model import EvalOracle
from skm.engine import SkmRunConfig, run
from td.average_reward import AugmentedChain, TdRunConfig, check_decomposition_size, run_td

logger = logging.getLogger('Scenarios')


class TdScenario:
    """Average-reward TD on a fixed MDP and policy; residual column is ||v - h(v)||_inf"""

    name = 'td'
    has_gain = True

    def __init__(self, mdp, policy, v0=None, J0=0.0, check_compact_form=False):
        self.mdp = mdp
        self.policy = policy
        self.v0 = v0
        self.J0 = J0
        self.check_compact_form = check_compact_form
        self.oracle = EvalOracle.build(mdp, policy)
        self.augmented = None

    def prepare(self, decomposition=False):
        """Build the augmented chain once, before replicas are dispatched, when a run needs it"""
        if self.augmented is None and (decomposition or self.check_compact_form):
            if decomposition:
                check_decomposition_size(self.mdp, self.policy)
            self.augmented = AugmentedChain.build(self.mdp, self.policy)
            logger.info(f"Augmented chain with {self.augmented.size} triples ready")
        return self

    def run_replica(self, seed, horizon, schedule, checkpoints, decomposition=False,
                    replica=None, record_increments=False):
        config = TdRunConfig(
            horizon=horizon,
            schedule=schedule,
            seed=seed,
            checkpoints=tuple(checkpoints),
            v0=self.v0,
            J0=self.J0,
            decomposition_enabled=decomposition,
            check_compact_form=self.check_compact_form,
            record_increments=record_increments,
        )
        record = run_td(self.mdp, self.policy, config, replica, self.oracle, self.augmented)
        for row in record.rows:
            row['n'] = row['t']
            row['tau_n'] = row['tau_t']
            row['residual'] = row['operator_residual']
        return record


class OperatorScenario:
    """A generic SKM operator driven by a finite chain"""

    name = 'operator'
    has_gain = False

    def __init__(self, op, chain, x0=None, additive_noise=None, norm='sup'):
        self.op = op
        self.chain = chain
        self.x0 = x0
        self.additive_noise = additive_noise
        self.norm = norm

    def prepare(self, decomposition=False):
        return self

    def run_replica(self, seed, horizon, schedule, checkpoints, decomposition=False,
                    replica=None, record_increments=False):
        config = SkmRunConfig(
            horizon=horizon,
            schedule=schedule,
            norm=self.norm,
            additive_noise=self.additive_noise,
            checkpoints=tuple(checkpoints),
            decomposition_enabled=decomposition,
            seed=seed,
            x0=self.x0,
            record_increments=record_increments,
        )
        return run(self.op, self.chain, config, replica)
