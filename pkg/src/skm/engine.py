"""
Stochastic Krasnoselskii-Mann iteration driven by a finite Markov chain,

    x_{n+1} = x_n + alpha_{n+1} (H(x_n, Y_{n+1}) - x_n + e1_{n+1}),

with an optional diagnostic that splits the Markovian noise through the
Poisson equation into M_{n+1}, e2_{n+1}, e3_{n+1} and tracks the
aggregate noise recursion U_n.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from markov.chain import ChainState, sample_path, solve_poisson
from schedules.step_size import ScheduleTable, StepSchedule, geometric_checkpoints
from skm.operators import vector_norm
from utils.errors import DimensionMismatch, LabError, NonFiniteIterate

RECONSTRUCTION_TOL = 1e-9
BOUND_TOL = 1e-9

ENGINE_COLUMNS = ('replica', 'n', 'tau_n', 'residual', 'norm_U', 'norm_M', 'norm_e1', 'norm_e2', 'norm_e3')

logger = logging.getLogger('SkmEngine')


class IdentityViolation(LabError):
    pass


@dataclass(frozen=True)
class SkmRunConfig:
    horizon: int
    schedule: StepSchedule = field(default_factory=StepSchedule)
    norm: str = 'sup'
    additive_noise: Any = None
    checkpoints: Optional[tuple] = None
    decomposition_enabled: bool = False
    seed: int = 0
    x0: Optional[tuple] = None
    y0: Optional[int] = None
    check_identities: bool = True
    record_increments: bool = False
    observer: Optional[Callable] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise DimensionMismatch(f"horizon must be >= 1, got {self.horizon}")
        if self.norm not in ('sup', 'euclidean'):
            raise ValueError(f"norm must be 'sup' or 'euclidean', got {self.norm!r}")
        if self.checkpoints is not None:
            if any(not (1 <= c <= self.horizon) for c in self.checkpoints):
                raise ValueError(f"checkpoints must lie in [1, {self.horizon}]")

    def checkpoint_grid(self):
        if self.checkpoints is not None:
            return sorted(set(int(c) for c in self.checkpoints))
        return geometric_checkpoints(self.horizon)


@dataclass
class TrajectoryRecord:
    replica: Optional[int]
    seed: int
    rows: list = field(default_factory=list)
    final_x: Any = None
    extras: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([row.get(name) for row in self.rows], dtype=float)

    @property
    def checkpoints(self):
        return [row['n'] for row in self.rows]


# ===============================
# Single steps
# ===============================
def skm_step(x, y_next, alpha, e1, op):
    """x + alpha (H(x, y_next) - x + e1)"""
    x = np.asarray(x, dtype=float)
    op.check_dimension(x)
    if e1 is None:
        e1 = np.zeros_like(x)
    elif np.shape(e1) != x.shape:
        raise DimensionMismatch(f"Additive noise has shape {np.shape(e1)}, iterate has {x.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"Step size must lie in [0, 1], got {alpha}")
    return x + alpha * (op.evaluate(x, y_next) - x + e1)


def residual(x, op, d_mu, norm='sup'):
    """||x - h(x)||"""
    x = np.asarray(x, dtype=float)
    op.check_dimension(x)
    return vector_norm(x - op.expected(x, d_mu), norm)


def decompose_noise(x_n, x_next, y_next, y_after, op, chain, nu_n=None, nu_next=None):
    """(M_{n+1}, e2_{n+1}, e3_{n+1}) for the step x_n -> x_{n+1} that consumed Y_{n+1} = y_next.

    y_after is Y_{n+2}. nu_n / nu_next may be passed in when already solved.
    """
    if nu_n is None:
        nu_n = solve_poisson(op.evaluate_all(x_n), chain)
    if nu_next is None:
        nu_next = solve_poisson(op.evaluate_all(x_next), chain)
    if nu_n.shape != nu_next.shape:
        raise DimensionMismatch(f"Poisson solutions disagree in shape: {nu_n.shape} vs {nu_next.shape}")

    M = nu_n[y_after] - chain.P[y_next] @ nu_n
    e2 = nu_n[y_next] - nu_next[y_after]
    e3 = nu_next[y_after] - nu_n[y_after]
    return M, e2, e3


def update_U(U_n, alpha_next, M_next, xi_next):
    """(1 - alpha) U_n + alpha (M + xi)"""
    return (1.0 - alpha_next) * U_n + alpha_next * (M_next + xi_next)


class DecompositionTrace:
    """Running U_n and its telescoped parts M_bar, e1_bar, e2_bar, e3_bar"""

    PARTS = ('M', 'e1', 'e2', 'e3')

    def __init__(self, dimension, norm='sup', record_increments=False):
        self.norm = norm
        self.increments = [] if record_increments else None
        self.U_at = {}
        self.U = np.zeros(dimension)
        self.bars = {part: np.zeros(dimension) for part in self.PARTS}
        self.latest = {part: np.zeros(dimension) for part in self.PARTS}
        self.sum_alpha_U = 0.0
        self.history = []

    def advance(self, alpha_next, M, e1, e2, e3):
        self.sum_alpha_U += alpha_next * vector_norm(self.U, self.norm)
        self.U = update_U(self.U, alpha_next, M, e1 + e2 + e3)
        for part, value in zip(self.PARTS, (M, e1, e2, e3)):
            self.bars[part] = (1.0 - alpha_next) * self.bars[part] + alpha_next * value
            self.latest[part] = value
        if self.increments is not None:
            self.increments.append(M + e1 + e2 + e3)

    def parts_gap(self):
        """||U_n - (M_bar + e1_bar + e2_bar + e3_bar)||"""
        return vector_norm(self.U - sum(self.bars.values()), self.norm)

    def snapshot(self, n):
        row = {
            'norm_U': vector_norm(self.U, self.norm),
            'norm_M': vector_norm(self.latest['M'], self.norm),
            'norm_e1': vector_norm(self.latest['e1'], self.norm),
            'norm_e2': vector_norm(self.latest['e2'], self.norm),
            'norm_e3': vector_norm(self.latest['e3'], self.norm),
            'sum_alpha_U': self.sum_alpha_U,
        }
        for part in self.PARTS:
            row[f'norm_{part}_bar'] = vector_norm(self.bars[part], self.norm)
        self.history.append((n, row))
        if self.increments is not None:
            self.U_at[n] = self.U.copy()
        return row


# ===============================
# Full run
# ===============================
def _initial_iterate(op, config):
    if config.x0 is None:
        return np.zeros(op.dimension)
    x0 = np.array(config.x0, dtype=float)
    op.check_dimension(x0)
    return x0


def run(op, chain, config, replica=None):
    """Iterate for config.horizon steps and record checkpoints"""
    if op.n_noise_states != chain.n_states:
        raise DimensionMismatch(
            f"Operator expects {op.n_noise_states} noise states, chain has {chain.n_states}"
        )

    seed_seq = np.random.SeedSequence(config.seed)
    chain_seed, noise_seed, check_seed = seed_seq.spawn(3)

    violations = op.lipschitz_spot_check(np.random.default_rng(check_seed), config.norm)
    if violations:
        logger.warning(
            f"Lipschitz spot-check found {len(violations)} violating pairs out of 100; "
            f"worst ||H(x,y)-H(x',y)|| = {max(v[0] for v in violations):.6g}"
        )

    N = config.horizon
    table = ScheduleTable.build(config.schedule, N)
    alphas = table.alpha.tolist()
    checkpoints = set(config.checkpoint_grid())

    x = _initial_iterate(op, config)
    norm_x0 = vector_norm(x, config.norm)
    c_H = op.growth_constant(config.norm)

    noise = copy.deepcopy(config.additive_noise)
    noise_rng = np.random.default_rng(noise_seed)
    zero_noise = np.zeros(op.dimension)

    start = ChainState.start(chain, chain_seed, config.y0)
    # path[i] = Y_{i+1}; one extra state is needed for the decomposition lookahead
    path, _ = sample_path(start, chain, N + 1)
    path = path.tolist()

    trace = DecompositionTrace(op.dimension, config.norm, config.record_increments) if config.decomposition_enabled else None
    nu_current = solve_poisson(op.evaluate_all(x), chain) if trace else None

    record = TrajectoryRecord(replica=replica, seed=config.seed)
    sum_alpha = 0.0
    sum_alpha_e1 = 0.0

    for n in range(N):
        a = alphas[n + 1]
        y_next = path[n]
        e1 = noise(n + 1, x, y_next, noise_rng) if noise is not None else zero_noise

        x_next = skm_step(x, y_next, a, e1, op)
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteIterate(n + 1, replica)

        sum_alpha += a
        sum_alpha_e1 += a * vector_norm(e1, config.norm)

        if trace is not None:
            y_after = path[n + 1]
            nu_next = solve_poisson(op.evaluate_all(x_next), chain)
            M, e2, e3 = decompose_noise(x, x_next, y_next, y_after, op, chain, nu_current, nu_next)
            if config.check_identities:
                H = op.evaluate(x, y_next)
                h = op.expected(x, chain.d_mu)
                gap = np.max(np.abs(H - h - (M + e2 + e3)))
                if gap > RECONSTRUCTION_TOL * max(1.0, np.max(np.abs(H))):
                    raise IdentityViolation(f"Noise reconstruction off by {gap:.3g} at step {n + 1}")
            trace.advance(a, M, e1, e2, e3)
            nu_current = nu_next

        x = x_next

        if n + 1 in checkpoints:
            record.rows.append(_checkpoint_row(
                n + 1, x, op, chain, config, table, trace, replica,
                norm_x0, c_H, sum_alpha, sum_alpha_e1, noise
            ))

    record.final_x = x
    if trace is not None:
        record.extras['trace'] = trace
    return record


def _checkpoint_row(n, x, op, chain, config, table, trace, replica,
                    norm_x0, c_H, sum_alpha, sum_alpha_e1, noise):
    norm = config.norm
    res = residual(x, op, chain.d_mu, norm)

    row = {
        'replica': replica,
        'n': n,
        'tau_n': float(table.tau[n]),
        'residual': res,
        'norm_U': None,
        'norm_M': None,
        'norm_e1': None,
        'norm_e2': None,
        'norm_e3': None,
        'norm_x': vector_norm(x, norm),
        'sum_alpha_e1': sum_alpha_e1,
    }

    growth_bound = norm_x0 + c_H * sum_alpha + sum_alpha_e1
    if config.check_identities and row['norm_x'] > growth_bound * (1.0 + BOUND_TOL) + BOUND_TOL:
        raise IdentityViolation(f"||x_n|| = {row['norm_x']:.6g} exceeds growth bound {growth_bound:.6g} at n = {n}")

    if trace is not None:
        row.update(trace.snapshot(n))
        if config.check_identities:
            gap = trace.parts_gap()
            if gap > RECONSTRUCTION_TOL * max(1.0, row['norm_U']):
                raise IdentityViolation(f"U_n differs from its telescoped parts by {gap:.3g} at n = {n}")

            # z_n = x_n - U_n: ||x - h(x)|| <= ||z - h(z)|| + 2 ||U||
            z = x - trace.U
            shifted = residual(z, op, chain.d_mu, norm)
            row['shifted_residual'] = shifted
            if res > shifted + 2.0 * row['norm_U'] + BOUND_TOL * max(1.0, res):
                raise IdentityViolation(f"Shifted residual bound fails at n = {n}")

    if config.observer is not None:
        row.update(config.observer(n, x, noise))
    return row
