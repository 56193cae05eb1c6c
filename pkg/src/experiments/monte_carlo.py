"""
Seeded Monte Carlo harnesses over independent replicas.

Replica i uses seed base_seed + i. Replicas may run in worker processes;
results are sorted by replica id and reduced with exactly rounded sums,
so every aggregate is independent of scheduling and of replica order.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from schedules.step_size import ScheduleTable, StepSchedule, geometric_checkpoints
from utils.errors import ConfigValidationError, IndexOutOfRange, NonFiniteIterate

MIN_TAIL_POINTS = 4
TELESCOPE_HORIZON = 1000
TELESCOPE_TOL = 1e-8
U_DECAY_FACTOR = 10.0

logger = logging.getLogger('Experiments')


@dataclass(frozen=True)
class SweepConfig:
    scenario: Any
    replicas: int = 20
    horizon: int = 10 ** 6
    b_values: tuple = (0.9,)
    base_seed: int = 0
    checkpoint_start: int = 16
    checkpoint_ratio: float = 2.0
    tail_fraction: float = 0.1
    threads: int = 1
    scaled_growth_limit: float = 1.5

    def __post_init__(self):
        if self.replicas < 1:
            raise ConfigValidationError('sweep.replicas', f"need at least one replica, got {self.replicas}")
        if self.horizon < 1:
            raise ConfigValidationError('run.horizon', f"must be >= 1, got {self.horizon}")
        if self.checkpoint_ratio <= 1.0:
            raise ConfigValidationError('sweep.checkpoint_ratio', f"must exceed 1, got {self.checkpoint_ratio}")
        if not 0.0 < self.tail_fraction < 1.0:
            raise ConfigValidationError('sweep.tail_fraction', f"must lie in (0, 1), got {self.tail_fraction}")
        if not self.b_values:
            raise ConfigValidationError('sweep.b_values', "at least one b is required")
        for b in self.b_values:
            StepSchedule(b=b)

    def checkpoints(self):
        return geometric_checkpoints(self.horizon, self.checkpoint_start, self.checkpoint_ratio)

    def seed(self, replica):
        return self.base_seed + replica


@dataclass
class RateReport:
    b: float
    horizon: int
    replicas: int
    rows: list = field(default_factory=list)
    slope: float = float('nan')
    tail_start: int = 0
    sup_scaled: float = float('nan')
    scaled_at_tail_start: float = float('nan')
    gain_slope: float = None
    convergence: dict = None
    growth_limit: float = 1.5

    @property
    def scaled_bounded(self):
        return self.sup_scaled <= self.growth_limit * self.scaled_at_tail_start

    def summary(self):
        line = (f"b={self.b} R={self.replicas} N={self.horizon}: slope={self.slope:.4f} "
                f"sup(mean*sqrt(tau))={self.sup_scaled:.6g} (decade start {self.scaled_at_tail_start:.6g})")
        if self.gain_slope is not None:
            line += f" gain slope={self.gain_slope:.4f}"
        return line


# ===============================
# Replica execution
# ===============================
def _run_replica(task):
    scenario, seed, horizon, schedule, checkpoints, decomposition, replica, record_increments = task
    try:
        return scenario.run_replica(
            seed, horizon, schedule, checkpoints,
            decomposition=decomposition, replica=replica, record_increments=record_increments,
        )
    except NonFiniteIterate as exc:
        raise exc.with_replica(replica)


def run_replicas(config, b, decomposition=False, record_increments=False, horizon=None, checkpoints=None):
    """TrajectoryRecords of every replica, sorted by replica id"""
    schedule = StepSchedule(b=b)
    horizon = horizon or config.horizon
    checkpoints = tuple(checkpoints or config.checkpoints())
    config.scenario.prepare(decomposition)
    tasks = [
        (config.scenario, config.seed(i), horizon, schedule, checkpoints, decomposition, i, record_increments)
        for i in range(config.replicas)
    ]

    workers = max(1, min(config.threads, config.replicas))
    if workers == 1:
        records = [_run_replica(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(_run_replica, tasks))

    logger.info(f"Finished {len(records)} replicas (b={b}, N={horizon}, workers={workers})")
    return sorted(records, key=lambda record: record.replica)


# ===============================
# Aggregation
# ===============================
def _mean(values):
    if all(v == values[0] for v in values):
        return values[0]
    return math.fsum(values) / len(values)


def _std(values, mean):
    if len(values) < 2 or all(v == values[0] for v in values):
        return 0.0
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))


def tail_window(checkpoints, horizon, tail_fraction=0.1):
    """Indices of checkpoints with n >= tail_fraction * horizon, widened to at least four"""
    start = tail_fraction * horizon
    idx = [i for i, n in enumerate(checkpoints) if n >= start]
    if len(idx) < MIN_TAIL_POINTS:
        idx = list(range(max(0, len(checkpoints) - MIN_TAIL_POINTS), len(checkpoints)))
    return idx


def loglog_slope(x, y):
    """Least-squares slope of log y against log x; nan when fewer than four usable points"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if mask.sum() < MIN_TAIL_POINTS:
        return float('nan')
    slope, _ = np.polyfit(np.log(x[mask]), np.log(y[mask]), 1)
    return float(slope)


def aggregate_residuals(records, b, horizon, tail_fraction=0.1, growth_limit=1.5):
    if not records:
        raise IndexOutOfRange("no replicas to aggregate")
    checkpoints = records[0].checkpoints
    columns = {name: np.stack([record.column(name) for record in records])
               for name in ('residual', 'tau_n')}
    has_gain = 'abs_J_err' in records[0].rows[0] if records[0].rows else False

    report = RateReport(b=b, horizon=horizon, replicas=len(records), growth_limit=growth_limit)
    for j, n in enumerate(checkpoints):
        values = columns['residual'][:, j].tolist()
        mean = _mean(values)
        tau_n = float(columns['tau_n'][0, j])
        row = {
            'n': n,
            'tau_n': tau_n,
            'mean_residual': mean,
            'std_residual': _std(values, mean),
            'median_residual': float(np.median(values)),
            'count': len(values),
            'scaled_mean': mean * math.sqrt(tau_n),
            'surrogate': 1.0 / math.sqrt(tau_n) if tau_n > 0 else float('inf'),
        }
        if has_gain:
            row['mean_sq_gain_err'] = _mean([record.rows[j]['abs_J_err'] ** 2 for record in records])
        report.rows.append(row)

    tail = tail_window(checkpoints, horizon, tail_fraction)
    report.tail_start = checkpoints[tail[0]] if tail else 0
    report.slope = loglog_slope(
        [report.rows[i]['tau_n'] for i in tail], [report.rows[i]['mean_residual'] for i in tail]
    )
    if tail:
        report.scaled_at_tail_start = report.rows[tail[0]]['scaled_mean']
        report.sup_scaled = max(report.rows[i]['scaled_mean'] for i in tail)
    if has_gain:
        report.gain_slope = loglog_slope(
            [report.rows[i]['n'] for i in tail], [report.rows[i]['mean_sq_gain_err'] for i in tail]
        )
        report.convergence = convergence_summary(records)
    return report


def convergence_summary(records, factor=10.0):
    """Share of replicas whose distance to V_* fell below initial/factor and
    share whose final checkpoint is the closest one"""
    shrunk = 0
    final_is_min = 0
    for record in records:
        distances = [row['dist_V_star'] for row in record.rows]
        initial = record.extras['initial']['dist_V_star']
        if distances[-1] < initial / factor:
            shrunk += 1
        if distances[-1] <= min(distances):
            final_is_min += 1
    return {
        'replicas': len(records),
        'shrunk_fraction': shrunk / len(records),
        'final_is_min_fraction': final_is_min / len(records),
    }


# ===============================
# Operations
# ===============================
def monte_carlo_residuals(config, b=None):
    """RateReport for one b (the first configured b by default)"""
    b = config.b_values[0] if b is None else b
    records = run_replicas(config, b)
    report = aggregate_residuals(records, b, config.horizon, config.tail_fraction, config.scaled_growth_limit)
    logger.info(report.summary())
    return report


def rate_sweep(config):
    return [monte_carlo_residuals(config, b) for b in config.b_values]


@dataclass(frozen=True)
class RateOverlay:
    b: float
    checkpoints: list
    tau: list
    surrogate: list
    order: str
    exponent: float


def rate_table(b, N, checkpoints=None):
    """Theoretical surrogate 1/sqrt(tau_n) on the checkpoint grid"""
    table = ScheduleTable.build(StepSchedule(b=b), N)
    checkpoints = list(checkpoints or geometric_checkpoints(N))
    taus = [float(table.tau[n]) for n in checkpoints]
    surrogate = [1.0 / math.sqrt(t) if t > 0 else float('inf') for t in taus]
    if b < 1.0:
        order, exponent = f"n^-{(1.0 - b) / 2:.4g}", -(1.0 - b) / 2.0
    else:
        order, exponent = "1/sqrt(log n)", None
    return RateOverlay(b, checkpoints, taus, surrogate, order, exponent)


@dataclass
class UnReport:
    b: float
    rows: list
    peak_median: float
    final_median: float
    passed: bool
    telescope_gap: float = None
    telescope_passed: bool = None
    records: list = field(default_factory=list, repr=False)


def telescoped_U(increments, n, table):
    """U_n = sum_k alpha_{k,n} (M_k + xi_k), with increments[k-1] the k-th step's noise"""
    if n == 0:
        return np.zeros_like(increments[0])
    weights = table.alpha_kn_row(n)
    return weights @ np.stack(increments[:n])


def u_n_diagnostic(config, b=None, telescope_horizon=TELESCOPE_HORIZON):
    """Median and max of ||U_n|| over replicas per checkpoint, plus a short-horizon
    check of the telescoped form of U_n against its recursion"""
    b = config.b_values[0] if b is None else b
    records = run_replicas(config, b, decomposition=True)

    checkpoints = records[0].checkpoints
    norms = np.stack([record.column('norm_U') for record in records])
    rows = []
    for j, n in enumerate(checkpoints):
        column = norms[:, j]
        rows.append({
            'n': n,
            'tau_n': records[0].rows[j]['tau_n'],
            'median_U': float(np.median(column)),
            'max_U': float(np.max(column)),
            'count': len(column),
        })

    peak = max(row['median_U'] for row in rows)
    final = rows[-1]['median_U']
    passed = final <= peak / U_DECAY_FACTOR if peak > 0 else True
    report = UnReport(b=b, rows=rows, peak_median=peak, final_median=final, passed=passed, records=records)

    short = min(telescope_horizon, config.horizon)
    short_checkpoints = geometric_checkpoints(short, 1, config.checkpoint_ratio)
    short_run = run_replicas(
        SweepConfig(
            scenario=config.scenario, replicas=1, horizon=short, b_values=(b,),
            base_seed=config.base_seed, threads=1,
        ),
        b, decomposition=True, record_increments=True, horizon=short, checkpoints=short_checkpoints,
    )[0]
    trace = short_run.extras['trace']
    table = ScheduleTable.build(StepSchedule(b=b), short)
    gap = 0.0
    for n, U_n in trace.U_at.items():
        gap = max(gap, float(np.max(np.abs(telescoped_U(trace.increments, n, table) - U_n))))
    report.telescope_gap = gap
    report.telescope_passed = gap <= TELESCOPE_TOL

    logger.info(
        f"U_n diagnostic b={b}: peak median={peak:.6g} final median={final:.6g} "
        f"pass={passed} telescope gap={gap:.3g}"
    )
    return report
