"""
Power-law step sizes alpha_n = 1/(n+1)^b and the quantities built on them:
alpha_{k,n} = alpha_k prod_{j=k+1}^n (1 - alpha_j) and tau_n = sum_{k<=n} alpha_k (1 - alpha_k).

tau_0 is the empty sum, 0. A proof bound elsewhere in the literature uses
tau_0 = 1; that convention is not used here.
"""

import math
import logging
from dataclasses import dataclass, field

import numpy as np

from utils.errors import ConfigValidationError, IndexOutOfRange, NonPositiveArgument

PRIMARY_ALPHA = 'primary_alpha'
SECONDARY_BETA = 'secondary_beta'

B_LOWER = 0.8
B_UPPER = 1.0

logger = logging.getLogger('Schedules')


@dataclass(frozen=True)
class StepSchedule:
    b: float = 1.0
    kind: str = PRIMARY_ALPHA
    diagnostic: bool = False

    def __post_init__(self):
        if self.kind not in (PRIMARY_ALPHA, SECONDARY_BETA):
            raise ConfigValidationError('schedule.kind', f"unknown schedule kind {self.kind!r}")
        if self.kind == PRIMARY_ALPHA and not self.diagnostic:
            if not (B_LOWER < self.b <= B_UPPER):
                raise ConfigValidationError(
                    'schedule.b',
                    f"b = {self.b} outside (0.8, 1]; the step sizes alpha_n = 1/(n+1)^b need b in (4/5, 1]"
                )
        if self.diagnostic and self.b <= 0:
            raise ConfigValidationError('schedule.b', f"b = {self.b} must be positive")

    def values(self, n_max):
        """Rates for indices 0..n_max as an array"""
        n = np.arange(n_max + 1, dtype=float)
        out = np.zeros(n_max + 1)
        if self.kind == PRIMARY_ALPHA:
            out[1:] = (n[1:] + 1.0) ** (-self.b)
        else:
            out[1:] = 1.0 / n[1:]
        return out


def alpha(n, schedule):
    """alpha_0 = 0, alpha_n = (n+1)^-b; for the secondary schedule beta_t = 1/t"""
    if n < 0:
        raise IndexOutOfRange(f"Step index must be nonnegative, got {n}")
    if n == 0:
        return 0.0
    if schedule.kind == SECONDARY_BETA:
        return 1.0 / n
    return (n + 1.0) ** (-schedule.b)


def sigma(y):
    """min{1, 1/sqrt(pi y)}"""
    if y <= 0:
        raise NonPositiveArgument(f"sigma needs a positive argument, got {y}")
    return min(1.0, 1.0 / math.sqrt(math.pi * y))


# ===============================
# Cached table
# ===============================
@dataclass(frozen=True)
class ScheduleTable:
    schedule: StepSchedule
    horizon: int
    alpha: np.ndarray = field(repr=False)
    tau: np.ndarray = field(repr=False)
    log_keep: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, schedule, horizon):
        if horizon < 1:
            raise IndexOutOfRange(f"Schedule horizon must be >= 1, got {horizon}")

        # one extra entry so alpha_{N+1} is available
        alphas = schedule.values(horizon + 1)
        tau = np.concatenate(([0.0], np.cumsum(alphas[1:horizon + 1] * (1.0 - alphas[1:horizon + 1]))))
        # log_keep[n] = sum_{j=1}^n ln(1 - alpha_j)
        log_keep = np.concatenate(([0.0], np.cumsum(np.log1p(-alphas[1:horizon + 1]))))

        for array in (alphas, tau, log_keep):
            array.setflags(write=False)
        logger.debug(f"Built schedule table b={schedule.b} horizon={horizon}")
        return cls(schedule, horizon, alphas, tau, log_keep)

    def _check(self, k, n):
        if not (1 <= k <= n <= self.horizon):
            raise IndexOutOfRange(f"alpha_kn needs 1 <= k <= n <= {self.horizon}, got k={k}, n={n}")

    def alpha_kn_row(self, n):
        """alpha_{k,n} for k = 1..n as an array"""
        self._check(1, n)
        k = np.arange(1, n + 1)
        return self.alpha[k] * np.exp(self.log_keep[n] - self.log_keep[k])


def alpha_kn(k, n, table):
    """alpha_k prod_{j=k+1}^n (1 - alpha_j), O(1) from cached log-space sums"""
    table._check(k, n)
    if k == n:
        return float(table.alpha[n])
    return float(table.alpha[k] * math.exp(table.log_keep[n] - table.log_keep[k]))


def alpha_kn_direct(k, n, table):
    """Same quantity by explicit product; reference for short horizons"""
    table._check(k, n)
    value = float(table.alpha[k])
    for j in range(k + 1, n + 1):
        value *= 1.0 - float(table.alpha[j])
    return value


def tau(n, table):
    if n < 0 or n > table.horizon:
        raise IndexOutOfRange(f"tau index {n} outside [0, {table.horizon}]")
    return float(table.tau[n])


def tau_growth_ratio(n, table):
    """tau_n / n^(1-b) for b < 1, tau_n / ln n for b = 1"""
    b = table.schedule.b
    if b >= 1.0:
        return float(table.tau[n] / math.log(n))
    return float(table.tau[n] / n ** (1.0 - b))


# ===============================
# Inequality sum_k alpha_{k,n}^2 <= alpha_{n+1}
# ===============================
def check_b2_inequality(n, table):
    """Returns (holds, slack) with slack = alpha_{n+1} - sum_k alpha_{k,n}^2"""
    if n < 1:
        raise IndexOutOfRange(f"n must be >= 1, got {n}")
    total = float(np.sum(table.alpha_kn_row(n) ** 2))
    slack = float(table.alpha[n + 1]) - total
    return slack >= 0.0, slack


def b2_slacks(table):
    """Slack for every n in 1..horizon via B_n = (1 - alpha_n)^2 B_{n-1} + alpha_n^2"""
    alphas = table.alpha.tolist()
    slacks = np.empty(table.horizon)
    total = 0.0
    for n in range(1, table.horizon + 1):
        keep = 1.0 - alphas[n]
        total = keep * keep * total + alphas[n] * alphas[n]
        slacks[n - 1] = alphas[n + 1] - total
    return slacks


# ===============================
# Series diagnostics
# ===============================
SERIES_IDS = (
    'alpha2_tau',
    'alpha2_tau2',
    'alpha32_tau_prev',
    'alpha_diff_tau',
    'alpha2_sum_alpha_tau',
    'alpha_sqrt_weighted_tau2',
)


@dataclass
class SeriesReport:
    series_id: str
    checkpoints: list
    partial_sums: list
    total: float
    last_decade_increment: float
    increment_fraction: float
    tail_exponent: float
    bounded: bool


def series_terms(table):
    """Term arrays (index k = 1..N) of the six step-size series that must stay bounded"""
    N = table.horizon
    a = table.alpha[1:N + 1]
    a_next = table.alpha[2:N + 2]
    t = table.tau[1:N + 1]
    t_prev = table.tau[0:N]

    # sum_{j<k} alpha_j tau_j
    weighted = np.concatenate(([0.0], np.cumsum(a * t)[:-1]))

    # Q_m = sum_{j<=m} alpha_{j,m}^2 tau_{j-1}^2, Q_m = (1 - alpha_m)^2 Q_{m-1} + alpha_m^2 tau_{m-1}^2
    alphas = a.tolist()
    taus_prev = t_prev.tolist()
    q_prev = np.empty(N)
    q = 0.0
    for i in range(N):
        q_prev[i] = q
        keep = 1.0 - alphas[i]
        q = keep * keep * q + alphas[i] * alphas[i] * taus_prev[i] * taus_prev[i]

    return {
        'alpha2_tau': a ** 2 * t,
        'alpha2_tau2': a ** 2 * t ** 2,
        'alpha32_tau_prev': a ** 1.5 * t_prev,
        'alpha_diff_tau': np.abs(a - a_next) * t,
        'alpha2_sum_alpha_tau': a ** 2 * weighted,
        'alpha_sqrt_weighted_tau2': a * np.sqrt(q_prev),
    }


def geometric_checkpoints(horizon, start=16, ratio=2.0):
    points = []
    n = float(start)
    while n < horizon:
        points.append(int(round(n)))
        n *= ratio
    points.append(int(horizon))
    return sorted(set(p for p in points if 1 <= p <= horizon))


def _tail_exponent(terms, horizon, n_points=64):
    """Least-squares slope of log(term) against log(k) over the last decade"""
    lo = max(1, horizon // 10)
    k = np.unique(np.geomspace(lo, horizon, n_points).astype(np.int64))
    values = terms[k - 1]
    mask = values > 0
    if mask.sum() < 4:
        return float('nan')
    slope, _ = np.polyfit(np.log(k[mask]), np.log(values[mask]), 1)
    return float(slope)


def series_diagnostics(table, fraction=0.01, exponent_margin=0.1, checkpoints=None):
    """Partial sums of the six series and a plateau verdict per series.

    A series is flagged bounded when its last-decade increment is below
    `fraction` of the running total, or when its terms decay over the last
    decade like k^-p with p > 1 + exponent_margin.
    """
    if table.horizon < 1000:
        raise IndexOutOfRange(f"series diagnostics need a horizon of at least 1000, got {table.horizon}")

    N = table.horizon
    checkpoints = checkpoints or geometric_checkpoints(N)
    reports = []
    for series_id, terms in series_terms(table).items():
        partial = np.cumsum(terms)
        total = float(partial[-1])
        increment = total - float(partial[N // 10 - 1])
        fraction_seen = increment / total if total > 0 else 0.0
        exponent = _tail_exponent(terms, N)
        bounded = fraction_seen < fraction or (np.isfinite(exponent) and exponent < -(1.0 + exponent_margin))

        reports.append(SeriesReport(
            series_id=series_id,
            checkpoints=list(checkpoints),
            partial_sums=[float(partial[n - 1]) for n in checkpoints],
            total=total,
            last_decade_increment=increment,
            increment_fraction=fraction_seen,
            tail_exponent=exponent,
            bounded=bool(bounded),
        ))
        logger.info(
            f"{series_id}: total={total:.6g} last-decade fraction={fraction_seen:.3%} "
            f"tail exponent={exponent:.3f} bounded={bounded}"
        )
    return reports
