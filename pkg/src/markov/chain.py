"""
Finite Markov chains: validation, stationary distribution, deviation
matrix, Poisson equation and inverse-CDF sampling.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from utils.errors import (
    DimensionMismatch, NotStochastic, Periodic, Reducible, SingularSystem
)

STOCHASTIC_TOL = 1e-12
PIVOT_TOL = 1e-13

logger = logging.getLogger('MarkovChain')


# ===============================
# Validation
# ===============================
def _as_square(P):
    P = np.array(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
        raise DimensionMismatch(f"Transition matrix must be square and non-empty, got shape {P.shape}")
    return P


def is_primitive(P):
    """True iff some power of P is strictly positive (irreducible + aperiodic).

    Equivalent to a single strongly connected support graph with period 1,
    which costs O(states + edges) instead of matrix powers.
    """
    n_components, _ = connected_components(csr_matrix(P > 0), directed=True, connection='strong')
    if n_components > 1:
        return False
    period, _ = chain_period(P)
    return period == 1


def chain_period(P):
    """Period of an irreducible chain: gcd of level differences along edges of a BFS tree"""
    graph = csr_matrix(P > 0)
    order, predecessors = breadth_first_order(graph, 0, directed=True, return_predecessors=True)
    level = np.full(P.shape[0], -1, dtype=np.int64)
    level[0] = 0
    for node in order[1:]:
        level[node] = level[predecessors[node]] + 1

    rows, cols = np.nonzero(P > 0)
    period = int(np.gcd.reduce(np.abs(level[rows] + 1 - level[cols])))
    return period, level


def validate_chain(P):
    """Check P is a stochastic, irreducible, aperiodic matrix and return it renormalized"""
    P = _as_square(P)

    negative = np.nonzero((P < 0).any(axis=1))[0]
    if len(negative):
        raise NotStochastic(f"Negative transition probabilities in rows {negative.tolist()}", negative)

    row_error = np.abs(P.sum(axis=1) - 1.0)
    bad_rows = np.nonzero(row_error > STOCHASTIC_TOL)[0]
    if len(bad_rows):
        sums = ", ".join(f"row {i} sums to {P[i].sum():.12g}" for i in bad_rows)
        raise NotStochastic(f"Rows do not sum to 1: {sums}", bad_rows)

    if not is_primitive(P):
        n_components, labels = connected_components(csr_matrix(P > 0), directed=True, connection='strong')
        if n_components > 1:
            outside = np.nonzero(labels != labels[0])[0]
            classes = [np.nonzero(labels == c)[0].tolist() for c in range(n_components)]
            raise Reducible(
                f"Chain is reducible; communicating classes {classes}, "
                f"states {outside.tolist()} do not communicate with state 0",
                outside
            )

        period, level = chain_period(P)
        cyclic_classes = [np.nonzero(level % period == r)[0].tolist() for r in range(period)]
        raise Periodic(
            f"Chain has period {period}; cyclic classes {cyclic_classes}",
            range(P.shape[0]),
            period
        )

    return P / P.sum(axis=1, keepdims=True)


# ===============================
# Linear algebra
# ===============================
def _factor(A, what):
    with warnings.catch_warnings():
        warnings.simplefilter('error', LinAlgWarning)
        try:
            lu, piv = lu_factor(A)
        except (LinAlgWarning, ValueError) as e:
            raise SingularSystem(f"Singular system while computing {what}: {e}")

    pivots = np.abs(np.diag(lu))
    if pivots.min() <= PIVOT_TOL * max(1.0, pivots.max()):
        raise SingularSystem(f"Singular system while computing {what} (smallest pivot {pivots.min():.3g})")
    return lu, piv


def stationary_distribution(P):
    """Solve d P = d, sum(d) = 1 by a dense LU solve of (P^T - I) with its last row replaced"""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0

    d = lu_solve(_factor(A, "stationary distribution"), rhs)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise SingularSystem("Stationary distribution is not strictly positive; chain validation was bypassed")
    return d / d.sum()


def deviation_matrix(P, d_mu):
    """D = (I - P + e d^T)^-1 - e d^T"""
    P = np.asarray(P, dtype=float)
    d_mu = np.asarray(d_mu, dtype=float)
    n = P.shape[0]
    if d_mu.shape != (n,):
        raise DimensionMismatch(f"Stationary distribution has shape {d_mu.shape}, expected ({n},)")

    projector = np.outer(np.ones(n), d_mu)
    fundamental = lu_solve(_factor(np.eye(n) - P + projector, "deviation matrix"), np.eye(n))
    return fundamental - projector


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


# ===============================
# Chain
# ===============================
@dataclass(frozen=True)
class FiniteChain:
    P: np.ndarray
    d_mu: np.ndarray
    D: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_matrix(cls, P):
        P = validate_chain(P)
        d_mu = stationary_distribution(P)
        D = deviation_matrix(P, d_mu)

        cumulative = np.cumsum(P, axis=1)
        cumulative[:, -1] = 1.0

        logger.debug(f"Built chain with {P.shape[0]} states")
        return cls(_frozen(P), _frozen(d_mu), _frozen(D), _frozen(cumulative))

    @property
    def n_states(self):
        return self.P.shape[0]

    def identity_residuals(self):
        """Max-norm residuals of d P = d, (I - P) D = I - e d^T and D e = 0"""
        n = self.n_states
        projector = np.outer(np.ones(n), self.d_mu)
        return {
            'stationary': float(np.abs(self.d_mu @ self.P - self.d_mu).max()),
            'deviation': float(np.abs((np.eye(n) - self.P) @ self.D - (np.eye(n) - projector)).max()),
            'deviation_kernel': float(np.abs(self.D @ np.ones(n)).max()),
        }


def random_ergodic_chain(n_states, seed, mixing=0.1):
    """Dirichlet(1) rows mixed with the uniform row; every entry is at least mixing / n_states"""
    if n_states < 1:
        raise DimensionMismatch(f"Need at least one state, got {n_states}")
    if not 0.0 < mixing <= 1.0:
        raise ValueError(f"mixing must lie in (0, 1], got {mixing}")
    rng = np.random.default_rng(seed)
    P = (1.0 - mixing) * rng.dirichlet(np.ones(n_states), size=n_states) + mixing / n_states
    P /= P.sum(axis=1, keepdims=True)
    return FiniteChain.from_matrix(P)


def solve_poisson(H_x, chain):
    """nu_x = D H_x, one row per noise state; solves H(x, y) - h(x) = nu(x, y) - (P nu)(x, y)"""
    H_x = np.asarray(H_x, dtype=float)
    if H_x.ndim == 1:
        H_x = H_x[:, None]
    if H_x.ndim != 2 or H_x.shape[0] != chain.n_states:
        raise DimensionMismatch(
            f"H_x must have one row per chain state ({chain.n_states}), got shape {H_x.shape}"
        )
    return chain.D @ H_x


def poisson_residual(H_x, nu_x, chain):
    """Max-norm residual of the Poisson identity, used by verify-poisson"""
    H_x = np.asarray(H_x, dtype=float)
    h = chain.d_mu @ H_x
    return float(np.abs(H_x - h[None, :] - nu_x + chain.P @ nu_x).max())


# ===============================
# Sampling
# ===============================
@dataclass(frozen=True)
class ChainState:
    """Current state plus a snapshot of its random stream; stepping never mutates a ChainState"""

    current: int
    rng_state: dict
    step_count: int = 0

    @classmethod
    def start(cls, chain, seed, initial=None):
        rng = np.random.default_rng(seed)
        if initial is None:
            initial = int(np.searchsorted(np.cumsum(chain.d_mu), rng.random(), side='right'))
            initial = min(initial, chain.n_states - 1)
        return cls(int(initial), rng.bit_generator.state, 0)

    def generator(self):
        bit_generator = np.random.PCG64()
        bit_generator.state = self.rng_state
        return np.random.Generator(bit_generator)


def sample_step(state, chain, u=None):
    """Advance one step by inverse-CDF over row P(current, .); u is drawn from the state's stream if absent"""
    rng_state = state.rng_state
    if u is None:
        rng = state.generator()
        u = rng.random()
        rng_state = rng.bit_generator.state
    row = chain.cumulative[state.current]
    successor = min(int(np.searchsorted(row, u, side='right')), chain.n_states - 1)
    return ChainState(successor, rng_state, state.step_count + 1)


def sample_path(state, chain, n_steps, block_size=65536):
    """Draw n_steps successors of state; returns (path, final state) with path[0] the first successor"""
    rng = state.generator()
    path = np.empty(n_steps, dtype=np.int64)
    current = state.current
    n = chain.n_states
    written = 0

    while written < n_steps:
        size = min(block_size, max(1024, (1 << 22) // n), n_steps - written)
        draws = rng.random(size)
        # successors[s, i]: where state s would move under draw i
        successors = np.empty((n, size), dtype=np.int64)
        for s in range(n):
            successors[s] = np.minimum(np.searchsorted(chain.cumulative[s], draws, side='right'), n - 1)
        for i in range(size):
            current = successors[current, i]
            path[written + i] = current
        written += size

    return path, ChainState(int(current), rng.bit_generator.state, state.step_count + n_steps)
