"""
Tabular average-reward MDPs under a fixed policy: the induced chain,
gain J = d_mu . r_pi, bias v = D r_pi, and the solution line
V_* = {v + c e} of the Bellman equation v = r_pi - J e + P_pi v.
"""

import logging
from dataclasses import dataclass

import numpy as np

from markov.chain import STOCHASTIC_TOL, FiniteChain
from utils.errors import DimensionMismatch, NotStochastic

logger = logging.getLogger('MdpEval')


def _check_distribution_rows(table, what):
    negative = np.argwhere(table < 0)
    if len(negative):
        raise NotStochastic(f"{what} has negative entries at {negative[:5].tolist()}", negative[:, 0])
    off = np.argwhere(np.abs(table.sum(axis=-1) - 1.0) > STOCHASTIC_TOL)
    if len(off):
        where = ", ".join(f"{tuple(i)} sums to {table[tuple(i)].sum():.12g}" for i in off[:5])
        raise NotStochastic(f"{what} rows do not sum to 1: {where}", off[:, 0])


@dataclass(frozen=True)
class TabularMdp:
    r: np.ndarray
    p: np.ndarray
    p0: np.ndarray = None

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        p = np.array(self.p, dtype=float)
        n_states = r.shape[0] if r.ndim == 2 else -1
        if r.ndim != 2 or p.shape != (n_states, r.shape[1], n_states):
            raise DimensionMismatch(
                f"Rewards must be (S, A) and transitions (S, A, S); got {r.shape} and {p.shape}"
            )
        p0 = np.full(n_states, 1.0 / n_states) if self.p0 is None else np.array(self.p0, dtype=float)
        if p0.shape != (n_states,):
            raise DimensionMismatch(f"Initial distribution must have length {n_states}, got {p0.shape}")

        _check_distribution_rows(p, "Transition tensor")
        _check_distribution_rows(p0[None, :], "Initial distribution")

        for name, value in (('r', r), ('p', p), ('p0', p0)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_states(self):
        return self.r.shape[0]

    @property
    def n_actions(self):
        return self.r.shape[1]


@dataclass(frozen=True)
class PolicySpec:
    pi: np.ndarray

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float)
        if pi.ndim != 2:
            raise DimensionMismatch(f"Policy table must be (S, A), got shape {pi.shape}")
        _check_distribution_rows(pi, "Policy")
        pi.setflags(write=False)
        object.__setattr__(self, 'pi', pi)

    @classmethod
    def uniform(cls, mdp):
        return cls(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        pi = np.zeros((len(actions), n_actions))
        pi[np.arange(len(actions)), actions] = 1.0
        return cls(pi)


def induced_chain(mdp, policy):
    """P_pi(s, s') = sum_a pi(a|s) p(s'|s, a), r_pi(s) = sum_a pi(a|s) r(s, a)"""
    if policy.pi.shape != mdp.r.shape:
        raise DimensionMismatch(f"Policy shape {policy.pi.shape} does not match MDP {mdp.r.shape}")
    P_pi = np.einsum('sa,sat->st', policy.pi, mdp.p)
    r_pi = np.einsum('sa,sa->s', policy.pi, mdp.r)
    return P_pi, r_pi


@dataclass(frozen=True)
class EvalOracle:
    P_pi: np.ndarray
    r_pi: np.ndarray
    chain: FiniteChain
    J_bar: float
    v_pi: np.ndarray
    rewards: np.ndarray

    @classmethod
    def build(cls, mdp, policy):
        P_pi, r_pi = induced_chain(mdp, policy)
        chain = FiniteChain.from_matrix(P_pi)
        r_pi.setflags(write=False)
        J_bar = float(chain.d_mu @ r_pi)
        v_pi = chain.D @ r_pi
        v_pi.setflags(write=False)
        logger.debug(f"Oracle built: J_bar={J_bar:.6g}")
        return cls(chain.P, r_pi, chain, J_bar, v_pi, mdp.r)

    @property
    def d_mu(self):
        return self.chain.d_mu


def gain(oracle):
    """J_bar = d_mu . r_pi"""
    return float(oracle.chain.d_mu @ oracle.r_pi)


def bias(oracle, chain):
    """v_pi = D r_pi, the member of V_* with d_mu . v = 0"""
    return chain.D @ oracle.r_pi


def bellman_residual(v, J, oracle):
    """||r_pi - J e + P_pi v - v||_inf"""
    v = np.asarray(v, dtype=float)
    if v.shape != oracle.r_pi.shape:
        raise DimensionMismatch(f"Value vector has shape {v.shape}, expected {oracle.r_pi.shape}")
    return float(np.max(np.abs(oracle.r_pi - J + oracle.P_pi @ v - v)))


def span(w):
    return float(np.max(w) - np.min(w))


def distance_to_fixed_set(v, oracle):
    """min_c ||v - v_pi - c e||_inf = span(v - v_pi) / 2"""
    v = np.asarray(v, dtype=float)
    if v.shape != oracle.v_pi.shape:
        raise DimensionMismatch(f"Value vector has shape {v.shape}, expected {oracle.v_pi.shape}")
    return span(v - oracle.v_pi) / 2.0


def random_ergodic_mdp(n_states, n_actions, seed, mixing=0.1):
    """Dirichlet(1) transition rows mixed with the uniform row by weight `mixing`; rewards U[0, 1]"""
    if n_states < 1 or n_actions < 1:
        raise DimensionMismatch(f"Need at least one state and action, got {n_states}, {n_actions}")
    if not 0.0 < mixing <= 1.0:
        raise ValueError(f"mixing must lie in (0, 1], got {mixing}")

    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p = (1.0 - mixing) * rows + mixing / n_states
    p /= p.sum(axis=-1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(r=r, p=p, p0=np.full(n_states, 1.0 / n_states))
