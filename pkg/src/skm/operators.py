import logging
from abc import ABC, abstractmethod

import numpy as np

from utils.errors import DimensionMismatch

logger = logging.getLogger('SkmOperator')


def vector_norm(x, norm='sup'):
    if norm == 'sup':
        return float(np.max(np.abs(x))) if np.size(x) else 0.0
    if norm == 'euclidean':
        return float(np.linalg.norm(x))
    raise ValueError(f"Unknown norm {norm!r}")


class SkmOperator(ABC):
    """A map H(x, y), 1-Lipschitz in x uniformly over the finite noise states y"""

    dimension = None
    n_noise_states = None

    @abstractmethod
    def evaluate(self, x, y):
        """H(x, y)"""

    def evaluate_all(self, x):
        """Matrix whose row y is H(x, y)"""
        return np.stack([self.evaluate(x, y) for y in range(self.n_noise_states)])

    def expected(self, x, d_mu):
        """h(x) = sum_y d_mu(y) H(x, y); subclasses override with closed forms"""
        return np.asarray(d_mu) @ self.evaluate_all(x)

    def growth_constant(self, norm='sup'):
        """C_H = max_y ||H(0, y)||"""
        zero = np.zeros(self.dimension)
        return max(vector_norm(self.evaluate(zero, y), norm) for y in range(self.n_noise_states))

    def check_dimension(self, x):
        if np.shape(x) != (self.dimension,):
            raise DimensionMismatch(f"Expected a vector of length {self.dimension}, got shape {np.shape(x)}")

    def lipschitz_spot_check(self, rng, norm='sup', n_pairs=100, scale=10.0, tol=1e-12):
        """Worst observed ratio excess over random pairs; returns the violating pairs found"""
        violations = []
        for _ in range(n_pairs):
            x = rng.normal(scale=scale, size=self.dimension)
            x_prime = rng.normal(scale=scale, size=self.dimension)
            y = int(rng.integers(self.n_noise_states))
            lhs = vector_norm(self.evaluate(x, y) - self.evaluate(x_prime, y), norm)
            rhs = vector_norm(x - x_prime, norm)
            if lhs > rhs + tol * max(1.0, rhs):
                violations.append((lhs, rhs, y))
        return violations


class ScaledOperator(SkmOperator):
    """H(x, y) = c x for every y; c in [0, 1]"""

    def __init__(self, dimension, n_noise_states=1, factor=0.5):
        if not 0.0 <= factor <= 1.0:
            raise ValueError(f"Scaling factor must lie in [0, 1], got {factor}")
        self.dimension = dimension
        self.n_noise_states = n_noise_states
        self.factor = factor

    def evaluate(self, x, y):
        return self.factor * np.asarray(x, dtype=float)

    def expected(self, x, d_mu):
        return self.factor * np.asarray(x, dtype=float)


class IdentityOperator(ScaledOperator):
    """H(x, y) = x; every point is fixed"""

    def __init__(self, dimension, n_noise_states=1):
        super().__init__(dimension, n_noise_states, factor=1.0)


class AffineMarkovOperator(SkmOperator):
    """H(x, y) = A_y x + b_y with ||A_y||_inf <= 1 for every y"""

    def __init__(self, matrices, offsets):
        self.matrices = np.asarray(matrices, dtype=float)
        self.offsets = np.asarray(offsets, dtype=float)
        if self.matrices.ndim != 3 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise DimensionMismatch(f"Matrices must have shape (Y, d, d), got {self.matrices.shape}")
        if self.offsets.shape != self.matrices.shape[:2]:
            raise DimensionMismatch(f"Offsets must have shape {self.matrices.shape[:2]}, got {self.offsets.shape}")

        self.n_noise_states, self.dimension = self.offsets.shape
        row_norms = np.abs(self.matrices).sum(axis=2).max()
        if row_norms > 1.0 + 1e-12:
            logger.warning(f"Affine operator has ||A_y||_inf = {row_norms:.6g} > 1; not nonexpansive in sup norm")

    @classmethod
    def random(cls, dimension, n_noise_states, rng, contraction=0.9, offset_scale=1.0):
        """Random A_y = contraction * (stochastic matrix), so ||A_y||_inf = contraction.

        With contraction < 1 the averaged map h has a unique fixed point.
        """
        matrices = contraction * rng.dirichlet(np.ones(dimension), size=(n_noise_states, dimension))
        offsets = rng.normal(scale=offset_scale, size=(n_noise_states, dimension))
        return cls(matrices, offsets)

    def evaluate(self, x, y):
        return self.matrices[y] @ np.asarray(x, dtype=float) + self.offsets[y]

    def evaluate_all(self, x):
        return np.einsum('yij,j->yi', self.matrices, np.asarray(x, dtype=float)) + self.offsets

    def expected(self, x, d_mu):
        d_mu = np.asarray(d_mu)
        A = np.einsum('y,yij->ij', d_mu, self.matrices)
        return A @ np.asarray(x, dtype=float) + d_mu @ self.offsets
