"""State-transition layer: linear-Gaussian dynamics and the general contract.

A transition model supplies its log-density, the six derivative blocks used
by the joint two-state Newton step, and an argmax prediction.  The blocks
J11, J12, J21, J22 store the NEGATIVE Hessian of the transition log-density
with respect to (a_t, a_prev); for linear-Gaussian dynamics

    J11 = Q^-1,  J12 = -Q^-1 T,  J21 = -T' Q^-1,  J22 = T' Q^-1 T,

which consumers verify against finite differences. Degenerate transitions
(coordinates of a_t that deterministically repeat coordinates of a_prev)
are described by a DegeneracyMask and never evaluated as densities.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import stationary_moments

__all__ = [
    "SingularQ",
    "NoArgmax",
    "NonDifferentiable",
    "TransitionDerivatives",
    "DegeneracyMask",
    "LinearGaussianDynamics",
    "lg_transition_logpdf",
    "transition_derivatives",
    "predict_state",
]


class SingularQ(Exception):
    """State noise covariance is singular; use the degenerate path instead."""


class NoArgmax(Exception):
    """Transition density has no unique argmax over the next state."""


class NonDifferentiable(Exception):
    """Transition density rejects derivative evaluation at this point."""


@dataclass
class TransitionDerivatives:
    """Gradients (J1, J2) and negative-Hessian blocks of the transition
    log-density with respect to (a_t, a_prev)."""

    J1: np.ndarray
    J2: np.ndarray
    J11: np.ndarray
    J12: np.ndarray
    J21: np.ndarray
    J22: np.ndarray


@dataclass
class DegeneracyMask:
    """Equality constraints a_t[i] == a_prev[j] for (i, j) in ``pinned``.

    The joint optimisation over (a_t, a_prev) then runs on the reduced
    vector of free coordinates; the pinned coordinates are substituted
    analytically and the degenerate part of the transition density is
    dropped.
    """

    state_dim: int
    pinned: tuple = ()

    def __post_init__(self):
        seen = set()
        for i, j in self.pinned:
            if not (0 <= i < self.state_dim and 0 <= j < self.state_dim):
                raise ValueError("pinned index out of range")
            if i in seen:
                raise ValueError(f"coordinate {i} pinned twice")
            seen.add(i)

    @property
    def free_current(self):
        pinned_i = {i for i, _ in self.pinned}
        return tuple(i for i in range(self.state_dim) if i not in pinned_i)

    def selection(self):
        """Matrix M with (a_t, a_prev) = M @ x for the reduced stacked vector x.

        x lists the free coordinates of a_t first, then all of a_prev (the
        pinned coordinates of a_t are aliases of a_prev entries).
        """
        m = self.state_dim
        free = self.free_current
        r = len(free) + m
        sel = np.zeros((2 * m, r))
        for col, i in enumerate(free):
            sel[i, col] = 1.0
        for j in range(m):
            sel[m + j, len(free) + j] = 1.0
        for i, j in self.pinned:
            sel[i, len(free) + j] = 1.0
        return sel


@dataclass
class LinearGaussianDynamics:
    """a_t = c + T a_prev + eta, eta ~ N(0, Q)."""

    c: np.ndarray
    T: np.ndarray
    Q: np.ndarray
    mask: DegeneracyMask | None = field(default=None)

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        self.T = np.atleast_2d(np.asarray(self.T, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        m = self.c.size
        if self.T.shape != (m, m) or self.Q.shape != (m, m):
            raise ValueError("dimensions of c, T, Q are not conformable")
        if np.abs(self.Q - self.Q.T).max() > 1e-12 * max(1.0, np.abs(self.Q).max()):
            raise ValueError("Q must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10 * max(1.0, np.abs(self.Q).max()):
            raise ValueError("Q must be positive semidefinite")
        self._q_chol = None

    @property
    def state_dim(self):
        return self.c.size

    @property
    def stationary(self):
        return np.abs(np.linalg.eigvals(self.T)).max() < 1.0

    def stationary_belief(self):
        mean, cov = stationary_moments(self.c, self.T, self.Q)
        return mean, np.linalg.inv(cov)

    def _chol(self):
        if self._q_chol is None:
            try:
                self._q_chol = np.linalg.cholesky(self.Q)
            except np.linalg.LinAlgError as exc:
                raise SingularQ("Q is singular; model the degenerate "
                                "coordinates with a DegeneracyMask") from exc
        return self._q_chol

    def logpdf(self, a_t, a_prev):
        return lg_transition_logpdf(self, a_t, a_prev)

    def derivatives(self, a_t, a_prev):
        return transition_derivatives(self, a_t, a_prev)

    def predict(self, a_prev):
        return self.c + self.T @ np.atleast_1d(np.asarray(a_prev, dtype=float))

    def sample_next(self, a_prev, rng):
        chol = self._chol()
        return self.predict(a_prev) + chol @ rng.standard_normal(self.state_dim)


def lg_transition_logpdf(dyn: LinearGaussianDynamics, a_t, a_prev):
    """Gaussian transition log-density at the residual a_t - c - T a_prev."""
    chol = dyn._chol()
    r = (np.atleast_1d(np.asarray(a_t, dtype=float))
         - dyn.predict(a_prev))
    z = np.linalg.solve(chol, r)
    m = dyn.state_dim
    logdet = 2.0 * np.sum(np.log(chol.diagonal()))
    return -0.5 * (m * math.log(2.0 * math.pi) + logdet + float(z @ z))


def transition_derivatives(model, a_t, a_prev) -> TransitionDerivatives:
    """Derivative blocks of the transition log-density.

    Linear-Gaussian models get the closed form; any other model must
    implement ``derivatives`` itself.
    """
    if isinstance(model, LinearGaussianDynamics):
        model._chol()  # SingularQ check
        q_inv = np.linalg.inv(model.Q)
        r = np.atleast_1d(np.asarray(a_t, dtype=float)) - model.predict(a_prev)
        j1 = -q_inv @ r
        return TransitionDerivatives(
            J1=j1,
            J2=-model.T.T @ j1,
            J11=q_inv,
            J12=-q_inv @ model.T,
            J21=-model.T.T @ q_inv,
            J22=model.T.T @ q_inv @ model.T,
        )
    return model.derivatives(a_t, a_prev)


def predict_state(model, a_prev):
    """argmax over a_t of the transition log-density given a_prev."""
    out = model.predict(np.atleast_1d(np.asarray(a_prev, dtype=float)))
    out = np.atleast_1d(np.asarray(out, dtype=float))
    if not np.all(np.isfinite(out)):
        raise NoArgmax("transition argmax is non-finite")
    return out
