"""Dense linear-algebra kernels shared by the filters.

Everything here operates on small dense matrices (state dimensions of a
couple of dozen at most) and is written for clarity and testability rather
than asymptotic speed.
"""

import numpy as np

__all__ = [
    "SingularBlock",
    "SingularPrediction",
    "NonStationary",
    "NonFinite",
    "BlockSystem",
    "check_symmetric",
    "is_pos_def",
    "chol_pd",
    "block_inverse",
    "predict_info_lg",
    "predict_info_woodbury",
    "stationary_moments",
    "fd_gradient",
    "fd_hessian",
]

# Scale-aware Cholesky pivot threshold: smallest pivot^2 must reach this
# fraction of the largest diagonal entry.
PD_RTOL = 1e-12


class SingularBlock(Exception):
    """A22 or its Schur complement is numerically singular."""


class SingularPrediction(Exception):
    """Predicted state covariance T I^-1 T' + Q is not invertible."""


class NonStationary(Exception):
    """Transition matrix has spectral radius >= 1."""


class NonFinite(Exception):
    """Function evaluated to a non-finite value near the expansion point."""


class BlockSystem:
    """Four conformable blocks of a 2x2 partitioned matrix."""

    def __init__(self, a11, a12, a21, a22):
        self.a11 = np.atleast_2d(np.asarray(a11, dtype=float))
        self.a12 = np.atleast_2d(np.asarray(a12, dtype=float))
        self.a21 = np.atleast_2d(np.asarray(a21, dtype=float))
        self.a22 = np.atleast_2d(np.asarray(a22, dtype=float))
        p, q = self.a11.shape[0], self.a22.shape[0]
        if (self.a11.shape != (p, p) or self.a22.shape != (q, q)
                or self.a12.shape != (p, q) or self.a21.shape != (q, p)):
            raise ValueError("block dimensions are not conformable")

    def assemble(self):
        return np.block([[self.a11, self.a12], [self.a21, self.a22]])


def check_symmetric(a, rtol=1e-12):
    """Validate that `a` is a finite symmetric matrix; return the symmetrized copy."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix has non-finite entries")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


def chol_pd(a):
    """Cholesky factor of `a`, raising ValueError when `a` fails the scale-aware
    positive-definiteness check (smallest pivot^2 >= PD_RTOL * largest diagonal)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc
    floor = PD_RTOL * max(a.diagonal().max(), np.finfo(float).tiny)
    if (chol.diagonal() ** 2).min() < floor:
        raise ValueError("matrix is numerically singular")
    return chol


def is_pos_def(a):
    try:
        chol_pd(a)
    except (ValueError, NonFinite):
        return False
    return True


def block_inverse(sys: BlockSystem):
    """Invert a 2x2 block matrix analytically.

    Returns the four blocks (b11, b12, b21, b22) of the inverse, computed via
    the Schur complement S = A11 - A12 A22^-1 A21:

        [[S^-1,            -S^-1 A12 A22^-1                   ],
         [-A22^-1 A21 S^-1, A22^-1 + A22^-1 A21 S^-1 A12 A22^-1]]

    Raises SingularBlock when A22 or S is numerically singular.
    """
    a11, a12, a21, a22 = sys.a11, sys.a12, sys.a21, sys.a22
    if _smallest_sv(a22) < 1e-12:
        raise SingularBlock("A22 is numerically singular")
    a22_inv = np.linalg.inv(a22)
    schur = a11 - a12 @ a22_inv @ a21
    if _smallest_sv(schur) < 1e-12:
        raise SingularBlock("Schur complement is numerically singular")
    s_inv = np.linalg.inv(schur)
    b12 = -s_inv @ a12 @ a22_inv
    b21 = -a22_inv @ a21 @ s_inv
    b22 = a22_inv + a22_inv @ a21 @ s_inv @ a12 @ a22_inv
    return s_inv, b12, b21, b22


def _smallest_sv(a):
    if a.size == 0:
        return np.inf
    return np.linalg.svd(a, compute_uv=False)[-1]


def predict_info_lg(T, Q, I_prev):
    """One-step predicted information (T I_prev^-1 T' + Q)^-1.

    Valid for positive semidefinite Q; raises SingularPrediction when the
    predicted covariance cannot be inverted.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    I_prev = np.atleast_2d(np.asarray(I_prev, dtype=float))
    p_prev = np.linalg.inv(I_prev)
    p_pred = T @ p_prev @ T.T + Q
    p_pred = 0.5 * (p_pred + p_pred.T)
    try:
        chol = chol_pd(p_pred)
    except ValueError as exc:
        raise SingularPrediction(str(exc)) from exc
    ident = np.eye(p_pred.shape[0])
    inv_chol = np.linalg.solve(chol, ident)
    out = inv_chol.T @ inv_chol
    return 0.5 * (out + out.T)


def predict_info_woodbury(T, Q, I_prev):
    """Woodbury form Q^-1 - Q^-1 T (I_prev + T' Q^-1 T)^-1 T' Q^-1.

    Requires invertible Q; agrees with predict_info_lg whenever both apply.
    """
    T = np.atleast_2d(np.asarray(T, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    I_prev = np.atleast_2d(np.asarray(I_prev, dtype=float))
    try:
        chol_pd(Q)
    except ValueError as exc:
        raise SingularPrediction("Q must be positive definite") from exc
    q_inv = np.linalg.inv(Q)
    inner = I_prev + T.T @ q_inv @ T
    out = q_inv - q_inv @ T @ np.linalg.solve(inner, T.T @ q_inv)
    return 0.5 * (out + out.T)


def stationary_moments(c, T, Q):
    """Stationary mean (1-T)^-1 c and covariance solving cov = T cov T' + Q.

    Raises NonStationary when the spectral radius of T reaches 1.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    T = np.atleast_2d(np.asarray(T, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    m = T.shape[0]
    if np.abs(np.linalg.eigvals(T)).max() >= 1.0 - 1e-10:
        raise NonStationary("spectral radius of T is >= 1")
    mean = np.linalg.solve(np.eye(m) - T, c)
    vec_cov = np.linalg.solve(np.eye(m * m) - np.kron(T, T), Q.reshape(-1))
    cov = vec_cov.reshape(m, m)
    return mean, 0.5 * (cov + cov.T)


def _fd_steps(x, h):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if h is None:
        return 1e-5 * np.maximum(1.0, np.abs(x))
    return np.full(x.shape, float(h))


def fd_gradient(f, x, h=None):
    """Central-difference gradient with per-coordinate step 1e-5*max(1,|x_i|)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    steps = _fd_steps(x, h)
    grad = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = steps[i]
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"function non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2 * steps[i])
    return grad


def fd_hessian(f, x, h=None):
    """Central-difference Hessian (symmetrized); default step 1e-4 per coordinate.

    The second-difference stencil loses roughly half the mantissa, so the
    default step is larger than for fd_gradient.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    steps = _fd_steps(x, h) * 10.0 if h is None else _fd_steps(x, h)
    n = x.size
    hess = np.empty((n, n))
    f0 = f(x)
    if not np.isfinite(f0):
        raise NonFinite("function non-finite at expansion point")
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        fp, fm = f(x + ei), f(x - ei)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"function non-finite near coordinate {i}")
        hess[i, i] = (fp - 2 * f0 + fm) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            fpp, fpm = f(x + ei + ej), f(x + ei - ej)
            fmp, fmm = f(x - ei + ej), f(x - ei - ej)
            if not all(np.isfinite(v) for v in (fpp, fpm, fmp, fmm)):
                raise NonFinite(f"function non-finite near coordinates ({i},{j})")
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * steps[i] * steps[j])
    return 0.5 * (hess + hess.T)
