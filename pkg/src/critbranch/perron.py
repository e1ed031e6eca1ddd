"""Primitive nonnegative matrices: primitivity, Perron data, convergence rate.

For a primitive ``A`` with spectral radius ``rho`` the normalized powers
``rho**-n * A**n`` converge geometrically to the rank-one projector
``Pi = u v^T``. ``rate_constants`` returns a deterministic pair ``(c, r)``
bounding that convergence in operator norm.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, DomainError, InvalidInputError, NumericalError

POWER_TOL = 1e-12
POWER_MAX_ITER = 10**6
NORM_ITERS = 50


@dataclass(frozen=True)
class PerronData:
    rho: float
    u: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    c_rate: float
    r_rate: float

    @property
    def p(self):
        return self.u.shape[0]


def as_square_matrix(A, nonnegative=True):
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise InvalidInputError(f"expected a nonempty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix has non-finite entries")
    if nonnegative and np.any(A < 0):
        raise InvalidInputError("matrix has negative entries")
    return A


def _bool_matmul(X, Y):
    return (X.astype(np.int64) @ Y.astype(np.int64)) > 0


def is_primitive(A):
    """True iff ``A**((p-1)**2 + 1)`` is strictly positive (Wielandt bound).

    Works on the zero pattern only, so nothing overflows.
    """
    A = as_square_matrix(A)
    p = A.shape[0]
    exponent = (p - 1) ** 2 + 1
    base = A > 0
    result = None
    while exponent:
        if exponent & 1:
            result = base if result is None else _bool_matmul(result, base)
        exponent >>= 1
        if exponent:
            base = _bool_matmul(base, base)
    return bool(result.all())


def _power_iteration(A, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    p = A.shape[0]
    x = np.full(p, 1.0 / p)
    best, stall = np.inf, 0
    for it in range(1, max_iter + 1):
        y = A @ x
        s = y.sum()
        if not s > 0:
            raise NumericalError("power iteration collapsed to zero", iterations=it)
        y /= s
        diff = np.max(np.abs(y - x))
        if diff <= 4 * np.finfo(float).eps:
            return y, it
        # past tol, keep polishing until the change stops shrinking
        if diff < 0.999 * best:
            best, stall = diff, 0
        else:
            stall += 1
        if best <= tol and stall >= 100:
            return y, it
        x = y
    raise NumericalError(
        f"power iteration did not converge within {max_iter} iterations",
        iterations=max_iter,
    )


def operator_norm(B, iters=NORM_ITERS):
    """Spectral norm of ``B`` by power iteration on ``B^T B``."""
    B = np.asarray(B, dtype=float)
    G = B.T @ B
    # deterministic start with no special alignment to any eigenvector
    x = np.cos(np.arange(1, G.shape[0] + 1, dtype=float)) + 1.5
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = G @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        lam = ny
    # Rayleigh quotient is the sharper estimate once x has converged
    return float(np.sqrt(max(lam, float(x @ G @ x))))


def perron_data(A, n_max=200):
    """Perron root, vectors, projector and rate constants of a primitive matrix.

    ``u`` is normalized to coordinate sum 1 and ``v`` so that ``u @ v == 1``.
    """
    A = as_square_matrix(A)
    if not is_primitive(A):
        raise DomainError("matrix is not primitive")
    u, _ = _power_iteration(A)
    w, _ = _power_iteration(A.T)
    rho = float(np.sum(A @ u))
    v = w / float(u @ w)
    pi = np.outer(u, v)
    c, r = _rate_constants(A, rho, pi, n_max)
    return PerronData(rho=rho, u=u, v=v, pi=pi, c_rate=c, r_rate=r)


def second_modulus(A, rho, pi, iters=2000):
    """Estimate ``|lambda_2|`` by power iteration on the deflated ``A/rho - Pi``.

    The growth rate is averaged in log space over the second half of the run,
    which also handles negative and complex-conjugate subdominant eigenvalues.
    """
    B = np.asarray(A, dtype=float) / rho - pi
    p = B.shape[0]
    x = np.cos(np.arange(1, p + 1, dtype=float)) + 1.5
    x /= np.linalg.norm(x)
    logs = []
    for _ in range(iters):
        y = B @ x
        ny = np.linalg.norm(y)
        if ny < 1e-300:
            return 0.0
        logs.append(np.log(ny))
        x = y / ny
        if len(logs) >= 64 and len(logs) % 64 == 0:
            half = logs[len(logs) // 2:]
            est = np.exp(np.mean(half))
            if est < 1e-12:
                return 0.0
    half = logs[len(logs) // 2:]
    return float(rho * np.exp(np.mean(half)))


def rate_constants(A, pd, n_max=200):
    """Return ``(c, r)`` with ``||rho^-n A^n - Pi|| <= c r^n`` for ``1 <= n <= n_max``."""
    A = as_square_matrix(A)
    if n_max < 10:
        raise InvalidInputError("n_max must be at least 10")
    return _rate_constants(A, pd.rho, pd.pi, n_max)


def _rate_constants(A, rho, pi, n_max):
    lam2 = second_modulus(A, rho, pi)
    ratio = lam2 / rho
    if ratio >= 1.0 - 1e-9:
        raise DegeneracyError(
            f"|lambda_2|/rho = {ratio:.12g} is indistinguishable from 1"
        )
    r = 0.5 * (ratio + 1.0)
    # (A/rho - Pi)^n == (A/rho)^n - Pi, without the cancellation
    B = A / rho - pi
    Bn = np.eye(A.shape[0])
    c = 0.0
    for n in range(1, n_max + 1):
        Bn = Bn @ B
        c = max(c, operator_norm(Bn) / r**n)
    if c == 0.0:
        # A/rho == Pi: every positive c is valid
        c = 1.0
    return float(c), float(r)


def projector_distance(A, pd, n):
    """``||rho^-n A^n - Pi||`` evaluated through powers of the deflated matrix."""
    B = np.asarray(A, dtype=float) / pd.rho - pd.pi
    return operator_norm(np.linalg.matrix_power(B, n)) if n > 0 else operator_norm(
        np.eye(B.shape[0]) - pd.pi
    )
