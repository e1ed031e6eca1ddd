"""Euler full-truncation integrators for the diffusion limits.

Scalar: dX = b dt + sqrt(c X^+) dW (CIR / scaled squared Bessel).
Vector: the martingale limit M integrated through its (P, Q) coordinates,
P = v.(M + t m_eps) and Q = M - P u, which share one p-dimensional Wiener
increment per step.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .errors import ConsistencyError, DomainError, InvalidInputError, NotPSDError
from .model import mixed_variance
from .rng import replicate_generator

PSD_CLAMP = 1e-10
RAY_TOL = 1e-10
DEFAULT_DT = 1e-3
BLOCK = 2048


@dataclass(frozen=True)
class SdeConfig:
    dt: float = DEFAULT_DT
    t_max: float = 1.0
    scheme: str = "euler-full-truncation"
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        if not self.t_max > 0:
            raise InvalidInputError("t_max must be positive")
        if self.dt > self.t_max:
            raise InvalidInputError("dt must not exceed t_max")
        if self.scheme != "euler-full-truncation":
            raise InvalidInputError(f"unsupported scheme {self.scheme!r}")

    @property
    def n_steps(self):
        return int(np.floor(np.round(self.t_max / self.dt, 9)))

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class SdePath:
    times: np.ndarray
    values: np.ndarray
    components: dict = field(default_factory=dict)


def psd_sqrt(A, tol=PSD_CLAMP):
    """Symmetric PSD square root through the eigendecomposition."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > tol:
        raise NotPSDError("matrix is not symmetric")
    w, Q = np.linalg.eigh(0.5 * (A + A.T))
    if np.any(w < -tol):
        raise NotPSDError(f"matrix has eigenvalue {w.min():.3e} < -{tol:g}")
    w = np.clip(w, 0.0, None)
    S = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (S + S.T)


def besq_dimension(lc):
    """Dimension 4b/c of the squared Bessel process 4X/c."""
    if not lc.c > 0:
        raise DomainError("squared-Bessel dimension undefined for c = 0")
    return 4.0 * lc.b / lc.c


def _check_cir_params(b, c, x0):
    if b < 0 or c < 0:
        raise InvalidInputError("b and c must be nonnegative")
    if np.any(np.asarray(x0) < 0):
        raise InvalidInputError("x0 must be nonnegative")


def simulate_cir(b, c, x0, cfg, normals=None, backend=None):
    """One full-truncation Euler path on the grid k*dt, k = 0..floor(t_max/dt).

    ``normals`` (length n_steps) overrides the standard normals drawn from
    stream ``(cfg.seed, "cir", 0)``.
    """
    _check_cir_params(b, c, x0)
    n = cfg.n_steps
    if normals is None:
        normals = replicate_generator(cfg.seed, 0, "cir").standard_normal(n)
    z = np.asarray(normals, dtype=float).reshape(1, n)
    out = np.empty((1, n + 1))
    _k.cir_block(np.array([float(x0)]), b, c, cfg.dt, z, np.arange(n + 1), out, which=backend)
    return SdePath(times=cfg.times, values=out[0])


def cir_ensemble(b, c, x0, cfg, N, times=None, label="cir", jobs=None, backend=None):
    """Values of N independent paths at ``times`` (default: t_max), shape (N, len(times)).

    ``x0`` is a scalar or a length-N array. Replicate ``r`` draws its normals
    from stream ``(cfg.seed, label, r)``.
    """
    _check_cir_params(b, c, x0)
    if N < 1:
        raise InvalidInputError("N must be positive")
    times = np.atleast_1d(np.asarray([cfg.t_max] if times is None else times, dtype=float))
    rec = np.floor(np.round(times / cfg.dt, 9)).astype(np.int64)
    if np.any(rec > cfg.n_steps) or np.any(rec < 0):
        raise InvalidInputError("requested times outside [0, t_max]")
    order = np.argsort(rec, kind="stable")
    rec_sorted = rec[order]
    n_steps = int(rec_sorted[-1])
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (N,))
    out = np.empty((N, rec.size))
    which = backend or _k.backend()

    def run(lo):
        hi = min(lo + BLOCK, N)
        z = np.empty((hi - lo, n_steps))
        for r in range(lo, hi):
            z[r - lo] = replicate_generator(cfg.seed, r, label).standard_normal(n_steps)
        block = np.empty((hi - lo, rec.size))
        _k.cir_block(x0[lo:hi], b, c, cfg.dt, z, rec_sorted, block, which=which)
        out[lo:hi, order] = block

    starts = range(0, N, BLOCK)
    jobs = 1 if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(starts) == 1:
        for lo in starts:
            run(lo)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, starts))
    return out


def m_system_coefficients(model, pd):
    """Noise loadings of the (P, Q) system: sigma_P = v^T S and (I - Pi) S, S = sqrt(u . V)."""
    S = psd_sqrt(mixed_variance(pd.u, model))
    sigma_p = pd.v @ S
    sigma_q = (np.eye(model.p) - pd.pi) @ S
    return S, sigma_p, sigma_q


def wiener_normals(cfg, p, label="m-system", replicate=0):
    return replicate_generator(cfg.seed, replicate, label).standard_normal((cfg.n_steps, p))


def cir_normals_from_wiener(model, pd, Z):
    """Scalar standard normals driving P when the vector system uses ``Z`` (steps, p).

    sigma_P . Z has variance c = |sigma_P|^2; dividing by sqrt(c) gives the
    normal that makes ``simulate_cir`` reproduce P step for step.
    """
    _, sigma_p, _ = m_system_coefficients(model, pd)
    c = float(sigma_p @ sigma_p)
    if c == 0.0:
        return np.zeros(Z.shape[0])
    return (Z @ sigma_p) / np.sqrt(c)


def simulate_m_system(model, pd, y0, cfg, normals=None):
    """Integrate (P, Q) with shared increments and return M = P u + Q.

    The returned path carries ``components["P"]`` (scalar) and ``components["Q"]``.
    P is advanced exactly like ``simulate_cir`` (including the clamp at 0).
    """
    p = model.p
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (p,):
        raise InvalidInputError(f"y0 must have shape ({p},)")
    _, sigma_p, sigma_q = m_system_coefficients(model, pd)
    b = float(pd.v @ model.m_eps)
    c = float(sigma_p @ sigma_p)
    n = cfg.n_steps
    Z = wiener_normals(cfg, p) if normals is None else np.asarray(normals, dtype=float)
    if Z.shape != (n, p):
        raise InvalidInputError(f"normals must have shape ({n}, {p})")
    zp = cir_normals_from_wiener(model, pd, Z)
    P = np.empty(n + 1)
    Q = np.empty((n + 1, p))
    P[0] = float(pd.v @ y0)
    Q[0] = (np.eye(p) - pd.pi) @ y0
    dt = cfg.dt
    sqdt = np.sqrt(dt)
    bdt = b * dt
    q_drift = (pd.pi @ model.m_eps) * dt
    for s in range(n):
        x = P[s]
        root = np.sqrt(max(x, 0.0))
        # same operation order as the scalar kernel
        P[s + 1] = max((x + bdt) + (np.sqrt(c * max(x, 0.0)) * sqdt) * zp[s], 0.0)
        Q[s + 1] = Q[s] - q_drift + root * sqdt * (sigma_q @ Z[s])
    M = P[:, None] * pd.u[None, :] + Q
    return SdePath(times=cfg.times, values=M, components={"P": P, "Q": Q})


def project_limit(m_path, model, pd, tol=RAY_TOL):
    """Limit process Pi(M_t + t m_eps) and its Perron coordinate v.(M_t + t m_eps).

    Returns ``(x_path, y_path)``; raises if X_t strays from Y_t * u.
    """
    t = np.asarray(m_path.times, dtype=float)
    shifted = np.asarray(m_path.values, dtype=float) + t[:, None] * model.m_eps[None, :]
    X = shifted @ pd.pi.T
    Y = shifted @ pd.v
    gap = np.abs(X - Y[:, None] * pd.u[None, :])
    scale = np.maximum(1.0, np.abs(X))
    if np.any(gap > tol * scale):
        raise ConsistencyError(f"ray identity violated by {gap.max():.3e}")
    return SdePath(times=t, values=X), SdePath(times=t, values=Y)


def cir_moments(b, c, x0, t):
    """Exact mean and variance of the CIR marginal at time t (zero mean reversion)."""
    mean = x0 + b * t
    var = c * x0 * t + c * b * t**2 / 2.0
    return mean, var
