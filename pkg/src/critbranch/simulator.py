"""Exact-law Monte Carlo of the branching recursion and its path functionals.

Trajectories are integer arrays of shape (K+1, p); ensembles stack them as
(N, K+1, p). The martingale differences, step processes and reconstruction
maps below accept either a single trajectory or a stacked ensemble.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels as _k
from .errors import ConsistencyError, InvalidInputError, PopulationOverflowError
from .rng import replicate_generator

DEFAULT_CAP = 2**48
R_PROCESS_TOL = 1e-8


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    seed: int = None
    model_id: str = None
    replicate: int = 0

    @property
    def K(self):
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class MartingalePath:
    diffs: np.ndarray


@dataclass(frozen=True)
class StepProcess:
    n: int
    grid: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class _PackedLaws:
    off_kind: np.ndarray
    off_start: np.ndarray
    atoms: np.ndarray
    cond: np.ndarray
    off_rates: np.ndarray
    imm_kind: int
    imm_atoms: np.ndarray
    imm_cdf: np.ndarray
    imm_rates: np.ndarray

    def args(self):
        return (self.off_kind, self.off_start, self.atoms, self.cond, self.off_rates,
                self.imm_kind, self.imm_atoms, self.imm_cdf, self.imm_rates)


_PACK_CACHE = {}


def pack_laws(model):
    """Flatten the model's laws into the arrays the kernels consume."""
    key = id(model)
    hit = _PACK_CACHE.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    p = model.p
    off_kind = np.zeros(p, dtype=np.int64)
    off_start = np.zeros(p + 1, dtype=np.int64)
    atom_rows, cond_rows = [], []
    off_rates = np.zeros((p, p))
    for i, law in enumerate(model.offspring):
        if law.kind == "finite":
            keep = law.probs > 0
            atoms, probs = law.atoms[keep], law.probs[keep]
            # zero atom last: it then absorbs the remainder without a draw
            order = np.argsort(~np.any(atoms > 0, axis=1), kind="stable")
            atoms, probs = atoms[order], probs[order]
            tail = np.cumsum(probs[::-1])[::-1]
            cond = np.where(tail > 0, probs / np.where(tail > 0, tail, 1.0), 1.0)
            cond[-1] = 1.0
            atom_rows.append(atoms)
            cond_rows.append(np.minimum(cond, 1.0))
            off_start[i + 1] = off_start[i] + atoms.shape[0]
        else:
            off_kind[i] = 1
            off_rates[i] = law.rates
            off_start[i + 1] = off_start[i]
    atoms = np.concatenate(atom_rows) if atom_rows else np.zeros((0, p), dtype=np.int64)
    cond = np.concatenate(cond_rows) if cond_rows else np.zeros(0)
    imm = model.immigration
    if imm.kind == "finite":
        keep = imm.probs > 0
        imm_atoms = np.ascontiguousarray(imm.atoms[keep])
        imm_cdf = np.cumsum(imm.probs[keep])
        imm_cdf[-1] = 1.0
        packed = _PackedLaws(off_kind, off_start, np.ascontiguousarray(atoms), cond,
                             off_rates, 0, imm_atoms, imm_cdf, np.zeros(p))
    else:
        packed = _PackedLaws(off_kind, off_start, np.ascontiguousarray(atoms), cond,
                             off_rates, 1, np.zeros((1, p), dtype=np.int64), np.ones(1),
                             np.array(imm.rates, dtype=float))
    _PACK_CACHE[key] = (model, packed)
    return packed


def _as_state(x, p):
    x = np.asarray(x)
    if x.shape != (p,):
        raise InvalidInputError(f"state must have shape ({p},), got {x.shape}")
    if np.any(x < 0) or np.any(x != np.floor(x)):
        raise InvalidInputError("state must be a nonnegative integer vector")
    return x.astype(np.int64)


def step(x_prev, model, rng, cap=DEFAULT_CAP, backend=None):
    """One generation: offspring of every individual in ``x_prev`` plus immigrants."""
    x_prev = _as_state(x_prev, model.p)
    out = np.empty(model.p, dtype=np.int64)
    _k.kernels(backend).branch_step(x_prev, out, *pack_laws(model).args(), rng)
    if np.any(out > cap):
        raise PopulationOverflowError(
            f"population {out.tolist()} exceeds cap {cap}", step=1
        )
    return out


def _run_path(x0, K, packed, gen, cap, ker, out=None):
    p = x0.shape[0]
    if out is None:
        out = np.empty((K + 1, p), dtype=np.int64)
    bad = ker.branch_path(x0, out, *packed.args(), gen, cap)
    return out, int(bad)


def simulate(model, x0, K, seed, replicate=0, label="trajectory", cap=DEFAULT_CAP,
             backend=None):
    """Trajectory X_0..X_K, deterministic in (model, x0, K, seed, replicate, label)."""
    if K < 0:
        raise InvalidInputError("K must be nonnegative")
    x0 = _as_state(x0, model.p)
    gen = replicate_generator(seed, replicate, label)
    states, bad = _run_path(x0, K, pack_laws(model), gen, cap, _k.kernels(backend))
    if bad:
        raise PopulationOverflowError(
            f"population exceeded cap {cap} at step {bad}", step=bad, replicate=replicate
        )
    return Trajectory(states=states, seed=seed, model_id=model.model_id, replicate=replicate)


def default_jobs():
    return os.cpu_count() or 1


def simulate_ensemble(model, x0, K, N, seed, label="ensemble", cap=DEFAULT_CAP,
                      jobs=None, backend=None):
    """``N`` independent trajectories as an int64 array of shape (N, K+1, p).

    ``x0`` is a single state or an (N, p) array of per-replicate initial
    states. Replicate ``r`` always uses stream ``(seed, label, r)``, so the
    result does not depend on ``jobs``.
    """
    if N < 1:
        raise InvalidInputError("N must be positive")
    if K < 0:
        raise InvalidInputError("K must be nonnegative")
    x0 = np.asarray(x0)
    if x0.ndim == 1:
        x0 = np.broadcast_to(_as_state(x0, model.p), (N, model.p))
    elif x0.shape != (N, model.p):
        raise InvalidInputError(f"x0 must have shape ({model.p},) or ({N}, {model.p})")
    x0 = np.ascontiguousarray(x0, dtype=np.int64)
    which = backend or _k.backend()
    ker = _k.kernels(which)
    packed = pack_laws(model)
    out = np.empty((N, K + 1, model.p), dtype=np.int64)
    failures = []

    def run(block):
        for r in block:
            gen = replicate_generator(seed, r, label)
            _, bad = _run_path(x0[r], K, packed, gen, cap, ker, out=out[r])
            if bad:
                failures.append((r, bad))
                return

    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if which != "numba":
        jobs = 1
    if jobs == 1 or N < 64:
        run(range(N))
    else:
        nblocks = min(N, 4 * jobs)
        bounds = np.linspace(0, N, nblocks + 1).astype(int)
        blocks = [range(bounds[i], bounds[i + 1]) for i in range(nblocks)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, blocks))
    if failures:
        r, bad = min(failures)
        raise PopulationOverflowError(
            f"replicate {r}: population exceeded cap {cap} at step {bad}",
            step=bad, replicate=r,
        )
    return out


def initial_states(model, n, N, seed, pd=None, label="initial"):
    """Per-replicate ``X_0^{(n)}`` from the model's initial-state setting, shape (N, p)."""
    init = model.initial
    if init.kind == "fixed":
        return np.broadcast_to(np.asarray(init.x0, dtype=np.int64), (N, model.p)).copy()
    if pd is None:
        from .perron import perron_data

        pd = perron_data(model.m_xi)
    law = init.law
    if law["kind"] == "point":
        z = np.full(N, float(law["value"]))
    else:
        z = np.array([
            replicate_generator(seed, r, label).gamma(law["shape"], law["scale"])
            for r in range(N)
        ])
    return np.rint(n * z[:, None] * pd.u[None, :]).astype(np.int64)


def martingale_diffs(states, model):
    """``M_k = X_k - m_xi X_{k-1} - m_eps`` for k = 1..K (batched over leading axes)."""
    X = np.asarray(states, dtype=float)
    if X.shape[-2] < 2:
        raise InvalidInputError("need at least two states to form a martingale difference")
    return X[..., 1:, :] - X[..., :-1, :] @ model.m_xi.T - model.m_eps


def martingale_path(traj, model):
    states = traj.states if isinstance(traj, Trajectory) else traj
    return MartingalePath(diffs=martingale_diffs(states, model))


def reconstruct_states(x0, diffs, model):
    """Rebuild X_0..X_K from X_0 and M_1..M_K through X_k = m_xi X_{k-1} + M_k + m_eps."""
    diffs = np.asarray(diffs, dtype=float)
    K = diffs.shape[-2]
    out = np.empty(diffs.shape[:-2] + (K + 1, model.p))
    out[..., 0, :] = x0
    for k in range(1, K + 1):
        out[..., k, :] = out[..., k - 1, :] @ model.m_xi.T + diffs[..., k - 1, :] + model.m_eps
    return out


def floor_index(n, t):
    """``floor(n t)`` with ``n t`` snapped to 1e-9 so 100 * 0.29 maps to 29."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InvalidInputError("times must be nonnegative")
    return np.floor(np.round(n * t, 9)).astype(np.int64)


def _check_horizon(states, idx):
    K = np.asarray(states).shape[-2] - 1
    if np.any(idx > K):
        raise InvalidInputError(
            f"time grid needs index {int(np.max(idx))} but trajectory stops at K={K}"
        )


def _states(traj):
    return traj.states if isinstance(traj, Trajectory) else np.asarray(traj)


def scale_step(traj, n, t_grid):
    """Step process ``n^{-1} X_{floor(nt)}`` at the requested times."""
    X = _states(traj)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    idx = floor_index(n, t_grid)
    _check_horizon(X, idx)
    return StepProcess(n=n, grid=t_grid, values=X[..., idx, :] / n)


def martingale_step_values(states, model, n):
    """``n^{-1}(X_0 + sum_{k<=j} M_k)`` for every j = 0..K (batched)."""
    X = np.asarray(states, dtype=float)
    out = np.empty_like(X)
    out[..., 0, :] = X[..., 0, :]
    if X.shape[-2] > 1:
        out[..., 1:, :] = X[..., :1, :] + np.cumsum(martingale_diffs(X, model), axis=-2)
    return out / n


def scale_martingale(traj, model, n, t_grid):
    X = _states(traj)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    idx = floor_index(n, t_grid)
    _check_horizon(X, idx)
    vals = martingale_step_values(X, model, n)
    return StepProcess(n=n, grid=t_grid, values=vals[..., idx, :])


def mean_matrix_powers_applied(model, x0, K):
    """Rows ``m_xi^k x0`` for k = 0..K (batched over leading axes of x0)."""
    x0 = np.asarray(x0, dtype=float)
    out = np.empty(x0.shape[:-1] + (K + 1, model.p))
    out[..., 0, :] = x0
    for k in range(1, K + 1):
        out[..., k, :] = out[..., k - 1, :] @ model.m_xi.T
    return out


def centered_step(traj, model, n, t_grid, pd=None):
    """``n^{-1}(X_{floor(nt)} - m_xi^{floor(nt)} X_0)`` at the requested times."""
    X = _states(traj)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    idx = floor_index(n, t_grid)
    _check_horizon(X, idx)
    kmax = int(idx.max()) if idx.size else 0
    drift = mean_matrix_powers_applied(model, X[..., 0, :], kmax)
    return StepProcess(n=n, grid=t_grid, values=(X[..., idx, :] - drift[..., idx, :]) / n)


def r_process(traj, model, pd, n, t, tol=R_PROCESS_TOL, return_discrepancy=False):
    """``R_t = Pi (M_t^{(n)} + t m_eps)`` computed two ways; returns the Pi X form.

    The second form ``n^{-1} Pi X_{floor(nt)} + n^{-1}(nt - floor(nt)) Pi m_eps``
    relies on ``Pi m_xi = Pi``; a disagreement beyond ``tol`` raises.
    """
    X = _states(traj)
    j = int(floor_index(n, t))
    _check_horizon(X, np.array([j]))
    frac = n * t - j
    if abs(frac) < 1e-9:
        frac = 0.0
    mart = martingale_step_values(X[..., : j + 1, :], model, n)[..., j, :]
    via_martingale = (mart + t * model.m_eps) @ pd.pi.T
    via_state = X[..., j, :] @ pd.pi.T / n + (frac / n) * (pd.pi @ model.m_eps)
    gap = float(np.max(np.abs(via_martingale - via_state))) if via_state.size else 0.0
    if gap > tol:
        raise ConsistencyError(f"R-process forms disagree by {gap:.3e} (> {tol:g})")
    if return_discrepancy:
        return via_state, gap
    return via_state


def apply_psi_n(f_values, model, n, t_grid):
    """Reconstruction map Psi_n applied to ``f`` sampled at j/n, j = 0..J.

    Psi_n(f)(t) = m^{[nt]} f(0) + sum_{j=1}^{[nt]} m^{[nt]-j} (f(j/n) - f((j-1)/n) + m_eps/n),
    evaluated by the equivalent one-step recursion.
    """
    f = np.asarray(f_values, dtype=float)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    idx = floor_index(n, t_grid)
    J = f.shape[-2] - 1
    if np.any(idx > J):
        raise InvalidInputError(
            f"grid misalignment: need f at {int(idx.max())}/n but only j <= {J} supplied"
        )
    kmax = int(idx.max()) if idx.size else 0
    y = np.empty(f.shape[:-2] + (kmax + 1, f.shape[-1]))
    y[..., 0, :] = f[..., 0, :]
    inc = model.m_eps / n
    for j in range(1, kmax + 1):
        y[..., j, :] = y[..., j - 1, :] @ model.m_xi.T + (f[..., j, :] - f[..., j - 1, :]) + inc
    return StepProcess(n=n, grid=t_grid, values=y[..., idx, :])


def write_trajectories_csv(path, ensemble, start_replicate=0):
    """CSV with columns replicate, k, X_1..X_p (one row per replicate and step)."""
    ens = np.asarray(ensemble)
    if ens.ndim == 2:
        ens = ens[None]
    N, K1, p = ens.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["replicate", "k"] + [f"X_{i + 1}" for i in range(p)])
        for r in range(N):
            for k in range(K1):
                w.writerow([start_replicate + r, k] + ens[r, k].tolist())
