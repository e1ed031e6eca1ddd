"""First and second moments of X_k and M_k, and an exact enumeration oracle."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .errors import ConsistencyError, InvalidInputError, StateSpaceError
from .model import DiscreteLaw, mixed_variance

VAR_CHECK_TOL = 1e-8
POISSON_TRUNCATION = 1e-12


@dataclass(frozen=True)
class MomentState:
    k: int
    mean: np.ndarray
    cov: np.ndarray


def _vec(x, p, what):
    x = np.asarray(x, dtype=float)
    if x.shape != (p,):
        raise InvalidInputError(f"{what} must have shape ({p},), got {x.shape}")
    return x


def _mat(x, p, what):
    x = np.asarray(x, dtype=float)
    if x.shape != (p, p):
        raise InvalidInputError(f"{what} must have shape ({p}, {p}), got {x.shape}")
    return x


def exact_mean(model, mean0, k):
    """E X_k via E X_j = m_xi E X_{j-1} + m_eps."""
    if k < 0:
        raise InvalidInputError("k must be nonnegative")
    mu = _vec(mean0, model.p, "mean0").copy()
    for _ in range(k):
        mu = model.m_xi @ mu + model.m_eps
    return mu


def exact_means(model, mean0, k):
    """Rows E X_0..E X_k."""
    out = np.empty((k + 1, model.p))
    out[0] = _vec(mean0, model.p, "mean0")
    for j in range(1, k + 1):
        out[j] = model.m_xi @ out[j - 1] + model.m_eps
    return out


def martingale_second_moment(model, mean_prev):
    """E[M_k M_k^T] = V_eps + (E X_{k-1}) . V_xi."""
    mean_prev = _vec(mean_prev, model.p, "mean_prev")
    if np.any(mean_prev < 0):
        raise InvalidInputError("mean_prev must be nonnegative")
    return model.V_eps + mixed_variance(mean_prev, model)


def variance_closed_form(model, mean0, cov0, k):
    """Three-term closed form of Var X_k, summed term by term.

    sum_{j<k} m^j [V_eps + (m^{k-j-1} EX_0) . V] m^{jT}
      + m^k Var X_0 m^{kT}
      + sum_{j<=k-2} m^j sum_{l<=k-j-2} [(m^l m_eps) . V] m^{jT}
    """
    p = model.p
    mean0 = _vec(mean0, p, "mean0")
    cov0 = _mat(cov0, p, "cov0")
    m = model.m_xi
    powers = [np.eye(p)]
    for _ in range(k):
        powers.append(powers[-1] @ m)
    mix = lambda a: mixed_variance(a, model, allow_negative=True)  # noqa: E731
    first = np.zeros((p, p))
    for j in range(k):
        inner = model.V_eps + mix(powers[k - j - 1] @ mean0)
        first += powers[j] @ inner @ powers[j].T
    second = powers[k] @ cov0 @ powers[k].T
    third = np.zeros((p, p))
    for j in range(k - 1):
        acc = np.zeros((p, p))
        for l in range(k - j - 1):
            acc += mix(powers[l] @ model.m_eps)
        third += powers[j] @ acc @ powers[j].T
    return first + second + third


def variance_recursion(model, mean0, cov0, k):
    """Var X_k = m Var X_{k-1} m^T + V_eps + (E X_{k-1}) . V_xi, iterated."""
    p = model.p
    mu = _vec(mean0, p, "mean0").copy()
    var = _mat(cov0, p, "cov0").copy()
    for _ in range(k):
        var = model.m_xi @ var @ model.m_xi.T + model.V_eps + mixed_variance(
            mu, model, allow_negative=True
        )
        mu = model.m_xi @ mu + model.m_eps
    return var


def exact_variance(model, mean0, cov0, k, tol=VAR_CHECK_TOL):
    """Var X_k from the closed form, cross-checked against the one-step recursion."""
    if k < 0:
        raise InvalidInputError("k must be nonnegative")
    cov0 = _mat(cov0, model.p, "cov0")
    if np.max(np.abs(cov0 - cov0.T), initial=0.0) > 1e-10:
        raise InvalidInputError("cov0 must be symmetric")
    closed = variance_closed_form(model, mean0, cov0, k)
    rec = variance_recursion(model, mean0, cov0, k)
    scale = max(1.0, float(np.max(np.abs(rec))))
    gap = float(np.max(np.abs(closed - rec)))
    if gap > tol * scale:
        raise ConsistencyError(
            f"variance closed form and recursion disagree by {gap:.3e} at k={k}"
        )
    return closed


def moment_table(model, mean0, cov0, k_max):
    """MomentState for k = 0..k_max using the recursions."""
    mu = _vec(mean0, model.p, "mean0").copy()
    var = _mat(cov0, model.p, "cov0").copy()
    rows = [MomentState(0, mu.copy(), var.copy())]
    for k in range(1, k_max + 1):
        var = model.m_xi @ var @ model.m_xi.T + model.V_eps + mixed_variance(
            mu, model, allow_negative=True
        )
        mu = model.m_xi @ mu + model.m_eps
        rows.append(MomentState(k, mu.copy(), var.copy()))
    return rows


def write_moment_csv(path, rows):
    """CSV columns: k, mean_1..mean_p, cov_i_j for i <= j."""
    p = rows[0].mean.shape[0]
    pairs = [(i, j) for i in range(p) for j in range(i, p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["k"] + [f"mean_{i + 1}" for i in range(p)]
                   + [f"cov_{i + 1}_{j + 1}" for i, j in pairs])
        for row in rows:
            w.writerow([row.k] + [repr(float(x)) for x in row.mean]
                       + [repr(float(row.cov[i, j])) for i, j in pairs])


# -- exact enumeration ------------------------------------------------------


@dataclass(frozen=True)
class EnumeratedPmf:
    """Exact law of X_k as parallel arrays of atoms and probabilities."""

    atoms: np.ndarray
    probs: np.ndarray
    truncated: bool = False
    lost_mass: float = 0.0

    def as_dict(self):
        return {tuple(int(v) for v in a): float(q) for a, q in zip(self.atoms, self.probs)}

    def mean(self):
        return self.probs @ self.atoms

    def cov(self):
        c = self.atoms - self.mean()
        return (c.T * self.probs) @ c


def truncate_poisson_law(law, mass=POISSON_TRUNCATION):
    """Finite-support version of an independent-Poisson law.

    Each coordinate is cut where its upper tail drops below ``mass / p`` and
    renormalized. Returns ``(law, lost_mass)``.
    """
    if law.kind != "poisson":
        return law, 0.0
    p = law.p
    grids, pmfs, lost = [], [], 0.0
    for lam in law.rates:
        if lam == 0:
            grids.append(np.array([0]))
            pmfs.append(np.array([1.0]))
            continue
        top = int(stats.poisson.isf(mass / p, lam)) + 1
        ks = np.arange(top + 1)
        pm = stats.poisson.pmf(ks, lam)
        lost += 1.0 - pm.sum()
        grids.append(ks)
        pmfs.append(pm / pm.sum())
    mesh = np.meshgrid(*grids, indexing="ij")
    atoms = np.stack([g.ravel() for g in mesh], axis=1)
    probs = np.ones(atoms.shape[0])
    pm_mesh = np.meshgrid(*pmfs, indexing="ij")
    for pm in pm_mesh:
        probs = probs * pm.ravel()
    probs = probs / probs.sum()
    return DiscreteLaw("finite", p, atoms=atoms, probs=probs), float(lost)


def _law_array(law):
    """Dense pmf array indexed by atom coordinates; repeated atoms merge."""
    shape = tuple(int(v) + 1 for v in law.atoms.max(axis=0))
    arr = np.zeros(shape)
    np.add.at(arr, tuple(law.atoms.T), law.probs)
    return arr


def _pad_add(acc, x):
    if acc is None:
        return x.copy()
    shape = tuple(max(a, b) for a, b in zip(acc.shape, x.shape))
    if shape != acc.shape:
        grown = np.zeros(shape)
        grown[tuple(slice(0, n) for n in acc.shape)] = acc
        acc = grown
    acc[tuple(slice(0, n) for n in x.shape)] += x
    return acc


def _check_size(arr, cap):
    if arr.size > cap:
        raise StateSpaceError(f"enumeration exceeded {cap} atoms (dense grid {arr.shape})")
    return arr


def enumerate_distribution(model, x0, k, cap=10**6):
    """Exact pmf of X_k from X_0 = x0 by iterated convolution.

    Poisson laws are replaced by their truncations at mass ``1 - 1e-12``; the
    returned pmf then carries ``truncated=True`` and the discarded mass.
    One generation maps the pmf q to I * sum_x q(x) L_1^{*x_1} * ... * L_p^{*x_p}
    (I immigration, L_i offspring laws), evaluated on dense grids by grouping
    states on one coordinate at a time.
    """
    p = model.p
    x0 = tuple(int(v) for v in np.asarray(x0).ravel())
    if len(x0) != p or min(x0) < 0:
        raise InvalidInputError(f"x0 must be a nonnegative integer vector of length {p}")
    lost = 0.0
    laws = []
    for law in model.offspring:
        fl, lm = truncate_poisson_law(law)
        lost += lm
        laws.append(_law_array(fl))
    imm, lm = truncate_poisson_law(model.immigration)
    lost += lm
    imm = _law_array(imm)
    delta = np.ones((1,) * p)
    powers = [[delta] for _ in range(p)]  # powers[i][c] = c-fold convolution of law i

    def conv_power(i, c):
        cache = powers[i]
        while len(cache) <= c:
            cache.append(_check_size(
                signal.convolve(cache[-1], laws[i], method="direct"), cap))
        return cache[c]

    def push(q, i):
        # sum_x q(x) L_i^{*x_i} * ... * L_p^{*x_p} over the trailing p - i coordinates
        acc = None
        for xi in range(q.shape[0]):
            sub = q[xi]
            if not np.any(sub):
                continue
            if i == p - 1:
                term = float(sub) * conv_power(i, xi)
            else:
                term = signal.convolve(conv_power(i, xi), push(sub, i + 1), method="direct")
            acc = _check_size(_pad_add(acc, term), cap)
        return acc

    pmf = np.zeros(tuple(v + 1 for v in x0))
    pmf[x0] = 1.0
    for _ in range(k):
        pmf = _check_size(signal.convolve(push(pmf, 0), imm, method="direct"), cap)
    idx = np.nonzero(pmf > 0)
    atoms = np.stack(idx, axis=1).astype(np.int64).reshape(-1, p)
    probs = pmf[idx]
    return EnumeratedPmf(atoms=atoms, probs=probs, truncated=lost > 0, lost_mass=lost)


# -- growth orders ----------------------------------------------------------


def growth_diagnostics(model, n_list, horizon, N=10**4, seed=0, x0_fn=None, jobs=None):
    """Empirical growth of E||X_k||/(k+n) and E||M_k||^4/(k+n)^2.

    ``x0_fn(n)`` gives X_0^{(n)} (default: zero). Rows hold per-(n, k) ratio
    estimates with a normal 95% half-width; ``summary`` reports, per n, the
    largest ratio over the grid and whether the late-horizon maximum stays
    within twice the early one (a boundedness heuristic, no constant is asserted).
    """
    from .simulator import martingale_diffs, simulate_ensemble

    rows, summary = [], []
    for n in n_list:
        x0 = np.zeros(model.p, dtype=np.int64) if x0_fn is None else np.asarray(x0_fn(n))
        ens = simulate_ensemble(model, x0, horizon, N, seed, label=f"growth/n={n}", jobs=jobs)
        norms = np.linalg.norm(ens.astype(float), axis=-1)  # (N, K+1)
        M4 = np.linalg.norm(martingale_diffs(ens, model), axis=-1) ** 4  # (N, K)
        exact = exact_means(model, x0, horizon).sum(axis=1)  # E||X_k||_1, exact
        x_ratio, m_ratio = [], []
        for k in range(horizon + 1):
            scale = k + n
            xr = norms[:, k].mean() / scale
            xh = 1.96 * norms[:, k].std(ddof=1) / np.sqrt(N) / scale if N > 1 else 0.0
            row = {
                "n": int(n), "k": k,
                "x_norm_ratio": float(xr), "x_norm_ratio_ci": float(xh),
                "x_l1_ratio_exact": float(exact[k] / scale),
            }
            if k >= 1:
                mr = M4[:, k - 1].mean() / scale**2
                mh = 1.96 * M4[:, k - 1].std(ddof=1) / np.sqrt(N) / scale**2 if N > 1 else 0.0
                row.update(m4_ratio=float(mr), m4_ratio_ci=float(mh))
                m_ratio.append(mr)
            x_ratio.append(xr)
            rows.append(row)
        half = max(1, len(x_ratio) // 2)
        bounded_x = max(x_ratio[half:]) <= 2 * max(max(x_ratio[:half]), 1e-300)
        mh = max(1, len(m_ratio) // 2)
        bounded_m = (not m_ratio) or max(m_ratio[mh:]) <= 2 * max(max(m_ratio[:mh]), 1e-300)
        summary.append({
            "n": int(n),
            "max_x_ratio": float(max(x_ratio)),
            "max_m4_ratio": float(max(m_ratio)) if m_ratio else 0.0,
            "bounded": bool(bounded_x and bounded_m),
        })
    return {"rows": rows, "summary": summary}
