"""Hot inner loops, compiled with numba when available.

The branching kernels are written once and built twice by ``_build``: as plain
Python (the fallback) and through ``numba.njit``. The CIR Euler kernel has a
loop form for numba and a form vectorized across replicates for numpy; both
perform the same floating-point operations in the same order.

Backend selection happens per call through ``backend()``, which reads the
``CRITBRANCH_BACKEND`` environment variable (``numba`` or ``numpy``).
"""

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

BACKEND_ENV = "CRITBRANCH_BACKEND"


def backend():
    """Active backend name: ``"numba"`` or ``"numpy"``."""
    choice = os.environ.get(BACKEND_ENV, "").strip().lower()
    if choice in ("numpy", "python", "0", "off"):
        return "numpy"
    if choice not in ("", "numba", "1", "on"):
        raise ValueError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {choice!r}")
    return "numba" if HAVE_NUMBA else "numpy"


def _build(decorate):
    @decorate
    def branch_step(x, out, off_kind, off_start, atoms, cond, off_rates,
                    imm_kind, imm_atoms, imm_cdf, imm_rates, gen):
        p = x.shape[0]
        for l in range(p):
            out[l] = 0
        for i in range(p):
            n = x[i]
            if n == 0:
                continue
            if off_kind[i] == 0:
                # multinomial split of the n parents over the support atoms,
                # as a chain of conditional binomials
                rem = n
                for j in range(off_start[i], off_start[i + 1]):
                    if rem == 0:
                        break
                    q = cond[j]
                    if q >= 1.0:
                        cnt = rem
                    else:
                        cnt = gen.binomial(rem, q)
                    if cnt > 0:
                        for l in range(p):
                            out[l] += cnt * atoms[j, l]
                        rem -= cnt
            else:
                for l in range(p):
                    lam = off_rates[i, l]
                    if lam > 0.0:
                        out[l] += gen.poisson(n * lam)
        if imm_kind == 0:
            s = imm_cdf.shape[0]
            idx = 0
            if s > 1:
                u = gen.random()
                while idx < s - 1 and u >= imm_cdf[idx]:
                    idx += 1
            for l in range(p):
                out[l] += imm_atoms[idx, l]
        else:
            for l in range(p):
                lam = imm_rates[l]
                if lam > 0.0:
                    out[l] += gen.poisson(lam)

    @decorate
    def branch_path(x0, out, off_kind, off_start, atoms, cond, off_rates,
                    imm_kind, imm_atoms, imm_cdf, imm_rates, gen, cap):
        """Fill ``out[0..K]``; return 0, or the first step whose state exceeds ``cap``."""
        p = x0.shape[0]
        for l in range(p):
            out[0, l] = x0[l]
        for k in range(1, out.shape[0]):
            branch_step(out[k - 1], out[k], off_kind, off_start, atoms, cond,
                        off_rates, imm_kind, imm_atoms, imm_cdf, imm_rates, gen)
            for l in range(p):
                if out[k, l] > cap:
                    return k
        return 0

    return SimpleNamespace(branch_step=branch_step, branch_path=branch_path)


PY = _build(lambda f: f)
_JIT = None


def jit_kernels():
    global _JIT
    if _JIT is None:
        if not HAVE_NUMBA:  # pragma: no cover
            raise RuntimeError("numba is not installed")
        _JIT = _build(numba.njit(nogil=True, cache=False))
        _JIT.cir_block = numba.njit(nogil=True, cache=True)(_cir_block_loops)
    return _JIT


def kernels(which=None):
    which = which or backend()
    return jit_kernels() if which == "numba" else PY


def _cir_block_loops(x0, b, c, dt, z, record_idx, out):
    sqdt = np.sqrt(dt)
    bdt = b * dt
    nrep = z.shape[0]
    nsteps = z.shape[1]
    nrec = record_idx.shape[0]
    for r in range(nrep):
        x = x0[r]
        j = 0
        while j < nrec and record_idx[j] == 0:
            out[r, j] = x
            j += 1
        for s in range(nsteps):
            y = (x + bdt) + (np.sqrt(c * max(x, 0.0)) * sqdt) * z[r, s]
            x = max(y, 0.0)
            while j < nrec and record_idx[j] == s + 1:
                out[r, j] = x
                j += 1


def _cir_block_numpy(x0, b, c, dt, z, record_idx, out):
    sqdt = np.sqrt(dt)
    bdt = b * dt
    x = np.array(x0, dtype=float)
    nsteps = z.shape[1]
    j = 0
    nrec = record_idx.shape[0]
    while j < nrec and record_idx[j] == 0:
        out[:, j] = x
        j += 1
    for s in range(nsteps):
        y = (x + bdt) + (np.sqrt(c * np.maximum(x, 0.0)) * sqdt) * z[:, s]
        x = np.maximum(y, 0.0)
        while j < nrec and record_idx[j] == s + 1:
            out[:, j] = x
            j += 1


def cir_block(x0, b, c, dt, z, record_idx, out, which=None):
    """Full-truncation Euler on a block of replicates driven by normals ``z``.

    ``z`` has shape (replicates, steps); values at the step indices in the
    sorted ``record_idx`` are written to ``out`` (replicates, len(record_idx)).
    """
    which = which or backend()
    x0 = np.ascontiguousarray(x0, dtype=float)
    z = np.ascontiguousarray(z, dtype=float)
    record_idx = np.ascontiguousarray(record_idx, dtype=np.int64)
    if which == "numba":
        jit_kernels().cir_block(x0, float(b), float(c), float(dt), z, record_idx, out)
    else:
        _cir_block_numpy(x0, float(b), float(c), float(dt), z, record_idx, out)
    return out
