import numpy as np
import pytest

from critbranch.errors import ConsistencyError, DomainError, InvalidInputError, NotPSDError
from critbranch.model import LimitCoefficients, limit_coefficients
from critbranch.sde import (
    SdeConfig,
    SdePath,
    besq_dimension,
    cir_ensemble,
    cir_moments,
    cir_normals_from_wiener,
    m_system_coefficients,
    project_limit,
    psd_sqrt,
    simulate_cir,
    simulate_m_system,
    wiener_normals,
)

from conftest import SEED, se_of_mean


@pytest.mark.parametrize(
    "A, S",
    [(np.eye(3), np.eye(3)), (np.zeros((2, 2)), np.zeros((2, 2))),
     (np.diag([4.0, 9.0]), np.diag([2.0, 3.0]))],
)
def test_psd_sqrt_examples(A, S):
    np.testing.assert_allclose(psd_sqrt(A), S, atol=1e-14)


def test_psd_sqrt_squares_back(ref2, pd2):
    from critbranch.model import mixed_variance

    A = mixed_variance(pd2.u, ref2)
    S = psd_sqrt(A)
    np.testing.assert_allclose(S @ S, A, atol=1e-14)
    np.testing.assert_allclose(S, S.T, atol=0)


def test_psd_sqrt_rejects():
    with pytest.raises(NotPSDError):
        psd_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(NotPSDError):
        psd_sqrt([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        psd_sqrt(np.ones(3))
    # tiny negative rounding noise is clamped
    psd_sqrt(np.diag([1.0, -1e-12]))


def test_besq_dimension():
    assert besq_dimension(LimitCoefficients(1.0, 1.0)) == 4.0
    assert besq_dimension(LimitCoefficients(0.0, 1.0)) == 0.0
    assert besq_dimension(LimitCoefficients(1.0, 2.0)) == 2.0
    with pytest.raises(DomainError):
        besq_dimension(LimitCoefficients(1.0, 0.0))


def test_config_validation():
    for kw in ({"dt": 0}, {"t_max": -1}, {"dt": 2.0, "t_max": 1.0}, {"scheme": "milstein"}):
        with pytest.raises(InvalidInputError):
            SdeConfig(**kw)
    assert SdeConfig(dt=0.1, t_max=1.0).n_steps == 10


def test_cir_deterministic_drift(backend):
    path = simulate_cir(2.0, 0.0, 1.5, SdeConfig(dt=1e-3, t_max=2.0))
    np.testing.assert_allclose(path.values, 1.5 + 2.0 * path.times, atol=1e-12)


def test_cir_absorbed_at_zero(backend):
    path = simulate_cir(0.0, 1.0, 0.0, SdeConfig(dt=1e-2, t_max=1.0, seed=3))
    assert not np.any(path.values)


def test_cir_rejects_bad_params():
    cfg = SdeConfig()
    for b, c, x0 in ((-1, 1, 0), (1, -1, 0), (1, 1, -0.5)):
        with pytest.raises(InvalidInputError):
            simulate_cir(b, c, x0, cfg)


def test_cir_backends_identical():
    import os

    cfg = SdeConfig(dt=1e-2, t_max=1.0, seed=4)
    out = {}
    for name in ("numba", "numpy"):
        os.environ["CRITBRANCH_BACKEND"] = name
        try:
            out[name] = cir_ensemble(1.0, 1.0, 0.3, cfg, 300, times=[0.0, 0.5, 1.0])
        finally:
            del os.environ["CRITBRANCH_BACKEND"]
    np.testing.assert_array_equal(out["numba"], out["numpy"])


def test_cir_ensemble_matches_single_paths():
    cfg = SdeConfig(dt=1e-2, t_max=1.0, seed=4)
    ens = cir_ensemble(1.0, 1.0, 0.0, cfg, 5, times=[1.0, 0.25], label="cir")
    for r in range(5):
        from critbranch.rng import replicate_generator

        z = replicate_generator(4, r, "cir").standard_normal(cfg.n_steps)
        path = simulate_cir(1.0, 1.0, 0.0, cfg, normals=z)
        assert ens[r, 0] == path.values[100] and ens[r, 1] == path.values[25]


def test_cir_ensemble_jobs_invariant():
    cfg = SdeConfig(dt=1e-2, t_max=1.0, seed=4)
    a = cir_ensemble(1.0, 1.0, 0.0, cfg, 5000, jobs=1)
    b = cir_ensemble(1.0, 1.0, 0.0, cfg, 5000, jobs=3)
    np.testing.assert_array_equal(a, b)


def test_cir_ensemble_times_outside_horizon():
    with pytest.raises(InvalidInputError):
        cir_ensemble(1, 1, 0, SdeConfig(t_max=1.0), 3, times=[1.5])


@pytest.mark.slow
def test_cir_ensemble_moments():
    N = 10**5
    x = cir_ensemble(1.0, 1.0, 0.0, SdeConfig(dt=1e-3, t_max=1.0, seed=SEED), N)[:, 0]
    mean, var = cir_moments(1.0, 1.0, 0.0, 1.0)
    assert abs(x.mean() - mean) <= 4 * se_of_mean(x)
    # SE of the sample variance from the fourth central moment
    se_var = np.sqrt((np.mean((x - x.mean()) ** 4) - x.var() ** 2) / N)
    assert abs(x.var(ddof=1) - var) <= 4 * se_var
    assert np.all(x >= 0)


def test_cir_moments_formula():
    assert cir_moments(1.0, 1.0, 0.0, 1.0) == (1.0, 0.5)
    assert cir_moments(2.0, 0.5, 3.0, 2.0) == (7.0, 0.5 * 3 * 2 + 0.5 * 2 * 4 / 2)


def test_m_system_shared_increments_reproduce_cir(ref2, pd2):
    lc = limit_coefficients(ref2, pd2)
    cfg = SdeConfig(dt=1e-3, t_max=2.0, seed=SEED)
    Z = wiener_normals(cfg, ref2.p)
    for y0 in (pd2.u, np.array([0.0, 0.0]), np.array([2.0, 0.5])):
        path = simulate_m_system(ref2, pd2, y0, cfg, normals=Z)
        _, y = project_limit(path, ref2, pd2)
        cir = simulate_cir(lc.b, lc.c, float(pd2.v @ y0), cfg,
                           normals=cir_normals_from_wiener(ref2, pd2, Z))
        assert np.max(np.abs(y.values - cir.values)) <= 1e-10
        assert np.all(path.components["P"] >= 0)


def test_m_system_initial_decomposition(ref2, pd2):
    path = simulate_m_system(ref2, pd2, pd2.u, SdeConfig(dt=0.1, t_max=0.2))
    assert path.components["P"][0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(path.components["Q"][0], 0.0, atol=1e-12)


def test_m_system_zero_noise_cancels_drift(det1):
    from critbranch.perron import perron_data

    pd = perron_data(det1.m_xi)
    y0 = np.array([0.7])
    path = simulate_m_system(det1, pd, y0, SdeConfig(dt=0.01, t_max=1.0))
    np.testing.assert_allclose(path.values, np.tile(y0, (101, 1)), atol=1e-12)
    x, _ = project_limit(path, det1, pd)
    b = limit_coefficients(det1, pd).b
    np.testing.assert_allclose(x.values[:, 0], pd.pi[0, 0] * y0[0] + path.times * b * pd.u[0],
                               atol=1e-12)


def test_m_system_shape_checks(ref2, pd2):
    cfg = SdeConfig(dt=0.1, t_max=1.0)
    with pytest.raises(InvalidInputError):
        simulate_m_system(ref2, pd2, [1.0], cfg)
    with pytest.raises(InvalidInputError):
        simulate_m_system(ref2, pd2, [1.0, 1.0], cfg, normals=np.zeros((3, 2)))


def test_m_system_coefficients(ref2, pd2):
    S, sp, sq = m_system_coefficients(ref2, pd2)
    assert sp @ sp == pytest.approx(1.0, abs=1e-12)  # equals c
    np.testing.assert_allclose(pd2.v @ sq, 0.0, atol=1e-14)  # Q noise stays in ker v


def test_project_limit_ray(ref2, pd2):
    t = np.array([0.0])
    x, y = project_limit(SdePath(times=t, values=np.array([2.5 * pd2.u])), ref2, pd2)
    np.testing.assert_allclose(x.values[0], 2.5 * pd2.u, atol=1e-14)
    assert y.values[0] == pytest.approx(2.5)
    path = simulate_m_system(ref2, pd2, [1.0, 3.0], SdeConfig(dt=1e-2, t_max=1.0, seed=2))
    x, _ = project_limit(path, ref2, pd2)
    resid = x.values - x.values @ pd2.pi.T
    assert np.max(np.abs(resid)) <= 1e-12


def test_project_limit_detects_wrong_projector(ref2):
    from dataclasses import replace

    from critbranch.perron import perron_data

    pd = perron_data(ref2.m_xi)
    bad = replace(pd, pi=np.eye(2))
    path = SdePath(times=np.array([0.0]), values=np.array([[1.0, 0.0]]))
    with pytest.raises(ConsistencyError):
        project_limit(path, ref2, bad)
