import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from critbranch.errors import DomainError, InvalidInputError
from critbranch.model import (
    BUILTIN_MODELS,
    BranchingModel,
    DiscreteLaw,
    build_model,
    classify_criticality,
    limit_coefficients,
    load_model,
    mixed_variance,
    parse_model_text,
    require_critical,
)
from critbranch.perron import perron_data
from critbranch.simulator import step
from critbranch.rng import replicate_generator


def test_ref1_moments(ref1):
    assert ref1.m_xi.tolist() == [[1.0]]
    assert ref1.V_xi.tolist() == [[[1.0]]]
    assert ref1.m_eps.tolist() == [1.0]
    assert ref1.V_eps.tolist() == [[1.0]]


def test_ref2_moments(ref2):
    np.testing.assert_array_equal(ref2.m_xi, [[0, 0.5], [1, 0.5]])
    np.testing.assert_array_equal(ref2.V_xi[0], [[0, 0], [0, 1]])
    np.testing.assert_array_equal(ref2.V_xi[1], [[0.25, 0.25], [0.25, 0.25]])
    np.testing.assert_array_equal(ref2.m_eps, [1, 0])
    np.testing.assert_array_equal(ref2.V_eps, [[1, 0], [0, 0]])


def test_point_mass_model_has_zero_variances(det1, det2):
    for m in (det1, det2):
        assert m.is_deterministic
        assert not np.any(m.V_xi) and not np.any(m.V_eps)


def test_derived_arrays_are_read_only(ref2):
    with pytest.raises(ValueError):
        ref2.m_xi[0, 0] = 5.0


def test_mixed_variance_examples(ref2):
    np.testing.assert_array_equal(mixed_variance([1, 0], ref2), ref2.V_xi[0])
    np.testing.assert_array_equal(mixed_variance([0, 1], ref2), ref2.V_xi[1])
    np.testing.assert_array_equal(mixed_variance([0, 0], ref2), np.zeros((2, 2)))
    np.testing.assert_allclose(mixed_variance([1 / 3, 2 / 3], ref2),
                               [[1 / 6, 1 / 6], [1 / 6, 1 / 2]], atol=1e-15)


def test_mixed_variance_rejects_negative_weights(ref2):
    with pytest.raises(InvalidInputError):
        mixed_variance([-1, 1], ref2)
    mixed_variance([-1, 1], ref2, allow_negative=True)


def test_classification(ref1, ref2):
    assert classify_criticality(ref1) == ("critical", pytest.approx(1.0))
    label, rho = classify_criticality(ref2)
    assert label == "critical" and rho == pytest.approx(1.0, abs=1e-12)
    label, rho = classify_criticality(load_model("ref1-supercritical"))
    assert label == "supercritical" and rho == pytest.approx(1.5)
    sub = build_model({"p": 1, "offspring": [{"kind": "finite", "atoms": [[0], [1]],
                                                "probs": [0.5, 0.5]}],
                       "immigration": {"kind": "poisson", "rates": [1]}})
    assert classify_criticality(sub)[0] == "subcritical"
    with pytest.raises(DomainError):
        require_critical(sub)


def test_classification_requires_primitive():
    m = build_model({"p": 2,
                     "offspring": [{"kind": "point", "atom": [1, 0]},
                                   {"kind": "point", "atom": [0, 1]}],
                     "immigration": {"kind": "point", "atom": [0, 0]}})
    with pytest.raises(DomainError):
        classify_criticality(m)


def test_limit_coefficients(ref1, ref2, det1):
    for m in (ref1, ref2):
        lc = limit_coefficients(m)
        assert lc.b == pytest.approx(1.0, abs=1e-10)
        assert lc.c == pytest.approx(1.0, abs=1e-10)
        assert lc.delta == pytest.approx(4.0, abs=1e-9)
    lc = limit_coefficients(det1)
    assert lc.c == 0.0 and lc.delta is None
    with pytest.raises(DomainError):
        limit_coefficients(load_model("ref1-supercritical"))


def test_builtins_all_load():
    for name in BUILTIN_MODELS:
        m = load_model(name)
        assert len(m.model_id) == 64


def test_model_id_is_content_hash(ref2):
    again = build_model(ref2.to_config())
    assert again.model_id == ref2.model_id
    other = ref2.with_immigration(DiscreteLaw.poisson([1.0, 0.5]))
    assert other.model_id != ref2.model_id


def test_fraction_strings_accepted():
    m = build_model({"p": 1, "offspring": [{"kind": "finite", "atoms": [[0], [3]],
                                              "probs": ["2/3", "1/3"]}],
                     "immigration": {"kind": "point", "atom": [0]}})
    assert m.m_xi[0, 0] == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize(
    "config, fragment",
    [
        ({"p": 1, "offspring": [], "immigration": {"kind": "poisson", "rates": [1]}},
         "offspring"),
        ({"p": 1, "offspring": [{"kind": "finite", "atoms": [[0], [2]], "probs": [0.5, 0.6]}],
          "immigration": {"kind": "poisson", "rates": [1]}}, "sum"),
        ({"p": 1, "offspring": [{"kind": "finite", "atoms": [[-1], [2]], "probs": [0.5, 0.5]}],
          "immigration": {"kind": "poisson", "rates": [1]}}, "offspring/0"),
        ({"p": 2, "offspring": [{"kind": "point", "atom": [1, 0]},
                                {"kind": "point", "atom": [1]}],
          "immigration": {"kind": "poisson", "rates": [1, 0]}}, "offspring/1"),
        ({"p": 1, "offspring": [{"kind": "weird"}],
          "immigration": {"kind": "poisson", "rates": [1]}}, "offspring/0"),
        ({"offspring": [], "immigration": {}}, "p"),
    ],
)
def test_schema_errors_name_the_field(config, fragment):
    with pytest.raises(InvalidInputError, match=fragment):
        build_model(config)


def test_json_errors_have_line_and_column():
    with pytest.raises(InvalidInputError, match=r"line 2, column"):
        parse_model_text('{"p": 1,\n  "offspring": [,]}', source="bad.json")


def test_unknown_model_name():
    with pytest.raises(InvalidInputError, match="built-in"):
        load_model("no-such-model")


def test_ray_initial_state_config():
    m = build_model({"p": 1, "offspring": [{"kind": "finite", "atoms": [[0], [2]],
                                              "probs": [0.5, 0.5]}],
                     "immigration": {"kind": "poisson", "rates": [1]},
                     "initial": {"kind": "ray", "law": {"kind": "gamma", "shape": 2,
                                                        "scale": 0.5}}})
    assert m.initial.kind == "ray" and m.initial.law["shape"] == 2


def test_permutation_relabels_moments(ref2):
    perm = [1, 0]
    pm = ref2.permuted(perm)
    P = np.eye(2)[perm]
    np.testing.assert_allclose(pm.m_xi, P @ ref2.m_xi @ P.T)
    np.testing.assert_allclose(pm.m_eps, P @ ref2.m_eps)
    assert limit_coefficients(pm).b == pytest.approx(limit_coefficients(ref2).b)
    assert limit_coefficients(pm).c == pytest.approx(limit_coefficients(ref2).c)


@st.composite
def finite_laws(draw, p):
    s = draw(st.integers(1, 4))
    atoms = draw(st.lists(st.lists(st.integers(0, 4), min_size=p, max_size=p),
                          min_size=s, max_size=s))
    w = np.array(draw(st.lists(st.integers(1, 10), min_size=s, max_size=s)), dtype=float)
    return DiscreteLaw.finite(atoms, w / w.sum())


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_mixed_variance_is_linear_and_psd(data):
    p = data.draw(st.integers(1, 3))
    laws = tuple(data.draw(finite_laws(p)) for _ in range(p))
    m = BranchingModel(p=p, offspring=laws, immigration=DiscreteLaw.poisson([1.0] * p))
    a = np.array(data.draw(st.lists(st.floats(0, 5), min_size=p, max_size=p)))
    b = np.array(data.draw(st.lists(st.floats(0, 5), min_size=p, max_size=p)))
    np.testing.assert_allclose(mixed_variance(a + b, m),
                               mixed_variance(a, m) + mixed_variance(b, m), atol=1e-12)
    assert np.linalg.eigvalsh(mixed_variance(a, m)).min() >= -1e-10


@pytest.mark.slow
@pytest.mark.parametrize("name", ["ref1", "ref2"])
def test_sampled_laws_reproduce_moments(name):
    # N draws of a single offspring / immigration law, through the simulator kernel
    model = load_model(name)
    N = 10**5
    gen = replicate_generator(7, 0, f"law-moments/{name}")
    for i in range(model.p):
        x = np.zeros(model.p, dtype=np.int64)
        x[i] = 1
        single = model.with_immigration(DiscreteLaw.point([0] * model.p))
        draws = np.array([step(x, single, gen) for _ in range(N)], dtype=float)
        se = draws.std(axis=0, ddof=1) / np.sqrt(N) + 1e-12
        assert np.all(np.abs(draws.mean(axis=0) - model.m_xi[:, i]) <= 5 * se)
        cov = np.cov(draws.T).reshape(model.p, model.p)
        assert np.allclose(cov, model.V_xi[i], atol=5 * np.sqrt(2.0 / N) * (1 + cov.max()))
    zero = np.zeros(model.p, dtype=np.int64)
    draws = np.array([step(zero, model, gen) for _ in range(N)], dtype=float)
    se = draws.std(axis=0, ddof=1) / np.sqrt(N) + 1e-12
    assert np.all(np.abs(draws.mean(axis=0) - model.m_eps) <= 5 * se)
