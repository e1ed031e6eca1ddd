"""Branching models with immigration and their derived moment objects.

Mean-matrix convention: column ``i`` of ``m_xi`` is the mean offspring vector
of a type-``i`` parent, so that ``E[X_k | X_{k-1}] = m_xi @ X_{k-1} + m_eps``.
Many texts use the transpose; this package does not.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources

import jsonschema
import numpy as np

from . import perron as _perron
from .errors import DomainError, InvalidInputError

PROB_TOL = 1e-12
CRITICAL_TOL = 1e-9

_SCHEMA_CACHE = {}


def load_schema(name):
    if name not in _SCHEMA_CACHE:
        text = resources.files("critbranch.schemas").joinpath(f"{name}.schema.json").read_text()
        _SCHEMA_CACHE[name] = json.loads(text)
    return _SCHEMA_CACHE[name]


def _number(x):
    # probabilities may be given as exact fraction strings, e.g. "1/3"
    if isinstance(x, str):
        try:
            return float(Fraction(x))
        except (ValueError, ZeroDivisionError) as exc:
            raise InvalidInputError(f"cannot parse number {x!r}") from exc
    return float(x)


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Law of a random vector in Z_+^p.

    ``kind == "finite"``: ``atoms`` (S, p) with probabilities ``probs`` (S,).
    ``kind == "poisson"``: independent Poisson coordinates with ``rates`` (p,).
    """

    kind: str
    p: int
    atoms: np.ndarray = None
    probs: np.ndarray = None
    rates: np.ndarray = None

    def __post_init__(self):
        if self.kind == "finite":
            atoms = np.asarray(self.atoms, dtype=np.int64)
            probs = np.asarray(self.probs, dtype=float)
            if atoms.ndim != 2 or atoms.shape[1] != self.p:
                raise InvalidInputError(
                    f"finite law atoms must have shape (S, {self.p}), got {atoms.shape}"
                )
            if probs.shape != (atoms.shape[0],):
                raise InvalidInputError("one probability per atom required")
            if np.any(atoms < 0):
                raise InvalidInputError("atoms must have nonnegative coordinates")
            if np.any(probs < 0) or not np.all(np.isfinite(probs)):
                raise InvalidInputError("probabilities must be finite and nonnegative")
            if abs(probs.sum() - 1.0) > PROB_TOL:
                raise InvalidInputError(
                    f"probabilities sum to {probs.sum():.15g}, not 1"
                )
            atoms.setflags(write=False)
            probs.setflags(write=False)
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "probs", probs)
        elif self.kind == "poisson":
            rates = np.asarray(self.rates, dtype=float)
            if rates.shape != (self.p,):
                raise InvalidInputError(f"poisson law needs {self.p} rates, got {rates.shape}")
            if np.any(rates < 0) or not np.all(np.isfinite(rates)):
                raise InvalidInputError("poisson rates must be finite and nonnegative")
            rates.setflags(write=False)
            object.__setattr__(self, "rates", rates)
        else:
            raise InvalidInputError(f"unknown law kind {self.kind!r}")

    @classmethod
    def finite(cls, atoms, probs):
        atoms = np.atleast_2d(np.asarray(atoms, dtype=np.int64))
        return cls("finite", atoms.shape[1], atoms=atoms, probs=probs)

    @classmethod
    def poisson(cls, rates):
        rates = np.atleast_1d(np.asarray(rates, dtype=float))
        return cls("poisson", rates.shape[0], rates=rates)

    @classmethod
    def point(cls, atom):
        return cls.finite([atom], [1.0])

    def mean(self):
        if self.kind == "finite":
            return self.probs @ self.atoms
        return self.rates.copy()

    def cov(self):
        if self.kind == "finite":
            m = self.mean()
            centered = self.atoms - m
            return (centered.T * self.probs) @ centered
        return np.diag(self.rates)

    def permuted(self, perm):
        """Law of the vector with coordinates relabeled: new[j] = old[perm[j]]."""
        perm = np.asarray(perm)
        if self.kind == "finite":
            return DiscreteLaw.finite(self.atoms[:, perm], self.probs)
        return DiscreteLaw.poisson(self.rates[perm])

    def to_config(self):
        if self.kind == "finite":
            return {
                "kind": "finite",
                "atoms": self.atoms.tolist(),
                "probs": [float(q) for q in self.probs],
            }
        return {"kind": "poisson", "rates": [float(r) for r in self.rates]}


@dataclass(frozen=True)
class InitialState:
    """How ``X_0^{(n)}`` depends on the scaling index ``n``.

    ``fixed``: the same vector for every ``n``. ``ray``: ``round(n * Z * u)``
    for a scalar ``Z`` that is either a point mass or Gamma distributed.
    """

    kind: str = "fixed"
    x0: tuple = None
    law: dict = None

    def describe(self):
        if self.kind == "fixed":
            return {"kind": "fixed", "x0": list(self.x0)}
        return {"kind": "ray", "law": dict(self.law)}


@dataclass(frozen=True, eq=False)
class BranchingModel:
    p: int
    offspring: tuple
    immigration: DiscreteLaw
    name: str = "model"
    initial: InitialState = None
    m_xi: np.ndarray = field(init=False, repr=False)
    V_xi: np.ndarray = field(init=False, repr=False)
    m_eps: np.ndarray = field(init=False, repr=False)
    V_eps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.offspring) != self.p:
            raise InvalidInputError(
                f"need {self.p} offspring laws, got {len(self.offspring)}"
            )
        for i, law in enumerate(self.offspring):
            if law.p != self.p:
                raise InvalidInputError(f"offspring law {i} has dimension {law.p} != p={self.p}")
        if self.immigration.p != self.p:
            raise InvalidInputError(
                f"immigration law has dimension {self.immigration.p} != p={self.p}"
            )
        if self.initial is None:
            object.__setattr__(self, "initial", InitialState("fixed", tuple([0] * self.p)))
        m_xi = np.column_stack([law.mean() for law in self.offspring])
        V_xi = np.stack([law.cov() for law in self.offspring])
        m_eps = self.immigration.mean()
        V_eps = self.immigration.cov()
        for arr in (m_xi, V_xi, m_eps, V_eps):
            arr.setflags(write=False)
        object.__setattr__(self, "offspring", tuple(self.offspring))
        object.__setattr__(self, "m_xi", m_xi)
        object.__setattr__(self, "V_xi", V_xi)
        object.__setattr__(self, "m_eps", m_eps)
        object.__setattr__(self, "V_eps", V_eps)

    @property
    def V_xi_list(self):
        return [self.V_xi[i] for i in range(self.p)]

    @property
    def is_deterministic(self):
        return not (np.any(self.V_xi) or np.any(self.V_eps))

    def permuted(self, perm):
        """Same model with type ``j`` of the new model being type ``perm[j]`` of this one."""
        perm = list(perm)
        return BranchingModel(
            p=self.p,
            offspring=tuple(self.offspring[perm[j]].permuted(perm) for j in range(self.p)),
            immigration=self.immigration.permuted(perm),
            name=f"{self.name}-perm",
        )

    def with_immigration(self, law, name=None):
        return BranchingModel(
            p=self.p,
            offspring=self.offspring,
            immigration=law,
            name=name or self.name,
            initial=self.initial,
        )

    def to_config(self):
        return {
            "name": self.name,
            "p": self.p,
            "offspring": [law.to_config() for law in self.offspring],
            "immigration": self.immigration.to_config(),
            "initial": self.initial.describe(),
        }

    @property
    def model_id(self):
        """sha256 of the canonical JSON form of the model."""
        canon = json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class LimitCoefficients:
    b: float
    c: float
    delta: float = None

    @property
    def has_dimension(self):
        return self.delta is not None


def _law_from_config(cfg, p, where):
    try:
        return _build_law(cfg, p, where)
    except InvalidInputError as exc:
        msg = str(exc)
        raise InvalidInputError(msg if msg.startswith(where) else f"{where}: {msg}") from None


def _build_law(cfg, p, where):
    kind = cfg["kind"]
    if kind == "finite":
        atoms = cfg["atoms"]
        probs = [_number(q) for q in cfg["probs"]]
        if any(len(a) != p for a in atoms):
            raise InvalidInputError(f"{where}: every atom needs {p} coordinates")
        law = DiscreteLaw("finite", p, atoms=np.asarray(atoms, dtype=np.int64).reshape(-1, p),
                          probs=probs)
    elif kind == "point":
        atom = cfg["atom"]
        if len(atom) != p:
            raise InvalidInputError(f"{where}: point atom needs {p} coordinates")
        law = DiscreteLaw("finite", p, atoms=np.asarray([atom], dtype=np.int64), probs=[1.0])
    elif kind == "poisson":
        rates = [_number(r) for r in cfg["rates"]]
        if len(rates) != p:
            raise InvalidInputError(f"{where}: need {p} rates, got {len(rates)}")
        law = DiscreteLaw("poisson", p, rates=rates)
    else:  # pragma: no cover - the schema rejects this first
        raise InvalidInputError(f"{where}: unknown law kind {kind!r}")
    return law


def _path(error):
    return "/".join(str(x) for x in error.absolute_path) or "<root>"


def _specific(error):
    """Descend into oneOf branches, keeping the branch whose ``kind`` matched."""
    while error.context:
        branches = {}
        for sub in error.context:
            branches.setdefault(sub.schema_path[0], []).append(sub)
        live = [errs for errs in branches.values()
                if not any(list(e.relative_path) == ["kind"] for e in errs)]
        if len(live) != 1:
            break
        error = jsonschema.exceptions.best_match(live[0])
    return error


def build_model(config):
    """Validate a parsed model config and build the model (moments are analytic)."""
    validator = jsonschema.Draft202012Validator(load_schema("model"))
    error = jsonschema.exceptions.best_match(validator.iter_errors(config))
    if error is not None:
        error = _specific(error)
        raise InvalidInputError(f"model config invalid at {_path(error)}: {error.message}")
    p = int(config["p"])
    if len(config["offspring"]) != p:
        raise InvalidInputError(
            f"offspring: expected {p} laws, got {len(config['offspring'])}"
        )
    offspring = tuple(
        _law_from_config(c, p, f"offspring/{i}") for i, c in enumerate(config["offspring"])
    )
    immigration = _law_from_config(config["immigration"], p, "immigration")
    init_cfg = config.get("initial", {"kind": "fixed", "x0": [0] * p})
    if init_cfg["kind"] == "fixed":
        x0 = init_cfg["x0"]
        if len(x0) != p:
            raise InvalidInputError(f"initial/x0: need {p} coordinates")
        initial = InitialState("fixed", tuple(int(x) for x in x0))
    else:
        initial = InitialState("ray", law=dict(init_cfg["law"]))
    return BranchingModel(
        p=p,
        offspring=offspring,
        immigration=immigration,
        name=config.get("name", "model"),
        initial=initial,
    )


def parse_model_text(text, source="<string>"):
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(
            f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        return build_model(config)
    except InvalidInputError as exc:
        raise InvalidInputError(f"{source}: {exc}") from exc


BUILTIN_MODELS = ("ref1", "ref2", "ref1-supercritical", "deterministic1", "deterministic2")


def load_model(path_or_name):
    """Load a model from a JSON file or one of the bundled names (``ref1``, ``ref2``...)."""
    name = str(path_or_name)
    if name.lower() in BUILTIN_MODELS:
        text = resources.files("critbranch.models").joinpath(f"{name.lower()}.json").read_text()
        return parse_model_text(text, source=name)
    if not os.path.exists(name):
        raise InvalidInputError(
            f"model {name!r} is neither a file nor a built-in ({', '.join(BUILTIN_MODELS)})"
        )
    with open(name, encoding="utf-8") as fh:
        return parse_model_text(fh.read(), source=name)


def mixed_variance(alpha, model, allow_negative=False):
    """``sum_i alpha_i V_{xi_i}``, the alpha-mixture of offspring covariances."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (model.p,):
        raise InvalidInputError(f"alpha must have length {model.p}, got shape {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise InvalidInputError("alpha must be finite")
    if not allow_negative and np.any(alpha < 0):
        raise InvalidInputError("alpha has negative components")
    return np.tensordot(alpha, model.V_xi, axes=1)


def classify_criticality(model, tol=CRITICAL_TOL):
    """Return ``(label, rho)`` with label in subcritical/critical/supercritical."""
    if not _perron.is_primitive(model.m_xi):
        raise DomainError("offspring mean matrix is not primitive")
    pd = _perron.perron_data(model.m_xi)
    rho = pd.rho
    if abs(rho - 1.0) <= tol:
        return "critical", rho
    return ("subcritical" if rho < 1.0 else "supercritical"), rho


def require_critical(model):
    label, rho = classify_criticality(model)
    if label != "critical":
        raise DomainError(f"model {model.name!r} is {label} (rho = {rho:.12g})")
    return rho


def limit_coefficients(model, pd=None):
    """Drift ``b = v.m_eps``, diffusion ``c = v^T (u . V_xi) v`` and ``delta = 4b/c``."""
    require_critical(model)
    if pd is None:
        pd = _perron.perron_data(model.m_xi)
    b = float(pd.v @ model.m_eps)
    c = float(pd.v @ mixed_variance(pd.u, model) @ pd.v)
    # clean rounding residue of exact zeros
    b = max(b, 0.0)
    c = max(c, 0.0)
    delta = 4.0 * b / c if c > 0 else None
    return LimitCoefficients(b=b, c=c, delta=delta)
