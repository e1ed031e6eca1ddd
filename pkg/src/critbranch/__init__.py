"""Critical multi-type branching processes with immigration and their diffusion limit."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConsistencyError,
    CritBranchError,
    DegeneracyError,
    DomainError,
    InvalidInputError,
    NotPSDError,
    NumericalError,
    PopulationOverflowError,
    StateSpaceError,
    UnderpoweredError,
)
from .model import (  # noqa: E402
    BranchingModel,
    DiscreteLaw,
    InitialState,
    build_model,
    classify_criticality,
    limit_coefficients,
    load_model,
    mixed_variance,
)
from .perron import PerronData, is_primitive, perron_data, rate_constants  # noqa: E402
from .simulator import simulate, simulate_ensemble  # noqa: E402
