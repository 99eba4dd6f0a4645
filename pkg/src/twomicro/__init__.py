"""Two-microlocal semiclassical analysis on the torus T^d, at finite h."""

__version__ = "0.1.0"

from .lattice import (  # noqa: E402
    NON_RESONANT,
    ModuleGeometry,
    PrimitiveModule,
    RationalVector,
    classify,
    geometry,
    in_resonant_set,
    resonance_order,
    saturate,
    stabilizer,
)
from .quantization import (  # noqa: E402
    BoxEscapeError,
    Cutoff,
    FourierState,
    Symbol,
    commutator_defect,
    nested_twomicro_pair,
    operator_matrix,
    twomicro_pair,
    wigner_pair,
)
from .dynamics import Potential, averaged_propagator, make_plan, propagate, time_averaged_density  # noqa: E402
from .microlocal import (  # noqa: E402
    LimitTable,
    covering_split,
    lift_isometry_check,
    limit_extrapolate,
    nu_lambda,
    propagation_law_test,
    sigma_proxy,
)
from .observability import ObservationSpec, gram, observability_constant, quotient  # noqa: E402
