"""mmgsim: desk-scale multi-microgrid unbalance-compensation simulator."""

__version__ = "0.1.0"

from .signals import (  # noqa: F401
    Phasor,
    SymmetricalComponents,
    fortescue,
    inverse_fortescue,
    vuf,
    phasor_estimate,
)
from .scenario import ScenarioConfig, load_scenario, validate_physics  # noqa: F401
from .metrics import SimulationTrace, SummaryReport, summarize  # noqa: F401
