"""Bregman storage functions, stability certificates and closed-loop simulation
for inverter-based microgrids with droop-type controllers."""
from .config import LOSSLESS, ControllerConfig, ControllerKind, GridState
from .errors import (
    BregmanGridError,
    ConfigError,
    DomainError,
    IntegrationError,
    SolverError,
    TopologyError,
)
from .power_flow import (
    Equilibrium,
    active_power,
    equilibrium_from_operating_point,
    injections,
    inverse_lossy_transform,
    lossy_transform,
    optimal_feedforward,
    reactive_power,
    solve_equilibria,
    solve_equilibrium,
)
from .simulator import (
    Trace,
    conservation_monitor,
    dissipation_monitor,
    equilibrium_state,
    integrate,
    perturbed_state,
    rhs,
    sharing_monitor,
)
from .stability import Certificate, Verdict, certify
from .storage import bregman_S, bregman_value, hessian
from .topology import NetworkTopology

__version__ = "0.1.0"
