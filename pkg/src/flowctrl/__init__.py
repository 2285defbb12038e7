"""Power-flow controllability via variable line reactance."""

from flowctrl.netmodel import (
    Branch,
    Bus,
    BusKind,
    Generator,
    Network,
    build_incidence,
    case39,
    cycle_basis,
    find_bridges,
    is_radial,
    load_case,
)

__version__ = "0.1.0"
