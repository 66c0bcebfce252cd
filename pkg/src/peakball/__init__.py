"""Multi-peak ansatz, reduced system and sector PDE solver for -Delta u = K(|x|) u^(5+mu) on the unit ball."""
from .bubble import PeakConfig, RadialCoefficient, peak_locations, standard_bubble
from .lattice import ReducedConstants, SeriesTolerance, solve_reduced_system

__all__ = ["PeakConfig", "RadialCoefficient", "ReducedConstants", "SeriesTolerance",
           "peak_locations", "solve_reduced_system", "standard_bubble"]
