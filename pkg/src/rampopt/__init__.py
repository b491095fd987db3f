"""rampopt: thermo-mechanical ramp-schedule optimization for rotating parts.

The package couples a transient heat-conduction solver with quasi-static
linear thermoelasticity on tetrahedral meshes and wraps both in a
sequential quadratic programming loop that shapes gas-temperature and
rotation-speed ramps to minimize the peak von Mises stress of a start-up.
"""
__version__ = "0.1.0"
