"""Graph-network vehicle model and lateral controller, with a simulation testbed."""

__version__ = "0.1.0"
