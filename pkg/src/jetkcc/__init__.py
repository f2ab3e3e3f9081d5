"""Multi-time KCC invariants of second-order PDE systems on 1-jet spaces."""

__version__ = "0.1.0"
