"""Attack and defense tooling for optimization layers that consume a learned constraint matrix."""

__version__ = "0.1.0"
