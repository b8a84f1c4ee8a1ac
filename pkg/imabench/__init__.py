"""Independent Mechanism Analysis: contrast, mixings, residual flows and experiment suites."""

__version__ = "1.0.0"
