"""Category-level pose and shape estimation with certifiable solvers."""

__version__ = "0.1.0"
