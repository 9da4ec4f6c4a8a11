"""tubedmpc - Parallelized robust tube-based distributed MPC with consistency constraints."""

__version__ = "0.1.0"
