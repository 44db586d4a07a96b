"""Meta-learned basis-function GP residual models for adaptive MPC."""

__version__ = "0.1.0"
