"""Jump-diffusion density forecasting with complexity features."""

__version__ = "0.1.0"
