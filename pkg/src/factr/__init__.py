"""Channel-temporal forecaster with factorized cross-channel mixing."""

__version__ = "0.1.0"
