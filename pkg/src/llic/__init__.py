"""Large-receptive-field learned image codec."""

__version__ = "0.1.0"
