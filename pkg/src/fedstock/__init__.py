"""GRU growth forecasting under centralized, local, FedAvg and personalized FL training."""

__version__ = "0.1.0"
