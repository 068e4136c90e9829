"""Graph-recurrent streamflow forecasting with rating-curve residual correction."""

__version__ = "0.1.0"
