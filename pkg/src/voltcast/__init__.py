"""Load forecasting with learned weather aggregation, smoothing and Kalman recalibration."""

__version__ = "0.1.0"
