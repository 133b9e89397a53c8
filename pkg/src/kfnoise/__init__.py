"""Learned noise-covariance identification for Kalman filtering of vehicle lateral dynamics."""

__version__ = "0.1.0"
