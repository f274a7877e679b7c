"""Risk-averse MPC path planning with learned covariance prediction."""

__version__ = "0.1.0"
