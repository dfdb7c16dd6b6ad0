"""Importance sampling with optimized stochastic particle flows for 3-D TDOA source localization."""
