"""Probabilistic interpretation of conjugate gradients and secant updates."""
