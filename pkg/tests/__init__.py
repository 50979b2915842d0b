"""Tests for the derivative-enabled Bayesian optimization benchmark."""
