"""Finite volume schemes for stochastic scalar conservation laws."""
