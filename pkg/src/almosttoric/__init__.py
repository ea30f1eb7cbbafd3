"""Numerical analysis of integrable Hamiltonian systems on four-manifolds."""

__version__ = "0.1.0"
