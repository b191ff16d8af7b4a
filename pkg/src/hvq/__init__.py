"""Simulator for hidden-variable quantization of classical Hamiltonian systems."""

__version__ = "0.1.0"
