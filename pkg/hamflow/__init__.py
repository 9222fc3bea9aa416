"""Learning Hamiltonian flow maps from scheme residuals and trajectory data."""

__version__ = '0.1.0'
