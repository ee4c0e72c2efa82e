"""Learning Hamiltonian dynamics with a trajectory network and a Hamiltonian network."""

__version__ = "0.1.0"
