"""Local Morse homology of symmetric Hamiltonian germs via discrete action functionals."""

__version__ = "0.1.0"
