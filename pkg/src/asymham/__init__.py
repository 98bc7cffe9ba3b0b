"""Asymptotic averaging for decaying perturbations of planar Hamiltonian systems."""
