"""Weakly interacting diffusions on the torus.

Particle simulation, Fourier-Galerkin Fokker-Planck and tangent-equation
solvers, and reproducible experiments for uniform-in-time O(1/N) weak
propagation-of-chaos estimates, ergodic decay rates, spectral gaps, and
Kuramoto synchronization phenomena.
"""

__version__ = "0.1.0"
