"""
squeezelab - Squeezed-light and noise-locking laboratory

This package simulates sub-threshold OPO squeezed-vacuum generation, the
homodyne/Stokes detection chain and the quantum-noise-locking servo that
stabilises the local-oscillator phase.
"""

__version__ = "0.1.0"
