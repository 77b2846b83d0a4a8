"""Fringe projection profilometry workbench.

Simulated camera-projector-camera rig, phase-shifting and Fourier phase
retrieval, stereo / reference / temporal phase unwrapping, a small numpy CNN
engine, and accuracy metrics.
"""

__version__ = "0.1.0"
