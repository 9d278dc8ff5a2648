"""Matrix-free photoacoustic tomography reconstruction.

Exact time-propagator forward model, jointly-sparse non-convex
regularization solved by preconditioned gradients with graduated
non-convexity, a FISTA-TV baseline, phantoms, metrics and a benchmark CLI.
"""

__version__ = "0.1.0"
