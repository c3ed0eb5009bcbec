"""Numerical convex-integration laboratory for forward-backward diffusion.

Modules
-------
flux
    Modified flux profiles and the induced uniformly parabolic vector flux.
hull
    Closed-form membership tests, rank-one decompositions, and the
    independent brute-force oracle for the constraint-set geometry.
divinv
    A structure-preserving right inverse of the divergence on boxes.
parabolic
    Node-centered grids, conservative explicit solves of the regularized
    equation, the cosine-spectral Neumann Poisson solver, boundary data.
convint
    Staircase profiles, divergence-free oscillations, and certified patches.
stitcher
    Admissible pairs, the density step, schedules, weak-form residuals.
fieldio
    Binary field snapshots, run manifests, CSV emitters.
cli
    Command line front end (run / verify / hull-probe / report).
"""

__version__ = "0.1.0"

import os as _os

# CVXINT_THREADS caps the BLAS/OpenMP pools; must land before numpy loads,
# and explicit per-library variables set by the user still win
_cap = _os.environ.get("CVXINT_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

from . import convint, divinv, fieldio, flux, hull, parabolic, stitcher  # noqa: E402,F401
from . import cli  # noqa: E402,F401
