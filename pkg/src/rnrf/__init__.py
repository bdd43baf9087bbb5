"""Controllable neural 3D portrait: a morphable-model-guided deformable
radiance field with explicit head-pose, expression and camera control."""

import os as _os

# pick the OpenMP threading layer before numba loads; the TBB probe is noisy
# on images with an older libtbb
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
