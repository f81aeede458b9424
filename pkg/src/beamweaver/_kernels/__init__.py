"""Hot-loop kernels: compiled Cython core with a NumPy fallback.

``ray_sum`` accumulates per-ray rank-1 contributions into a channel slab.
Both backends perform the same sequence of complex multiplies and additions;
they agree to floating-point rounding (NumPy's SIMD complex multiply may
fuse multiply-adds, so agreement is at the ulp level rather than bitwise).
Within one backend, results are bitwise reproducible.
"""

from .fallback import ray_sum as ray_sum_numpy

try:
    from ._ray_sum import ray_sum as ray_sum_compiled

    ray_sum = ray_sum_compiled
    HAVE_COMPILED = True
except ImportError:  # extension not built; pure-Python install
    ray_sum_compiled = None
    ray_sum = ray_sum_numpy
    HAVE_COMPILED = False

__all__ = ["ray_sum", "ray_sum_numpy", "ray_sum_compiled", "HAVE_COMPILED"]
