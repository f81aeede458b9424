"""NumPy implementation of the ray-accumulation kernel."""

import numpy as np


def ray_sum(phase, a_rx, tx_row, out):
    """Accumulate out[k, nr, nt] += phase[r, k] * a_rx[r, nr] * tx_row[r, nt].

    phase:  (R, K) complex128 — per-ray subcarrier phasors (gain folded in)
    a_rx:   (R, N_R) complex128 — receive steering vectors
    tx_row: (R, N_T) complex128 — conjugated transmit steering rows
    out:    (K, N_R, N_T) complex128, modified in place

    The multiply grouping and the ray-major accumulation order match the
    compiled kernel; outputs agree to floating-point rounding.
    """
    n_rays = phase.shape[0]
    for r in range(n_rays):
        c2 = phase[r][:, None] * a_rx[r][None, :]  # (K, N_R)
        out += c2[:, :, None] * tx_row[r][None, None, :]
    return out
