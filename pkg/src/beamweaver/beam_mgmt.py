"""Beam-management protocol core.

SSB sweep reception, RSRP measurement, network feedback aggregation,
CSI-RS subset selection, LMMSE combining / SINR, and achievable spectral
efficiency.  The SINR/SE chain is built on DiffTensors so the same code
serves both plain evaluation (read ``.value``) and end-to-end codebook
training.

Conventions:
  * All cells sweep beam index i on the same time-frequency occasion, so
    the i-th beams of other cells interfere.
  * The broadcast beam is power-normalized by 1/sqrt(K * NT).
  * The UE combines with maximum-ratio weights against the desired cell's
    effective channel; cell-specific DMRS sequences decorrelate other-cell
    transmissions, so measured RSRP is desired power plus combined noise.
  * Interfering CSI-RS precoders pair up by resource index: at resource i
    every cell transmits the i-th entry of its own ordered subset.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .channel import ChannelTensor, _stream
from .codebook import CsirsCodebook, SsbCodebook
from .errors import ConfigError, ShapeError

_NOISE_TAG = 7


@dataclass
class SsbReception:
    """Per candidate serving cell: desired signal, interference, noise.

    All arrays have shape (C, L, U, T, K, N_R): axis 0 is the candidate
    serving cell, axis 1 the swept beam index.
    """

    signal: np.ndarray
    interference: np.ndarray
    noise: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.signal + self.interference + self.noise


@dataclass
class FeedbackReport:
    """Per-user best (cell, beam) association and the winning RSRP."""

    p: np.ndarray  # (U,) best RSRP, linear mW
    m: np.ndarray  # (U,) best beam index
    b: np.ndarray  # (U,) best cell index
    new_user_mask: np.ndarray  # (U,) bool; True = excluded from statistics
    c_cells: int
    l_max: int

    def users_of_cell(self, cell: int) -> np.ndarray:
        """Non-new users associated with ``cell`` (ascending user index)."""
        keep = (self.b == cell) & ~self.new_user_mask
        return np.nonzero(keep)[0]

    def beam_counts(self, cell: int) -> np.ndarray:
        users = self.users_of_cell(cell)
        return np.bincount(self.m[users], minlength=self.l_max).astype(float)

    def beam_rsrp_sums(self, cell: int) -> np.ndarray:
        users = self.users_of_cell(cell)
        out = np.zeros(self.l_max)
        np.add.at(out, self.m[users], self.p[users])
        return out


@dataclass
class CsirsSelection:
    """Ordered CSI-RS precoder subset for one cell."""

    subset_indices: list[int]
    fallback: bool = False


@dataclass
class SinrRecord:
    """Per (user, resource, t, k, stream) SINR with derived SE quantities."""

    sinr: DiffTensor  # (U, N_CSI, T, K, S)
    se: DiffTensor | None = None  # (U, N_CSI) filled by achievable_se
    chosen: np.ndarray | None = None  # (U,) resource index i-hat


def _beam_signals(h_values, beams, scale: float):
    """Effective per-beam receive vectors: (L, U, T, K, N_R).

    h_values: (U, T, K, N_R, NT) constant; beams: (L, NT) array or DiffTensor.
    """
    bt = ad.as_tensor(beams)
    h = ad.constant(np.asarray(h_values, dtype=np.complex128))
    # (U, T, K, N_R, NT) @ (NT, L) -> (U, T, K, N_R, L)
    prod = ad.matmul(h, ad.swapaxes(bt, 0, 1))
    out = ad.swapaxes(ad.swapaxes(ad.swapaxes(ad.swapaxes(prod, 4, 3), 3, 2), 2, 1), 1, 0)
    return ad.scale(out, scale)


def ssb_receive(h: ChannelTensor, ssb: list[SsbCodebook], sigma2: float,
                seed: int) -> SsbReception:
    """Received SSB sweep for every candidate serving cell.

    y_c = (1/sqrt(K*NT)) H_c f_c s  +  sum_{c'!=c} H_c' f_c' s'  +  n
    with unit-power DMRS and complex noise variance sigma2.
    """
    hv = np.asarray(h.values, dtype=np.complex128)
    c_cells, n_users, t_slots, k_sub, n_rx, n_t = hv.shape
    if len(ssb) != c_cells:
        raise ShapeError(f"{len(ssb)} SSB codebooks for {c_cells} cells")
    l_max = ssb[0].l_max
    scale = 1.0 / np.sqrt(k_sub * n_t)
    per_cell = np.empty((c_cells, l_max, n_users, t_slots, k_sub, n_rx),
                        dtype=np.complex128)
    for c in range(c_cells):
        if ssb[c].beams.shape != (l_max, n_t):
            raise ShapeError("SSB codebook does not match channel geometry")
        per_cell[c] = _beam_signals(hv[c], ssb[c].beams, 1.0).value
    signal = scale * per_cell
    total = per_cell.sum(axis=0)
    interference = total[None] - per_cell  # other cells, unscaled as transmitted
    rng = _stream(seed, _NOISE_TAG, 0)
    noise = np.sqrt(sigma2 / 2.0) * (
        rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape))
    return SsbReception(signal=signal, interference=interference, noise=noise)


def measure_rsrp(reception: SsbReception, t_idx=None, k_idx=None) -> np.ndarray:
    """RSRP[c, i, u]: summed desired-plus-noise power after MRC combining."""
    sig = reception.signal
    noi = reception.noise
    if t_idx is not None:
        sig, noi = sig[:, :, :, t_idx], noi[:, :, :, t_idx]
    if k_idx is not None:
        sig, noi = sig[:, :, :, :, k_idx], noi[:, :, :, :, k_idx]
    ns2 = np.sum(np.abs(sig) ** 2, axis=-1)
    cross = np.abs(np.sum(np.conj(sig) * (sig + noi), axis=-1)) ** 2
    combined = np.where(ns2 > 0, cross / np.where(ns2 > 0, ns2, 1.0), 0.0)
    return combined.sum(axis=(-1, -2))


def rsrp_tensor(h_values, beams, k_sub: int, n_t: int) -> DiffTensor:
    """Differentiable noise-free RSRP (L, U) for one cell's beams.

    h_values: (U, T, K, N_R, NT); beams: (L, NT) DiffTensor or array.
    Equals the noiseless measure_rsrp of the same cell.
    """
    sig = _beam_signals(h_values, beams, 1.0 / np.sqrt(k_sub * n_t))
    power = ad.sum_axis(ad.abs2(sig), axis=-1)  # (L, U, T, K)
    return ad.sum_axis(ad.sum_axis(power, axis=-1), axis=-1)


def aggregate_feedback(rsrp: np.ndarray, new_user_mask=None) -> FeedbackReport:
    """Per-user argmax over (cell, beam); ties go to lowest cell then beam."""
    rsrp = np.asarray(rsrp, dtype=float)
    if not np.all(np.isfinite(rsrp)):
        raise ConfigError("RSRP values must be finite")
    c_cells, l_max, n_users = rsrp.shape
    flat = rsrp.reshape(c_cells * l_max, n_users)
    best = np.argmax(flat, axis=0)  # argmax takes the first maximum: lowest (c, i)
    b, m = np.divmod(best, l_max)
    p = flat[best, np.arange(n_users)]
    mask = (np.zeros(n_users, bool) if new_user_mask is None
            else np.asarray(new_user_mask, bool))
    return FeedbackReport(p=p, m=m.astype(int), b=b.astype(int),
                          new_user_mask=mask, c_cells=c_cells, l_max=l_max)


def _apportion(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment with a one-seat floor per claimant."""
    active = np.nonzero(counts > 0)[0]
    n = len(active)
    out = np.zeros_like(counts, dtype=int)
    if n == 0:
        return out
    if total < n:
        raise ConfigError(f"budget {total} below {n} distinct reported beams")
    out[active] = 1
    spare = total - n
    quota = spare * counts[active] / counts[active].sum()
    base = np.floor(quota).astype(int)
    out[active] += base
    rem = quota - base
    # ties resolved toward the lower beam index (stable sort on -remainder)
    order = np.argsort(-rem, kind="stable")
    for j in order[: spare - base.sum()]:
        out[active[j]] += 1
    return out


def select_csirs_subset(ssb: SsbCodebook, csirs: CsirsCodebook,
                        report: FeedbackReport, cell: int,
                        n_csi: int) -> CsirsSelection:
    """Pick the N_CSI refinement precoders covering the cell's active beams.

    Per-SSB-beam budgets follow user counts (largest-remainder, each
    reported beam keeps at least one precoder); each beam takes its
    most-correlated free precoders.  A cell with no users falls back to the
    first N_CSI precoders by index.
    """
    if n_csi > csirs.n_cb:
        raise ConfigError(f"n_csi={n_csi} exceeds codebook size {csirs.n_cb}")
    counts = report.beam_counts(cell)
    if counts.sum() == 0:
        return CsirsSelection(subset_indices=list(range(n_csi)), fallback=True)
    budgets = _apportion(counts, n_csi)
    # C[i, j] = max over precoder columns of |<f_i, b>|
    corr = np.abs(np.einsum("it,jts->ijs", np.conj(ssb.beams), csirs.precoders)).max(axis=2)
    taken: list[int] = []
    free = np.ones(csirs.n_cb, bool)
    for i in np.nonzero(budgets)[0]:
        order = np.argsort(-corr[i], kind="stable")  # ties -> lowest index
        picked = 0
        for j in order:
            if picked == budgets[i]:
                break
            if free[j]:
                taken.append(int(j))
                free[j] = False
                picked += 1
    return CsirsSelection(subset_indices=taken)


def csirs_sinr(h: ChannelTensor | np.ndarray, subsets: list,
               assoc: np.ndarray, sigma2: float) -> SinrRecord:
    """LMMSE per-stream SINR for every user and CSI-RS resource.

    subsets: per cell, the ordered (N_CSI, NT, B_g) stack of transmitted
    precoders (array or DiffTensor).  assoc: per-user serving cell.
    R = sum_c (H_c B_c,i)(.)^H + sigma2 I;  q = v^H R^-1 v;  SINR = q/(1-q).
    """
    hv = h.values if isinstance(h, ChannelTensor) else h
    hv = np.asarray(hv, dtype=np.complex128)
    c_cells, n_users, t_slots, k_sub, n_rx, n_t = hv.shape
    if len(subsets) != c_cells:
        raise ShapeError("one precoder subset required per cell")
    assoc = np.asarray(assoc, dtype=np.intp)
    g_cells = []
    for c in range(c_cells):
        bc = ad.as_tensor(subsets[c])  # (N_CSI, NT, B_g)
        hc = ad.constant(hv[c, :, :, :, None])  # (U, T, K, 1, N_R, NT)
        g_cells.append(ad.swapaxes(ad.swapaxes(ad.swapaxes(
            ad.matmul(hc, bc), 3, 2), 2, 1), 1, 0))  # (N_CSI, U, T, K, N_R, B_g)
    n_csi = g_cells[0].shape[0]
    eye = sigma2 * np.eye(n_rx)
    r = ad.constant(np.broadcast_to(eye, (n_csi, n_users, t_slots, k_sub, n_rx, n_rx)).copy())
    for g in g_cells:
        r = ad.add(r, ad.matmul(g, ad.hermitian_transpose(g)))
    stacked = ad.concat([ad.reshape(g, (1,) + g.shape) for g in g_cells], axis=0)
    v = ad.select_cells(ad.swapaxes(stacked, 1, 2), assoc)  # (U, N_CSI, T, K, N_R, B_g)
    r = ad.swapaxes(r, 0, 1)
    rinv = ad.hermitian_inverse(r)
    q = ad.sum_axis(ad.real(ad.mul(ad.conj(v), ad.matmul(rinv, v))), axis=-2)
    sinr = ad.div(q, ad.sub(1.0, q))  # (U, N_CSI, T, K, B_g)
    return SinrRecord(sinr=sinr)


def achievable_se(record: SinrRecord) -> SinrRecord:
    """Per-user SE per resource and the stop-gradient resource choice.

    SE_i = sum_streams log2(1 + mean over (t, k) SINR); i-hat = argmax
    (tie -> lowest index), held constant for gradients.
    """
    mean_tk = ad.mean_axis(ad.mean_axis(record.sinr, axis=3), axis=2)  # (U, N_CSI, S)
    se = ad.sum_axis(ad.log2_1p(mean_tk), axis=-1)
    chosen = np.argmax(se.value.real, axis=1)  # first max -> lowest index
    record.se = se
    record.chosen = chosen
    return record


def effective_sinr(se) -> np.ndarray:
    """10*log10(2^SE - 1); SE = 0 maps to -inf."""
    se = np.asarray(se, dtype=float)
    if np.any(se < 0):
        raise ConfigError("spectral efficiency must be non-negative")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.exp2(se) - 1.0)
