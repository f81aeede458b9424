"""Monte-Carlo evaluation pipeline and metric aggregation.

One "drop" = one user placement: SSB sweep -> feedback -> CSI-RS subsets ->
per-user SINR/SE -> PMI feedback -> RZF precoding -> ESSE.  Rows are
per-user with the drop-level ESSE repeated, serialized to a versioned CSV.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, asdict

import numpy as np

from . import beam_mgmt as bm
from . import channel as ch
from . import codebook as cb
from . import link
from .errors import ConfigError, FormatError

CSV_SCHEMA = "bmw-metrics-v1"
_FIELDS = ["drop", "user", "cell", "beam", "rsrp_dbm", "se", "eff_sinr_db",
           "sig_power", "int_noise_power", "scheduled", "data_rate", "esse",
           "alloc_cell"]
_PILOT_TAG = 13


@dataclass
class EvalSettings:
    """Codebook sizing and overhead knobs for one evaluation run."""

    l_max: int = 16
    n_csi: int = 16
    n_cb: int = 32
    b_g: int = 4
    l_csi: int = 4
    s_b: int = 8
    k_ssb: int = 4
    t_period: int = 160


def _to_dbm(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.maximum(p, 1e-300))


def evaluate_drop(config: ch.ScenarioConfig, settings: EvalSettings,
                  ssb_books: list, csirs_books: list, drop_seed: int) -> list[dict]:
    """Run the full protocol for one drop; returns per-user metric rows."""
    sigma2 = ch.noise_variance(config)
    tensor = ch.generate_channels(config, drop_seed)
    hv = np.asarray(tensor.values, dtype=np.complex128)
    c_cells, n_users, t_slots, k_sub = hv.shape[:4]
    reception = bm.ssb_receive(tensor, ssb_books, sigma2, drop_seed)
    rsrp = bm.measure_rsrp(reception)
    report = bm.aggregate_feedback(rsrp)
    sels = [bm.select_csirs_subset(ssb_books[c], csirs_books[c], report, c,
                                   settings.n_csi) for c in range(c_cells)]
    subsets = [csirs_books[c].precoders[sels[c].subset_indices]
               for c in range(c_cells)]
    record = bm.achievable_se(bm.csirs_sinr(hv, subsets, report.b, sigma2))
    se_val = record.se.value.real
    users = np.arange(n_users)
    se_best = se_val[users, record.chosen]
    eff = bm.effective_sinr(np.maximum(se_best, 0.0))
    # signal / interference+noise decomposition at the selected resource
    sinr_mean = record.sinr.value.real.mean(axis=(2, 3))  # (U, N_CSI, S)
    sig_u, in_u = np.zeros(n_users), np.zeros(n_users)
    for u in users:
        i_hat = record.chosen[u]
        v = hv[report.b[u], u] @ subsets[report.b[u]][i_hat]  # (T, K, N_R, B_g)
        sig_u[u] = float((np.abs(v) ** 2).sum(axis=(-1, -2)).mean())
        snr_eq = np.exp2(se_best[u]) - 1.0
        in_u[u] = sig_u[u] / snr_eq if snr_eq > 0 else np.inf
    # data plane: pilots -> PMI -> scheduling -> RZF -> ESSE
    pilot_rng = ch._stream(drop_seed, _PILOT_TAG, 0)
    sets = []
    for c in range(c_cells):
        y = np.empty((n_users, k_sub, config.n_rx, settings.b_g), dtype=np.complex128)
        for u in users:
            for k in range(k_sub):
                y[u, k] = hv[c, u, 0, k] @ subsets[c][record.chosen[u]]
        noise = np.sqrt(sigma2 / 2.0) * (pilot_rng.standard_normal(y.shape)
                                         + 1j * pilot_rng.standard_normal(y.shape))
        est = link.estimate_channel(y + noise, np.eye(settings.b_g), sigma2,
                                    settings.s_b)
        fb, recon = link.quantize_pmi(est, l_csi=settings.l_csi)
        cand = list(report.users_of_cell(c))
        sched = link.schedule_users(recon, fb.gains, record.chosen, subsets[c],
                                    cand, sigma2) if cand else []
        sets.append(link.build_precoders(recon, fb.gains, record.chosen,
                                         subsets[c], sched, sigma2,
                                         est.subband_of_k))
    alpha = link.data_fraction(settings.l_max, settings.n_csi, settings.k_ssb,
                               k_sub, settings.t_period)
    esse = link.transmit_and_score(hv, sets, sigma2, alpha=alpha)
    rows = []
    for u in users:
        rows.append({
            "drop": int(drop_seed), "user": int(u), "cell": int(report.b[u]),
            "beam": int(report.m[u]),
            "rsrp_dbm": float(_to_dbm(np.array(report.p[u]))),
            "se": float(se_best[u]), "eff_sinr_db": float(eff[u]),
            "sig_power": float(sig_u[u]), "int_noise_power": float(in_u[u]),
            "scheduled": int(u in esse.per_user_rate),
            "data_rate": float(esse.per_user_rate.get(u, 0.0)),
            "esse": float(esse.esse),
            "alloc_cell": float(esse.allocation[report.b[u]]),
        })
    return rows


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# schema={CSV_SCHEMA}\n")
        w = csv.DictWriter(f, fieldnames=_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        first = f.readline().strip()
        if first != f"# schema={CSV_SCHEMA}":
            raise FormatError(f"unexpected metrics schema line: {first!r}")
        out = []
        for row in csv.DictReader(f):
            parsed = {k: (int(row[k]) if k in ("drop", "user", "cell", "beam",
                                               "scheduled")
                          else float(row[k])) for k in _FIELDS}
            out.append(parsed)
        return out


def compare_metrics(rows_a: list[dict], rows_b: list[dict]) -> dict:
    """Paired deltas of B over A: per-user RSRP, per-drop ESSE, allocations."""
    key = lambda r: (r["drop"], r["user"])
    a_map = {key(r): r for r in rows_a}
    b_map = {key(r): r for r in rows_b}
    if set(a_map) != set(b_map):
        raise ConfigError("metric files cover different (drop, user) sets")
    keys = sorted(a_map)
    rsrp_delta = np.array([b_map[k]["rsrp_dbm"] - a_map[k]["rsrp_dbm"] for k in keys])
    drops = sorted({k[0] for k in keys})
    esse_a = np.array([next(r["esse"] for r in rows_a if r["drop"] == d) for d in drops])
    esse_b = np.array([next(r["esse"] for r in rows_b if r["drop"] == d) for d in drops])
    esse_delta = esse_b - esse_a
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(esse_a > 0, esse_b / np.where(esse_a > 0, esse_a, 1.0), np.nan)
    pct = np.arange(1, 100)
    in_a = np.array([a_map[k]["int_noise_power"] for k in keys])
    in_b = np.array([b_map[k]["int_noise_power"] for k in keys])
    fin = np.isfinite(in_a) & np.isfinite(in_b)

    def alloc(rows):
        cells = sorted({r["cell"] for r in rows})
        counts = np.array([sum(r["cell"] == c for r in rows) for c in cells], float)
        return {str(c): float(n / counts.sum()) for c, n in zip(cells, counts)}

    return {
        "pairs": len(keys),
        "drops": len(drops),
        "rsrp_delta_db": {
            "median": float(np.median(rsrp_delta)),
            "mean": float(np.mean(rsrp_delta)),
            "regressed_fraction": float(np.mean(rsrp_delta < 0.0)),
            "cdf_percentiles": [float(v) for v in np.percentile(rsrp_delta, pct)],
        },
        "esse": {
            "median_delta": float(np.median(esse_delta)),
            "median_ratio": float(np.nanmedian(ratio)),
            "nonregressing_fraction": float(np.mean(esse_delta >= 0.0)),
        },
        "int_noise_mean_a": float(np.mean(in_a[fin])) if fin.any() else None,
        "int_noise_mean_b": float(np.mean(in_b[fin])) if fin.any() else None,
        "allocation_a": alloc(rows_a),
        "allocation_b": alloc(rows_b),
    }
