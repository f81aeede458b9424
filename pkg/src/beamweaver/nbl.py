"""End-to-end codebook learning.

Targets are SVD-optimal per-user spectral efficiencies; the forward model
replays the beam-management protocol over DiffTensors (discrete selections
held constant, analog projection passed through a straight-through
estimator) and the MSE to the targets is minimized with Adam.

Two generator flavours: ``direct`` optimizes free beamspace images per
cell; ``neural`` is a small fully-convolutional encoder-decoder mapping the
observed feedback beamspace of all cells to beamspace deltas on top of the
DFT baseline, so the same weights apply across array geometries.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import beam_mgmt as bm
from . import codebook as cb
from .autodiff import DiffTensor, Tape
from .channel import ArrayGeometry, ScenarioConfig, draw_user_count, generate_channels, _stream
from .errors import ConfigError, DivergenceError, FormatError, ShapeError

_MASK_TAG = 11


@dataclass
class NblDims:
    """Codebook sizing shared by generators and the forward model."""

    l_max: int = 16
    n_cb: int = 32
    n_csi: int = 16
    b_g: int = 4
    b_phase: int | None = None  # None = ideal phase shifters
    elevation_window: tuple = (-0.6, 0.05)


@dataclass
class TrainingSample:
    obsc: list  # per cell: (L*n_pol, N_XO+1, N_YO+1) complex feedback images
    h: np.ndarray  # (C, U, T, K, N_R, NT) channel slice for the drop
    targets: np.ndarray  # (U,) SVD spectral-efficiency targets
    new_user_mask: np.ndarray


@dataclass
class SelectionPin:
    """Recorded discrete decisions, reusable across FD perturbations."""

    report: bm.FeedbackReport
    subset_indices: list
    chosen: np.ndarray


@dataclass
class ForwardResult:
    pred: DiffTensor  # (U,) predicted achievable SE
    best_rsrp: DiffTensor  # (U,) RSRP of the serving beam (differentiable)
    rsrp: np.ndarray  # (C, L, U) values
    pin: SelectionPin
    record: bm.SinrRecord
    rsrp_dt: DiffTensor = None  # (C, L, U) differentiable RSRP


def compute_targets(h: np.ndarray, assoc: np.ndarray, sigma2: float) -> np.ndarray:
    """Per-user SVD spectral efficiency averaged over the resource grid."""
    h = np.asarray(h, dtype=np.complex128)
    c_cells, n_users, t_slots, k_sub = h.shape[:4]
    out = np.zeros(n_users)
    for u in range(n_users):
        hu = h[assoc[u], u]  # (T, K, N_R, NT)
        sv = np.linalg.svd(hu, compute_uv=False)
        out[u] = np.log2(1.0 + sv ** 2 / sigma2).sum(axis=-1).mean()
    return out


def _inverse_project(params: DiffTensor, pair: cb.TransformPair,
                     geometry: ArrayGeometry, b_phase) -> DiffTensor:
    """Beamspace interiors -> constant-modulus beams, straight-through."""
    n_pol = 2 if geometry.dual_polarized else 1
    n_img = params.shape[0]
    if n_img % n_pol:
        raise ShapeError("image count not divisible by polarization count")
    left = ad.constant(np.conj(pair.u_x_pinv.T))
    right = ad.constant(pair.u_y_pinv)
    mats = ad.matmul(ad.matmul(left, params), right)  # (n_img, N_X, N_Y)
    raw = ad.reshape(mats, (n_img // n_pol, n_pol * geometry.n_x * geometry.n_y))
    # magnitude equalization is smooth, so it gets the exact gradient; only
    # the phase-grid snap needs the straight-through surrogate
    equalized = ad.unit_modulus(raw, 1.0 / np.sqrt(geometry.n_elements))
    if b_phase is None:
        return equalized
    projected = cb.project_analog(equalized.value, b_phase)
    return ad.straight_through(equalized, projected)


def _interiors(beams: np.ndarray, pair: cb.TransformPair,
               geometry: ArrayGeometry) -> np.ndarray:
    """(n_beams*n_pol, N_XO, N_YO) beamspace interiors of fixed beams."""
    img = cb.beamspace_forward(beams, pair, geometry)
    return img.images[:, :pair.n_xo, :pair.n_yo]


def _csirs_columns(csirs: cb.CsirsCodebook) -> np.ndarray:
    """(N_CB*B_g, NT) column-major flattening of the precoder stack."""
    return np.swapaxes(csirs.precoders, 1, 2).reshape(-1, csirs.precoders.shape[1])


class DirectGenerator:
    """Free beamspace parameters per cell, initialized at the DFT baseline."""

    def __init__(self, tape: Tape, cells: int, geometry: ArrayGeometry,
                 dims: NblDims, init_ssb=None, init_csirs=None):
        self.cells = cells
        self.geometry = geometry
        self.dims = dims
        self.pair = cb.make_transform_pair(geometry)
        if init_ssb is None:
            init_ssb = [cb.build_dft_ssb(geometry, dims.l_max,
                                         dims.elevation_window)] * cells
        if init_csirs is None:
            init_csirs = [cb.build_dft_csirs(geometry, dims.n_cb, dims.b_g,
                                             elevation_window=dims.elevation_window)] * cells
        self.ssb_params = []
        self.csirs_params = []
        for c in range(cells):
            self.ssb_params.append(tape.parameter(
                f"ssb{c}", _interiors(init_ssb[c].beams, self.pair, geometry)))
            self.csirs_params.append(tape.parameter(
                f"csirs{c}", _interiors(_csirs_columns(init_csirs[c]), self.pair, geometry)))

    @classmethod
    def from_tape(cls, tape: Tape, cells: int, geometry: ArrayGeometry,
                  dims: NblDims) -> "DirectGenerator":
        """Bind to parameters already present on a tape (checkpoint load)."""
        gen = cls.__new__(cls)
        gen.cells, gen.geometry, gen.dims = cells, geometry, dims
        gen.pair = cb.make_transform_pair(geometry)
        gen.ssb_params = [tape.parameters[f"ssb{c}"] for c in range(cells)]
        gen.csirs_params = [tape.parameters[f"csirs{c}"] for c in range(cells)]
        return gen

    def generate(self, obsc=None):
        ssb, csirs = [], []
        n_t = self.geometry.n_elements
        for c in range(self.cells):
            ssb.append(_inverse_project(self.ssb_params[c], self.pair,
                                        self.geometry, self.dims.b_phase))
            cols = _inverse_project(self.csirs_params[c], self.pair,
                                    self.geometry, self.dims.b_phase)
            stack = ad.reshape(cols, (self.dims.n_cb, self.dims.b_g, n_t))
            csirs.append(ad.swapaxes(stack, 1, 2))  # (N_CB, NT, B_g)
        return ssb, csirs


class NeuralGenerator:
    """Fully-convolutional generator: feedback beamspace in, codebooks out.

    Two stride-2 encoder convolutions, two stride-2 transposed
    convolutions; complex images ride as interleaved (re, im) real channel
    pairs.  The output is a delta added to the DFT baseline beamspace of
    whatever geometry is being evaluated, so weights trained on one array
    size transfer to another.
    """

    def __init__(self, tape: Tape, cells: int, dims: NblDims, n_pol: int = 2,
                 hidden=(16, 32), seed: int = 0):
        self.cells = cells
        self.dims = dims
        self.n_pol = n_pol
        self.cin = cells * dims.l_max * n_pol * 2
        self.cout = cells * (dims.l_max + dims.n_cb * dims.b_g) * n_pol * 2
        h1, h2 = hidden
        rng = np.random.default_rng(seed)

        def init(name, shape, scl):
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * scl / np.sqrt(fan_in)
            return tape.parameter(name, w)

        self.w1 = init("conv1_w", (h1, self.cin, 3, 3), np.sqrt(2.0))
        self.b1 = tape.parameter("conv1_b", np.zeros((1, h1, 1, 1)))
        self.w2 = init("conv2_w", (h2, h1, 3, 3), np.sqrt(2.0))
        self.b2 = tape.parameter("conv2_b", np.zeros((1, h2, 1, 1)))
        self.t1 = init("deconv1_w", (h2, h1, 3, 3), np.sqrt(2.0))
        self.c1 = tape.parameter("deconv1_b", np.zeros((1, h1, 1, 1)))
        self.t2 = init("deconv2_w", (h1, self.cout, 3, 3), 1e-2)
        self.c2 = tape.parameter("deconv2_b", np.zeros((1, self.cout, 1, 1)))

    @classmethod
    def from_tape(cls, tape: Tape, cells: int, dims: NblDims,
                  n_pol: int = 2) -> "NeuralGenerator":
        """Bind to parameters already present on a tape (checkpoint load)."""
        gen = cls.__new__(cls)
        gen.cells, gen.dims, gen.n_pol = cells, dims, n_pol
        gen.cin = cells * dims.l_max * n_pol * 2
        gen.cout = cells * (dims.l_max + dims.n_cb * dims.b_g) * n_pol * 2
        p = tape.parameters
        gen.w1, gen.b1 = p["conv1_w"], p["conv1_b"]
        gen.w2, gen.b2 = p["conv2_w"], p["conv2_b"]
        gen.t1, gen.c1 = p["deconv1_w"], p["deconv1_b"]
        gen.t2, gen.c2 = p["deconv2_w"], p["deconv2_b"]
        return gen

    def _network(self, x: DiffTensor) -> DiffTensor:
        h = ad.relu(ad.add(ad.conv2d(x, self.w1, stride=2, pad=1), self.b1))
        h = ad.relu(ad.add(ad.conv2d(h, self.w2, stride=2, pad=1), self.b2))
        h = ad.relu(ad.add(ad.conv2d_transpose(h, self.t1, stride=2, pad=1), self.c1))
        return ad.add(ad.conv2d_transpose(h, self.t2, stride=2, pad=1), self.c2)

    def generate_for(self, obsc: list, geometry: ArrayGeometry):
        """Emit per-cell codebooks for the geometry the obsc was built on."""
        dims = self.dims
        n_pol = 2 if geometry.dual_polarized else 1
        if n_pol != self.n_pol:
            raise ConfigError("generator polarization does not match geometry")
        pair = cb.make_transform_pair(geometry)
        hh, ww = obsc[0].shape[-2:]
        stacked = np.concatenate([np.asarray(o) for o in obsc], axis=0)
        if stacked.shape[0] * 2 != self.cin:
            raise ShapeError("observation channel count does not match weights")
        x = np.empty((1, self.cin, hh, ww))
        x[0, 0::2], x[0, 1::2] = stacked.real, stacked.imag
        out = self._network(ad.constant(x))
        out = ad.crop2d(out, hh, ww)
        re = ad.take(out, np.arange(0, self.cout, 2), axis=1)
        im = ad.take(out, np.arange(1, self.cout, 2), axis=1)
        delta = ad.add(re, ad.scale(im, 1j))  # (1, cout/2, H, W)
        delta = ad.reshape(delta, (self.cout // 2, hh, ww))
        delta = ad.crop2d(delta, pair.n_xo, pair.n_yo)
        # DFT baseline interiors at the evaluation geometry
        base_ssb = _interiors(cb.build_dft_ssb(geometry, dims.l_max,
                                               dims.elevation_window).beams, pair, geometry)
        base_csirs = _interiors(
            _csirs_columns(cb.build_dft_csirs(
                geometry, dims.n_cb, dims.b_g,
                elevation_window=dims.elevation_window)), pair, geometry)
        per_cell = dims.l_max + dims.n_cb * dims.b_g
        ssb, csirs = [], []
        for c in range(self.cells):
            start = c * per_cell * n_pol
            idx_ssb = np.arange(start, start + dims.l_max * n_pol)
            idx_cs = np.arange(start + dims.l_max * n_pol, start + per_cell * n_pol)
            p_ssb = ad.add(ad.take(delta, idx_ssb, axis=0), ad.constant(base_ssb))
            p_cs = ad.add(ad.take(delta, idx_cs, axis=0), ad.constant(base_csirs))
            ssb.append(_inverse_project(p_ssb, pair, geometry, dims.b_phase))
            cols = _inverse_project(p_cs, pair, geometry, dims.b_phase)
            stack = ad.reshape(cols, (dims.n_cb, dims.b_g, geometry.n_elements))
            csirs.append(ad.swapaxes(stack, 1, 2))
        return ssb, csirs


def forward_model(h: np.ndarray, ssb_dt: list, csirs_dt: list, sigma2: float,
                  n_csi: int, pin: SelectionPin | None = None,
                  new_user_mask=None,
                  disaggregated_cell: int | None = None) -> ForwardResult:
    """Differentiable SSB -> feedback -> CSI-RS -> achievable-SE rollout.

    Discrete selections (association, subsets, resource choice) are either
    recomputed from current values or replayed from ``pin``; they carry no
    gradient.  In disaggregated mode all other cells' codewords are treated
    as fixed interference sources.
    """
    h = np.asarray(h, dtype=np.complex128)
    c_cells, n_users, t_slots, k_sub, n_rx, n_t = h.shape
    geometry_nt = n_t
    if disaggregated_cell is not None:
        ssb_dt = [s if c == disaggregated_cell else ad.stop_gradient(s)
                  for c, s in enumerate(ssb_dt)]
        csirs_dt = [s if c == disaggregated_cell else ad.stop_gradient(s)
                    for c, s in enumerate(csirs_dt)]
    rsrp_parts = [bm.rsrp_tensor(h[c], ssb_dt[c], k_sub, geometry_nt)
                  for c in range(c_cells)]
    rsrp = ad.concat([ad.reshape(r, (1,) + r.shape) for r in rsrp_parts], axis=0)
    rsrp_val = rsrp.value.real
    if pin is None:
        report = bm.aggregate_feedback(rsrp_val, new_user_mask)
        subset_idx = []
        geometry = None  # codebook wrappers only used for correlation math
        for c in range(c_cells):
            ssb_cb = cb.SsbCodebook.__new__(cb.SsbCodebook)
            ssb_cb.beams, ssb_cb.geometry = ssb_dt[c].value, None
            cs_cb = cb.CsirsCodebook.__new__(cb.CsirsCodebook)
            cs_cb.precoders, cs_cb.geometry, cs_cb.active_subset = csirs_dt[c].value, None, None
            sel = bm.select_csirs_subset(ssb_cb, cs_cb, report, c, n_csi)
            subset_idx.append(sel.subset_indices)
    else:
        report, subset_idx = pin.report, pin.subset_indices
    subsets = [ad.take(csirs_dt[c], np.asarray(subset_idx[c]), axis=0)
               for c in range(c_cells)]
    record = bm.csirs_sinr(h, subsets, report.b, sigma2)
    record = bm.achievable_se(record)
    chosen = record.chosen if pin is None else pin.chosen
    record.chosen = chosen
    pred = ad.select_cells(ad.swapaxes(record.se, 0, 1), chosen)  # (U,)
    flat = ad.reshape(rsrp, (c_cells * report.l_max, n_users))
    best = ad.select_cells(flat, report.b * report.l_max + report.m)
    new_pin = SelectionPin(report=report, subset_indices=subset_idx, chosen=chosen)
    return ForwardResult(pred=pred, best_rsrp=best, rsrp=rsrp_val,
                         pin=new_pin, record=record, rsrp_dt=rsrp)


def e2e_loss(targets: np.ndarray, pred: DiffTensor) -> DiffTensor:
    """Mean squared error between target and predicted per-user SE."""
    targets = np.asarray(targets, dtype=float)
    if targets.shape != pred.shape:
        raise ShapeError(f"target shape {targets.shape} != prediction {pred.shape}")
    d = ad.sub(pred, ad.constant(targets))
    return ad.mean_axis(ad.mul(d, d), axis=0)


def ssb_alignment_loss(best_rsrp: DiffTensor, sigma2: float) -> DiffTensor:
    """Negative mean broadcast rate; pulls serving-beam RSRP upward."""
    snr = ad.scale(ad.real(best_rsrp), 1.0 / sigma2)
    return ad.scale(ad.mean_axis(ad.log2_1p(snr), axis=0), -1.0)


def load_balance_loss(rsrp_dt: DiffTensor) -> DiffTensor:
    """Squared deviation of soft per-cell load shares from uniform.

    Each user's strongest-beam RSRP per cell (beam index pinned at the
    current argmax) is normalized across cells into an attachment share; the
    penalty is the summed squared deviation of the mean share per cell from
    1/C.  Discourages codebooks whose beams capture every hotspot user onto
    a single cell, starving the others of spatial reuse.
    """
    c_cells, l_max, n_users = rsrp_dt.shape
    flat = ad.reshape(rsrp_dt, (c_cells * l_max, n_users))
    vals = rsrp_dt.value.real
    per_cell = []
    for c in range(c_cells):
        idx = c * l_max + np.argmax(vals[c], axis=0)
        per_cell.append(ad.reshape(ad.real(ad.select_cells(flat, idx)),
                                   (1, n_users)))
    r = ad.concat(per_cell, axis=0)  # (C, U)
    share = ad.div(r, ad.sum_axis(r, axis=0, keepdims=True))
    load = ad.mean_axis(share, axis=1)  # (C,)
    d = ad.sub(load, ad.constant(np.full(c_cells, 1.0 / c_cells)))
    return ad.sum_axis(ad.mul(d, d), axis=0)


class Adam:
    """Adam over complex parameters: moments on g and |g|^2."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tape: Tape):
        self.step_count += 1
        t = self.step_count
        for name, p in tape.parameters.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros(p.value.shape)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * np.abs(g) ** 2
            mh = self.m[name] / (1 - self.beta1 ** t)
            vh = self.v[name] / (1 - self.beta2 ** t)
            p.value = p.value - self.lr * mh / (np.sqrt(vh) + self.eps)


def build_dataset(config: ScenarioConfig, prior_ssb: list, n_samples: int,
                  seed: int, sigma2: float, new_user_prob: float = 0.2,
                  n_xo: int | None = None, n_yo: int | None = None) -> list:
    """Monte-Carlo triplets (feedback beamspace, channels, SE targets).

    Association and the observed beamspace come from the PRIOR period's SSB
    codebook; users flagged new (prob. ``new_user_prob``) are associated but
    contribute nothing to the beamspace statistics.
    """
    geo = config.geometry
    pair = cb.make_transform_pair(geo, n_xo, n_yo)
    samples = []
    for i in range(n_samples):
        drop_seed = seed * 1000003 + i
        tensor = generate_channels(config, drop_seed)
        h = np.asarray(tensor.values, dtype=np.complex128)
        n_users = h.shape[1]
        mask = _stream(drop_seed, _MASK_TAG, 0).random(n_users) < new_user_prob
        rsrp = np.stack([
            bm.rsrp_tensor(h[c], prior_ssb[c].beams, config.k_subcarriers,
                           geo.n_elements).value.real
            for c in range(config.c_cells)])
        report = bm.aggregate_feedback(rsrp, mask)
        obsc = [cb.beamspace_forward(prior_ssb[c].beams, pair, geo,
                                     report.beam_counts(c), report.beam_rsrp_sums(c)).images
                for c in range(config.c_cells)]
        targets = compute_targets(h, report.b, sigma2)
        samples.append(TrainingSample(obsc=obsc, h=h, targets=targets,
                                      new_user_mask=mask))
    return samples


def _total_loss(sample: TrainingSample, generate, sigma2, n_csi, ssb_weight,
                disaggregated_cell=None, balance_weight=0.0):
    ssb_dt, csirs_dt = generate(sample.obsc)
    fw = forward_model(sample.h, ssb_dt, csirs_dt, sigma2, n_csi,
                       new_user_mask=sample.new_user_mask,
                       disaggregated_cell=disaggregated_cell)
    loss = e2e_loss(sample.targets, fw.pred)
    if ssb_weight:
        loss = ad.add(loss, ad.scale(ssb_alignment_loss(fw.best_rsrp, sigma2),
                                     ssb_weight))
    if balance_weight:
        loss = ad.add(loss, ad.scale(load_balance_loss(fw.rsrp_dt),
                                     balance_weight))
    return loss, fw


def train(dataset: list, generate, tape: Tape, sigma2: float, n_csi: int,
          epochs: int, lr: float = 1e-4, batch_size: int = 4, seed: int = 0,
          ssb_weight: float = 0.0, balance_weight: float = 0.0,
          disaggregated_cells: int | None = None,
          val_fraction: float = 0.1, callback=None) -> list:
    """Mini-batch Adam loop; retains the best-validation parameters.

    ``generate`` maps an obsc list to (ssb, csirs) DiffTensor lists using
    parameters registered on ``tape``.  Returns the per-step training loss
    curve.  Deterministic for fixed seed regardless of worker count (the
    gradient reduction is ordered by sample index).
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    n_val = int(round(len(dataset) * val_fraction))
    val, trainset = dataset[:n_val], dataset[n_val:]
    if not trainset:
        trainset, val = dataset, []
    opt = Adam(lr=lr)
    curve = []
    best_val, best_params = np.inf, None
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(seed * 7919 + epoch).permutation(len(trainset))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            tape.zero_grad()
            batch_loss = 0.0
            for j in batch:
                cell = (step % disaggregated_cells) if disaggregated_cells else None
                loss, _ = _total_loss(trainset[j], generate, sigma2, n_csi,
                                      ssb_weight, cell, balance_weight)
                scaled = ad.scale(loss, 1.0 / len(batch))
                ad.backward(scaled)
                batch_loss += float(loss.value.real) / len(batch)
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            opt.step(tape)
            curve.append(batch_loss)
            if callback is not None:
                callback(step, batch_loss)
            step += 1
        if val:
            vl = 0.0
            for s in val:
                loss, _ = _total_loss(s, generate, sigma2, n_csi, ssb_weight,
                                      balance_weight=balance_weight)
                vl += float(loss.value.real) / len(val)
            if vl < best_val:
                best_val = vl
                best_params = {k: p.value.copy() for k, p in tape.parameters.items()}
    if best_params is not None:
        for k, p in tape.parameters.items():
            p.value = best_params[k]
    return curve


# ----------------------------- checkpoints ------------------------------

_CKPT_MAGIC = b"BMCK"


def save_checkpoint(path, tape: Tape, opt: Adam | None = None,
                    meta: dict | None = None) -> None:
    """Versioned binary dump: JSON meta + parameter registry + moments."""
    meta_b = json.dumps(meta or {}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", 1, len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(tape.parameters)))
        for name, p in tape.parameters.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.value.ndim))
            f.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            f.write(np.ascontiguousarray(p.value, dtype=np.complex128).tobytes())
            if opt is not None and name in opt.m:
                f.write(struct.pack("<B", 1))
                f.write(np.ascontiguousarray(opt.m[name]).tobytes())
                f.write(np.ascontiguousarray(opt.v[name]).tobytes())
            else:
                f.write(struct.pack("<B", 0))
        f.write(struct.pack("<Q", opt.step_count if opt is not None else 0))


def load_checkpoint(path) -> tuple[Tape, Adam, dict]:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise FormatError("not a checkpoint file")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != 1:
            raise FormatError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(meta_len).decode())
        (n_params,) = struct.unpack("<I", f.read(4))
        tape, opt = Tape(), Adam()
        for _ in range(n_params):
            (nl,) = struct.unpack("<I", f.read(4))
            name = f.read(nl).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            val = np.frombuffer(f.read(16 * count), dtype=np.complex128).reshape(shape)
            tape.parameter(name, val.copy())
            (has_mom,) = struct.unpack("<B", f.read(1))
            if has_mom:
                opt.m[name] = np.frombuffer(f.read(16 * count),
                                            dtype=np.complex128).reshape(shape).copy()
                opt.v[name] = np.frombuffer(f.read(8 * count),
                                            dtype=np.float64).reshape(shape).copy()
        (opt.step_count,) = struct.unpack("<Q", f.read(8))
    return tape, opt, meta
